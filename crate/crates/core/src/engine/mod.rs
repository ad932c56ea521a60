//! Query execution over per-epoch share stores.
//!
//! [`execute`] is the per-server protocol and is transport-agnostic;
//! [`Engine`] runs all servers in one process over a local mesh.

mod exec;
mod store;

use rand::RngCore;

use crate::dp::{BudgetLedger, DpError, Epsilon};
use crate::epoch::Epoch;
use crate::intake::{share_out, CoarseNoiseParams, IntakeError, ProjectedEmbedding, ShareBundle};
use crate::mpc::{
    run_local, Dealer, DealerPool, MpcError, NoiseMode, OpenFault, Party, PoolHandle,
};
use crate::query::{QueryError, QueryKind, QueryRequest, QueryResponse};

pub use exec::{
    assemble, execute, shared_match_counts, EpochReply, PartyReply, PartyState, COUNT_WIDTH,
    DISTANCE_WIDTH,
};
pub use store::{ElementShares, EpochStore, IngestOutcome, PartyStore, StoreKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Intake(#[from] IntakeError),
    #[error("malformed: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub n_parties: usize,
    /// Projected dimension.
    pub k: usize,
    pub eps_f_max: f64,
    pub macs: bool,
    pub noise: NoiseMode,
    pub dealer_seed: u64,
}

impl EngineConfig {
    pub fn new(n_parties: usize, k: usize, eps_f_max: f64) -> Self {
        EngineConfig {
            n_parties,
            k,
            eps_f_max,
            macs: true,
            noise: NoiseMode::Live,
            dealer_seed: 0,
        }
    }
}

/// All servers of a deployment, simulated in-process.
pub struct Engine {
    config: EngineConfig,
    pool: DealerPool,
    handles: Vec<PoolHandle>,
    states: Vec<PartyState>,
    faults: Vec<Vec<OpenFault>>,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        if config.n_parties < 2 {
            return Err(MpcError::TooFewParties(config.n_parties).into());
        }
        let eps_f_max = Epsilon::from_f64(config.eps_f_max)?;
        let pool = DealerPool::new(Dealer::new(
            config.n_parties,
            config.dealer_seed,
            config.macs,
            config.noise,
        ));
        Ok(Engine {
            handles: (0..config.n_parties).map(|p| pool.handle(p)).collect(),
            states: (0..config.n_parties)
                .map(|p| PartyState::new(p, config.k, eps_f_max))
                .collect(),
            faults: vec![Vec::new(); config.n_parties],
            pool,
            config,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn pool(&self) -> &DealerPool {
        &self.pool
    }

    /// Records the one-time coarse charge on every server's ledger.
    pub fn setup_coarse(
        &mut self,
        eps_p: f64,
        delta_p: f64,
        omega2: f64,
    ) -> Result<CoarseNoiseParams, EngineError> {
        let mut params = None;
        for s in &mut self.states {
            params = Some(s.ledger.coarse_params(eps_p, delta_p, omega2)?);
        }
        Ok(params.expect("at least two parties"))
    }

    /// Files one bundle per server.
    pub fn ingest(&mut self, bundles: &[ShareBundle]) -> Result<IngestOutcome, EngineError> {
        if bundles.len() != self.states.len()
            || bundles.iter().enumerate().any(|(p, b)| b.party_id != p)
        {
            return Err(EngineError::Malformed(
                "need exactly one bundle per server, in order".into(),
            ));
        }
        let mut outcome = None;
        for (s, b) in self.states.iter_mut().zip(bundles) {
            outcome = Some(s.store.ingest(b).map_err(EngineError::Malformed)?);
        }
        Ok(outcome.expect("at least two parties"))
    }

    /// Shares and files a prepared embedding.
    pub fn donate<R: RngCore>(
        &mut self,
        pe: &ProjectedEmbedding,
        rng: &mut R,
    ) -> Result<IngestOutcome, EngineError> {
        let bundles = share_out(pe, self.states.len(), rng)?;
        self.ingest(&bundles)
    }

    /// Runs a query of any kind over its epoch range.
    pub fn run(&mut self, req: &QueryRequest) -> Result<QueryResponse, EngineError> {
        req.validate(self.config.k)?;
        let faults = std::mem::replace(&mut self.faults, vec![Vec::new(); self.states.len()]);
        let mut work: Vec<(&mut PoolHandle, &mut PartyState, Vec<OpenFault>)> = self
            .handles
            .iter_mut()
            .zip(self.states.iter_mut())
            .zip(faults)
            .map(|((h, s), f)| (h, s, f))
            .collect();
        let results = run_local(&mut work, |(prep, state, faults), chan| {
            let party = Party::new(chan, *prep)?.with_faults(std::mem::take(faults));
            let mut party = party;
            execute(&mut party, state, req).map_err(|e| match e {
                EngineError::Mpc(m) => m,
                other => MpcError::Malformed(other.to_string()),
            })
        });
        let mut replies = Vec::with_capacity(results.len());
        let mut first_err: Option<MpcError> = None;
        for r in results {
            match r {
                Ok(reply) => replies.push(reply),
                Err(e) => {
                    let worse = matches!(first_err, None | Some(MpcError::PeerUnreachable(_)));
                    if worse {
                        first_err = Some(e);
                    }
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e.into());
        }
        assemble(&replies)
    }

    fn run_kind(
        &mut self,
        kind: QueryKind,
        req: &QueryRequest,
    ) -> Result<QueryResponse, EngineError> {
        if req.kind != kind {
            return Err(QueryError(format!("expected a {kind} query, got {}", req.kind)).into());
        }
        self.run(req)
    }

    pub fn run_fc(&mut self, req: &QueryRequest) -> Result<QueryResponse, EngineError> {
        self.run_kind(QueryKind::Fc, req)
    }

    pub fn run_ft(&mut self, req: &QueryRequest) -> Result<QueryResponse, EngineError> {
        self.run_kind(QueryKind::Ft, req)
    }

    pub fn run_cc(&mut self, req: &QueryRequest) -> Result<QueryResponse, EngineError> {
        self.run_kind(QueryKind::Cc, req)
    }

    pub fn run_ct(&mut self, req: &QueryRequest) -> Result<QueryResponse, EngineError> {
        self.run_kind(QueryKind::Ct, req)
    }

    /// Per-epoch series over the request's range; identical to [`Engine::run`].
    pub fn run_trend(&mut self, req: &QueryRequest) -> Result<QueryResponse, EngineError> {
        self.run(req)
    }

    pub fn ledger(&self, party: usize) -> &BudgetLedger {
        &self.states[party].ledger
    }

    pub fn state(&self, party: usize) -> &PartyState {
        &self.states[party]
    }

    pub fn state_mut(&mut self, party: usize) -> &mut PartyState {
        &mut self.states[party]
    }

    /// Corrupts one value `party` sends in its `open_index`-th opening of
    /// the next query.
    pub fn inject_open_fault(&mut self, party: usize, fault: OpenFault) {
        self.faults[party].push(fault);
    }

    /// Adds `delta` to a stored share on one server, leaving its MAC as is.
    pub fn tamper_stored_share(
        &mut self,
        party: usize,
        epoch: Epoch,
        kind: StoreKind,
        element: usize,
        coord: usize,
        delta: u128,
    ) -> bool {
        self.states[party]
            .store
            .tamper(epoch, kind, element, coord, delta)
    }
}
