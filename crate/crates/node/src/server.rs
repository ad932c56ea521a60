//! One MPC server process.
//!
//! Threads:
//! - the acceptor takes connections and performs the handshake;
//! - a dialer per lower-numbered peer keeps the mesh link to it alive
//!   (the higher party id always dials);
//! - client threads serve donors and gateways;
//! - the worker owns the party state and runs query sessions.
//!
//! Party 0 coordinates: it starts every session, so sessions are
//! serialized across the deployment, and it settles each one by comparing
//! budget digests with every peer before admitting the next.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use sha2::{Digest, Sha256};
use trendscope_core::dp::{BudgetLedger, RecordKind};
use trendscope_core::engine::{execute, PartyReply, PartyState, PartyStore, StoreKind};
use trendscope_core::mpc::Party;
use trendscope_core::{
    EngineError, Epoch, Epsilon, MpcError, ProjectionMatrix, QueryRequest, ShareBundle,
};

use crate::codec::decode_bundle;
use crate::config::{config_hash, divergent_field, ServerConfig};
use crate::mesh::{Link, LinkError, Mesh};
use crate::persist::StoreDir;
use crate::prep::{Prep, PrepPosition};
use crate::protocol::{
    AlertStatus, AlertView, ErrorBody, ErrorCode, Health, Hello, Settlement, StatusRequest,
    StatusResponse, SubmitAck, TapeSync,
};
use crate::wire::{read_frame, write_frame, Frame, FrameKind, WireError};
use crate::NodeError;

const PREP_FILE: &str = "prep.json";
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
const IDLE_POLL: Duration = Duration::from_millis(25);
const REDIAL_BACKOFF: Duration = Duration::from_millis(100);

/// What the server publishes for status requests.
#[derive(Clone, Debug)]
struct Status {
    ledger: BudgetLedger,
    open_alerts: Vec<AlertView>,
    epochs: Vec<(Epoch, usize)>,
    peers_connected: usize,
    ledger_divergence: bool,
}

type ReplyResult = Result<PartyReply, ErrorBody>;

struct Job {
    session: u64,
    req: QueryRequest,
    reply: Sender<ReplyResult>,
}

/// Gateway requests waiting for the coordinator to start their session.
#[derive(Default)]
struct Registry {
    waiting: Mutex<HashMap<u64, Job>>,
    arrived: Condvar,
}

/// State shared between the worker and the connection threads.
struct Shared {
    cfg: ServerConfig,
    fields: Vec<(String, String)>,
    shutdown: AtomicBool,
    status: RwLock<Status>,
    store: Mutex<StoreDir>,
    /// Donation ids already on disk, for duplicate suppression.
    known: Mutex<HashSet<u64>>,
    deleted: RwLock<BTreeSet<Epoch>>,
    inbox: (Sender<ShareBundle>, Receiver<ShareBundle>),
    installs: (Sender<(usize, Link)>, Receiver<(usize, Link)>),
    jobs: (Sender<Job>, Receiver<Job>),
    registry: Registry,
    redial: Vec<(Sender<()>, Receiver<()>)>,
    mismatch: Mutex<Option<NodeError>>,
    faults: (Sender<Fault>, Receiver<Fault>),
}

/// Deliberate corruption of a running server's state, for exercising the
/// integrity checks.
#[derive(Clone, Copy, Debug)]
pub enum Fault {
    /// Adds `delta` to one stored share without updating its MAC.
    TamperShare {
        epoch: Epoch,
        kind: StoreKind,
        element: usize,
        coord: usize,
        delta: u128,
    },
}

pub struct ServerHandle {
    shared: Arc<Shared>,
    addr: SocketAddr,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn party_id(&self) -> usize {
        self.shared.cfg.party_id
    }

    /// SHA-256 over the settings all servers must agree on.
    pub fn config_hash(&self) -> String {
        config_hash(&self.shared.fields)
    }

    /// Blocks until links to every peer are up. Fails early, naming the
    /// field, if a peer's configuration differs.
    pub fn wait_ready(&self, timeout: Duration) -> Result<(), NodeError> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(e) = self.shared.mismatch.lock().expect("mismatch lock").take() {
                return Err(e);
            }
            let st = self.shared.status.read().expect("status lock");
            if st.peers_connected + 1 == self.shared.cfg.n_parties() {
                return Ok(());
            }
            drop(st);
            if Instant::now() >= deadline {
                return Err(NodeError::Unreachable(
                    "peers did not connect in time".into(),
                ));
            }
            thread::sleep(IDLE_POLL);
        }
    }

    /// Queues a fault; the worker applies it before its next session.
    pub fn inject(&self, fault: Fault) {
        let _ = self.shared.faults.0.send(fault);
    }

    /// Hex digest of the budget state alone, equal on all honest servers.
    pub fn budget_digest(&self) -> String {
        budget_digest(&self.shared.status.read().expect("status lock").ledger)
    }

    /// The full ledger state, including this server's cached shares.
    pub fn budget_snapshot(&self) -> Vec<u8> {
        self.shared
            .status
            .read()
            .expect("status lock")
            .ledger
            .snapshot()
    }

    /// Stops all threads. Everything acknowledged is already on disk.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        // Unblock the acceptor.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn start(cfg: ServerConfig) -> Result<ServerHandle, NodeError> {
    let listener = TcpListener::bind(cfg.listen)?;
    start_on(cfg, listener)
}

/// Like [`start`] with a listener bound by the caller.
pub fn start_on(cfg: ServerConfig, listener: TcpListener) -> Result<ServerHandle, NodeError> {
    cfg.validate()?;
    let addr = listener.local_addr()?;
    let mut store = StoreDir::open(&cfg.store_dir)?;
    let saved: Option<PrepPosition> = store.load_json(PREP_FILE)?;
    let prep = Prep::open(&cfg, saved)?;
    let fields = cfg.agreement_fields(&prep.commitment());

    let eps_f_max = Epsilon::from_f64(cfg.eps_f_max)?;
    let mut ledger = store.load_ledger(eps_f_max)?;
    if ledger.coarse_charge().is_none() {
        let omega2 = ProjectionMatrix::generate(cfg.ell, cfg.k, cfg.projection_seed).omega2();
        ledger.coarse_params(cfg.eps_p, cfg.delta_p, omega2)?;
        store.sync_ledger(&ledger)?;
    }
    let thresholds = store.load_thresholds()?;
    let deleted: BTreeSet<Epoch> = ledger.deleted_epochs().collect();
    let mut party_store = PartyStore::new(cfg.k);
    for e in &deleted {
        party_store.delete_fine(*e);
        store.strip_fine(*e)?;
    }
    let mut known = HashSet::new();
    for mut b in store.replay_shares()? {
        if b.x.is_empty() {
            if !deleted.contains(&b.epoch) {
                return Err(NodeError::Persist(format!(
                    "coarse-only record in epoch {} whose fine store is live",
                    b.epoch
                )));
            }
            b.x = vec![0; cfg.k];
            b.x_sq = vec![0; cfg.k];
        }
        party_store.ingest(&b).map_err(NodeError::Persist)?;
        known.insert(b.donation_id);
    }
    let state = PartyState {
        id: cfg.party_id,
        store: party_store,
        ledger,
        thresholds,
    };

    let n = cfg.n_parties();
    let shared = Arc::new(Shared {
        status: RwLock::new(status_of(&state, 0, false)),
        fields,
        shutdown: AtomicBool::new(false),
        store: Mutex::new(store),
        known: Mutex::new(known),
        deleted: RwLock::new(deleted),
        inbox: unbounded(),
        installs: unbounded(),
        jobs: unbounded(),
        registry: Registry::default(),
        redial: (0..n).map(|_| bounded(1)).collect(),
        mismatch: Mutex::new(None),
        faults: unbounded(),
        cfg,
    });

    let mut threads = Vec::new();
    {
        let shared = Arc::clone(&shared);
        threads.push(thread::spawn(move || accept_loop(shared, listener)));
    }
    for peer in 0..shared.cfg.party_id {
        let shared = Arc::clone(&shared);
        threads.push(thread::spawn(move || dial_loop(shared, peer)));
    }
    {
        let shared = Arc::clone(&shared);
        threads.push(thread::spawn(move || {
            let mut w = Worker {
                mesh: Mesh::new(
                    shared.cfg.party_id,
                    shared.cfg.n_parties(),
                    Duration::from_millis(shared.cfg.query_timeout_ms),
                ),
                state,
                prep,
                divergence: false,
                linked: vec![false; shared.cfg.n_parties()],
                shared,
            };
            w.run();
        }));
    }
    tracing::info!(party = shared.cfg.party_id, %addr, config_hash = %config_hash(&shared.fields), "server started");
    Ok(ServerHandle {
        shared,
        addr,
        threads,
    })
}

fn status_of(state: &PartyState, peers_connected: usize, ledger_divergence: bool) -> Status {
    let open_alerts = state
        .thresholds
        .entries()
        .map(|e| AlertView {
            key: e.key.clone(),
            epoch: e.epoch,
            status: AlertStatus::Open,
            threshold: Some(e.t),
            eps_t: e.eps_t.as_f64(),
            charged_at: None,
        })
        .collect();
    Status {
        ledger: state.ledger.clone(),
        open_alerts,
        epochs: state.store.epochs().map(|(e, s)| (*e, s.count())).collect(),
        peers_connected,
        ledger_divergence,
    }
}

fn budget_digest(ledger: &BudgetLedger) -> String {
    hex::encode(Sha256::digest(ledger.budget_digest()))
}

fn send_error(stream: &mut TcpStream, session: u64, body: &ErrorBody) {
    let _ = write_frame(stream, &Frame::json(FrameKind::Error, session, body));
}

fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    for conn in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = conn else { continue };
        let shared = Arc::clone(&shared);
        thread::spawn(move || {
            if let Err(e) = handle_connection(&shared, stream) {
                tracing::debug!(error = %e, "connection ended");
            }
        });
    }
}

fn handle_connection(shared: &Arc<Shared>, mut stream: TcpStream) -> Result<(), NodeError> {
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    let hello: Hello = read_frame(&mut stream)?.parse_json()?;
    match hello {
        Hello::Peer { party_id, fields } => {
            if party_id <= shared.cfg.party_id || party_id >= shared.cfg.n_parties() {
                send_error(
                    &mut stream,
                    0,
                    &ErrorBody::new(
                        ErrorCode::Malformed,
                        format!(
                            "party {party_id} may not dial party {}",
                            shared.cfg.party_id
                        ),
                    ),
                );
                return Ok(());
            }
            if let Some((field, ours, theirs)) = divergent_field(&shared.fields, &fields) {
                let msg = format!("config mismatch on `{field}`: party {} has {ours}, party {party_id} has {theirs}", shared.cfg.party_id);
                tracing::error!("{msg}");
                send_error(
                    &mut stream,
                    0,
                    &ErrorBody::new(ErrorCode::ConfigMismatch, msg),
                );
                *shared.mismatch.lock().expect("mismatch lock") = Some(NodeError::ConfigMismatch {
                    field,
                    ours,
                    theirs,
                });
                return Ok(());
            }
            write_frame(
                &mut stream,
                &Frame::json(
                    FrameKind::Ack,
                    0,
                    &Hello::Peer {
                        party_id: shared.cfg.party_id,
                        fields: shared.fields.clone(),
                    },
                ),
            )?;
            tracing::info!(
                party = shared.cfg.party_id,
                peer = party_id,
                "peer handshake succeeded"
            );
            let link = Link::spawn(stream)?;
            let _ = shared.installs.0.send((party_id, link));
            Ok(())
        }
        Hello::Client => {
            write_frame(&mut stream, &Frame::new(FrameKind::Ack, 0, Vec::new()))?;
            stream.set_read_timeout(None)?;
            serve_client(shared, stream)
        }
    }
}

fn dial_loop(shared: Arc<Shared>, peer: usize) {
    let addr = shared.cfg.peers[peer];
    while !shared.shutdown.load(Ordering::SeqCst) {
        match dial(&shared, addr) {
            Ok(link) => {
                while shared.redial[peer].1.try_recv().is_ok() {}
                let _ = shared.installs.0.send((peer, link));
                // Wait until the worker reports the link dead.
                loop {
                    if shared.shutdown.load(Ordering::SeqCst) {
                        return;
                    }
                    match shared.redial[peer].1.recv_timeout(IDLE_POLL * 4) {
                        Ok(()) => break,
                        Err(RecvTimeoutError::Timeout) => {}
                        Err(RecvTimeoutError::Disconnected) => return,
                    }
                }
            }
            Err(NodeError::ConfigMismatch {
                field,
                ours,
                theirs,
            }) => {
                tracing::error!(peer, %field, %ours, %theirs, "refusing to start: config mismatch");
                *shared.mismatch.lock().expect("mismatch lock") = Some(NodeError::ConfigMismatch {
                    field,
                    ours,
                    theirs,
                });
                return;
            }
            Err(_) => thread::sleep(REDIAL_BACKOFF),
        }
    }
}

fn dial(shared: &Shared, addr: SocketAddr) -> Result<Link, NodeError> {
    let mut stream = TcpStream::connect_timeout(&addr, HANDSHAKE_TIMEOUT)?;
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    write_frame(
        &mut stream,
        &Frame::json(
            FrameKind::Handshake,
            0,
            &Hello::Peer {
                party_id: shared.cfg.party_id,
                fields: shared.fields.clone(),
            },
        ),
    )?;
    let reply = read_frame(&mut stream)?;
    match reply.kind {
        FrameKind::Ack => {
            let Hello::Peer { fields, .. } = reply.parse_json()? else {
                return Err(NodeError::Persist(
                    "peer answered the handshake as a client".into(),
                ));
            };
            if let Some((field, ours, theirs)) = divergent_field(&shared.fields, &fields) {
                return Err(NodeError::ConfigMismatch {
                    field,
                    ours,
                    theirs,
                });
            }
            Ok(Link::spawn(stream)?)
        }
        FrameKind::Error => {
            let body: ErrorBody = reply.parse_json()?;
            if body.code == ErrorCode::ConfigMismatch {
                let theirs = divergence_from_message(&body.message);
                return Err(theirs);
            }
            Err(body.into())
        }
        other => Err(WireError::Body(format!("unexpected {other:?} in handshake")).into()),
    }
}

/// Recovers the field name from a peer's mismatch message.
fn divergence_from_message(msg: &str) -> NodeError {
    let field = msg.split('`').nth(1).unwrap_or("unknown").to_string();
    NodeError::ConfigMismatch {
        field,
        ours: "(see peer log)".into(),
        theirs: msg.to_string(),
    }
}

fn serve_client(shared: &Arc<Shared>, mut stream: TcpStream) -> Result<(), NodeError> {
    let mut reader = BufReader::new(stream.try_clone()?);
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(WireError::Closed) => return Ok(()),
            Err(e) => {
                send_error(
                    &mut stream,
                    0,
                    &ErrorBody::new(ErrorCode::Malformed, e.to_string()),
                );
                return Err(e.into());
            }
        };
        let session = frame.session;
        let reply = match frame.kind {
            FrameKind::SubmitShares => match ingest(shared, &frame) {
                Ok(ack) => Frame::json(FrameKind::Ack, session, &ack),
                Err(e) => Frame::json(
                    FrameKind::Error,
                    session,
                    &ErrorBody::new(ErrorCode::Malformed, e.to_string()),
                ),
            },
            FrameKind::QueryRequest => match frame.parse_json::<QueryRequest>() {
                Ok(req) => match submit_query(shared, session, req) {
                    Ok(r) => Frame::json(FrameKind::QueryResponseShare, session, &r),
                    Err(e) => Frame::json(FrameKind::Error, session, &e),
                },
                Err(e) => Frame::json(
                    FrameKind::Error,
                    session,
                    &ErrorBody::new(ErrorCode::Malformed, e.to_string()),
                ),
            },
            FrameKind::BudgetEvent => match frame.parse_json::<StatusRequest>() {
                Ok(req) => Frame::json(
                    FrameKind::BudgetEvent,
                    session,
                    &status_response(shared, req),
                ),
                Err(e) => Frame::json(
                    FrameKind::Error,
                    session,
                    &ErrorBody::new(ErrorCode::Malformed, e.to_string()),
                ),
            },
            other => Frame::json(
                FrameKind::Error,
                session,
                &ErrorBody::new(
                    ErrorCode::Malformed,
                    format!("clients may not send {other:?}"),
                ),
            ),
        };
        write_frame(&mut stream, &reply)?;
    }
}

/// Writes the bundle durably, then hands it to the worker.
fn ingest(shared: &Shared, frame: &Frame) -> Result<SubmitAck, NodeError> {
    let b = decode_bundle(&frame.body)?;
    if b.party_id != shared.cfg.party_id {
        return Err(WireError::Body(format!(
            "bundle for party {} sent to party {}",
            b.party_id, shared.cfg.party_id
        ))
        .into());
    }
    if !b.is_well_formed(shared.cfg.k) {
        return Err(
            WireError::Body(format!("bundle vectors must have {} entries", shared.cfg.k)).into(),
        );
    }
    let mut known = shared.known.lock().expect("known lock");
    if known.contains(&b.donation_id) {
        return Ok(SubmitAck {
            fine_stored: false,
            duplicate: true,
        });
    }
    let mut store = shared.store.lock().expect("store lock");
    let fine = !shared
        .deleted
        .read()
        .expect("deleted lock")
        .contains(&b.epoch);
    store.append(&b, fine)?;
    known.insert(b.donation_id);
    drop(store);
    drop(known);
    let _ = shared.inbox.0.send(b);
    Ok(SubmitAck {
        fine_stored: fine,
        duplicate: false,
    })
}

fn submit_query(shared: &Shared, session: u64, req: QueryRequest) -> ReplyResult {
    req.validate(shared.cfg.k)
        .map_err(|e| ErrorBody::new(ErrorCode::Malformed, e.to_string()))?;
    let (tx, rx) = bounded(1);
    let job = Job {
        session,
        req,
        reply: tx,
    };
    if shared.cfg.party_id == 0 {
        shared
            .jobs
            .0
            .send(job)
            .map_err(|_| ErrorBody::new(ErrorCode::Internal, "server shutting down"))?;
        return rx
            .recv()
            .unwrap_or_else(|_| Err(ErrorBody::new(ErrorCode::Internal, "server shutting down")));
    }
    let patience = Duration::from_millis(shared.cfg.query_timeout_ms) * 4;
    shared
        .registry
        .waiting
        .lock()
        .expect("registry lock")
        .insert(session, job);
    shared.registry.arrived.notify_all();
    match rx.recv_timeout(patience) {
        Ok(r) => r,
        Err(_) => {
            shared
                .registry
                .waiting
                .lock()
                .expect("registry lock")
                .remove(&session);
            Err(ErrorBody::new(
                ErrorCode::PeerUnreachable,
                "the coordinator never started this session",
            ))
        }
    }
}

fn status_response(shared: &Shared, req: StatusRequest) -> StatusResponse {
    let st = shared.status.read().expect("status lock");
    match req {
        StatusRequest::Budget { epochs } => {
            let epochs: Vec<Epoch> = match epochs {
                Some(e) => e,
                None => {
                    let mut all: BTreeSet<Epoch> = st.epochs.iter().map(|(e, _)| *e).collect();
                    all.extend(st.ledger.touched_epochs());
                    all.into_iter().collect()
                }
            };
            StatusResponse::Budget(st.ledger.view(epochs))
        }
        StatusRequest::Alerts => {
            let mut alerts = st.open_alerts.clone();
            alerts.extend(
                st.ledger
                    .records()
                    .iter()
                    .filter(|r| r.kind == RecordKind::Ft)
                    .map(|r| AlertView {
                        key: r.query_hash.clone(),
                        epoch: r.epoch.unwrap_or_default(),
                        status: AlertStatus::Fired,
                        threshold: None,
                        eps_t: r.eps.as_f64(),
                        charged_at: Some(r.seq),
                    }),
            );
            StatusResponse::Alerts { alerts }
        }
        StatusRequest::Health => StatusResponse::Health(Health {
            party_id: shared.cfg.party_id,
            peers_connected: st.peers_connected,
            n_parties: shared.cfg.n_parties(),
            epochs: st.epochs.clone(),
            ledger_divergence: st.ledger_divergence,
        }),
    }
}

struct Worker {
    shared: Arc<Shared>,
    mesh: Mesh,
    state: PartyState,
    prep: Prep,
    divergence: bool,
    /// Which dialed links were up at the last check.
    linked: Vec<bool>,
}

impl Worker {
    fn id(&self) -> usize {
        self.shared.cfg.party_id
    }

    fn run(&mut self) {
        while !self.shared.shutdown.load(Ordering::SeqCst) {
            self.housekeeping();
            if self.id() == 0 {
                match self.shared.jobs.1.recv_timeout(IDLE_POLL) {
                    Ok(job) => self.coordinate(job),
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            } else {
                self.follow();
            }
        }
    }

    fn housekeeping(&mut self) {
        let mut changed = false;
        while let Ok((party, link)) = self.shared.installs.1.try_recv() {
            self.mesh.install(party, link);
            changed = true;
        }
        while let Ok(b) = self.shared.inbox.1.try_recv() {
            let b = self.fill_coarse_only(b);
            if let Err(e) = self.state.store.ingest(&b) {
                tracing::error!(error = %e, "stored donation rejected by the share store");
            }
            changed = true;
        }
        while let Ok(Fault::TamperShare {
            epoch,
            kind,
            element,
            coord,
            delta,
        }) = self.shared.faults.1.try_recv()
        {
            if !self.state.store.tamper(epoch, kind, element, coord, delta) {
                tracing::warn!(epoch, element, coord, "fault target does not exist");
            }
        }
        for p in 0..self.id() {
            let up = self.mesh.has_link(p);
            if self.linked[p] && !up {
                let _ = self.shared.redial[p].0.try_send(());
                changed = true;
            }
            self.linked[p] = up;
        }
        if changed {
            self.publish();
        }
    }

    fn fill_coarse_only(&self, mut b: ShareBundle) -> ShareBundle {
        if b.x.is_empty() {
            b.x = vec![0; self.shared.cfg.k];
            b.x_sq = vec![0; self.shared.cfg.k];
        }
        b
    }

    fn publish(&self) {
        *self.shared.status.write().expect("status lock") =
            status_of(&self.state, self.mesh.connected(), self.divergence);
    }

    /// Waits for the coordinator's next session start.
    fn follow(&mut self) {
        let Some(link) = self.mesh.link(0) else {
            thread::sleep(IDLE_POLL);
            return;
        };
        match link.recv(IDLE_POLL) {
            Ok(f) if f.kind == FrameKind::QueryRequest => self.participate(f),
            Ok(_) => {}
            Err(LinkError::Timeout) => {}
            Err(LinkError::Closed(e)) => {
                tracing::warn!(party = self.id(), error = %e, "lost coordinator link");
                self.mesh.drop_link(0);
                self.publish();
            }
        }
    }

    fn coordinate(&mut self, job: Job) {
        self.housekeeping();
        let Job {
            session,
            req,
            reply,
        } = job;
        let outcome = (|| {
            if !self.mesh.complete() {
                return Err(ErrorBody::new(
                    ErrorCode::PeerUnreachable,
                    "not every server is connected",
                ));
            }
            self.mesh.begin(session);
            self.mesh
                .broadcast(&Frame::json(FrameKind::QueryRequest, session, &req))
                .map_err(|e| ErrorBody::from_engine(&e.into()))?;
            let r = self.session(&req, None)?;
            self.settle_as_coordinator();
            Ok(r)
        })();
        self.publish();
        let _ = reply.send(outcome);
    }

    fn participate(&mut self, frame: Frame) {
        // Donations acknowledged before the query was sent must be visible.
        self.housekeeping();
        let session = frame.session;
        self.mesh.begin(session);
        let req: Result<QueryRequest, _> = frame.parse_json();
        let job = self.await_registration(session);
        let reject = match (&req, &job) {
            (Err(e), _) => Some(format!("unreadable request: {e}")),
            (_, None) => Some("no querier registered this session".to_string()),
            (Ok(r), Some(j)) if *r != j.req => {
                Some("querier and coordinator sent different requests".to_string())
            }
            _ => None,
        };
        let outcome = match req {
            Ok(req) => self
                .session(&req, reject)
                .inspect(|_| self.settle_as_peer()),
            Err(e) => Err(ErrorBody::new(ErrorCode::Malformed, e.to_string())),
        };
        self.publish();
        if let Some(job) = job {
            let _ = job.reply.send(outcome);
        }
    }

    fn await_registration(&self, session: u64) -> Option<Job> {
        let deadline = Instant::now() + self.mesh.timeout();
        let mut waiting = self.shared.registry.waiting.lock().expect("registry lock");
        loop {
            if let Some(job) = waiting.remove(&session) {
                return Some(job);
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            waiting = self
                .shared
                .registry
                .arrived
                .wait_timeout(waiting, deadline - now)
                .expect("registry lock")
                .0;
        }
    }

    /// Runs one query jointly with the peers and persists its effects.
    fn session(&mut self, req: &QueryRequest, reject: Option<String>) -> ReplyResult {
        let result = self.run_protocol(req, reject);
        self.save_position();
        match result {
            Ok(reply) => {
                self.persist(&reply)
                    .map_err(|e| ErrorBody::new(ErrorCode::Internal, e.to_string()))?;
                Ok(reply)
            }
            Err(e) => {
                let body = ErrorBody::from_engine(&e);
                self.mesh.abort(&body);
                tracing::warn!(party = self.id(), error = %e, "query aborted without charge");
                Err(body)
            }
        }
    }

    fn run_protocol(
        &mut self,
        req: &QueryRequest,
        reject: Option<String>,
    ) -> Result<PartyReply, EngineError> {
        let sync = TapeSync {
            position: self.prep.position(),
            reject,
        };
        let all = self.mesh.exchange_json(FrameKind::TapeSync, &sync)?;
        if let Some((p, why)) = all
            .iter()
            .enumerate()
            .find_map(|(p, s)| s.reject.as_ref().map(|w| (p, w)))
        {
            return Err(
                MpcError::Malformed(format!("party {p} rejected the session: {why}")).into(),
            );
        }
        let positions: Vec<PrepPosition> = all.into_iter().map(|s| s.position).collect();
        self.prep.advance_to(&PrepPosition::furthest(&positions)?)?;
        let mut party = Party::new(&mut self.mesh, &mut self.prep)?;
        execute(&mut party, &mut self.state, req)
    }

    fn save_position(&self) {
        let store = self.shared.store.lock().expect("store lock");
        if let Err(e) = store.save_json(PREP_FILE, &self.prep.position()) {
            tracing::error!(error = %e, "could not save preprocessing position");
        }
    }

    fn persist(&mut self, reply: &PartyReply) -> Result<(), NodeError> {
        let mut store = self.shared.store.lock().expect("store lock");
        store.sync_ledger(&self.state.ledger)?;
        for r in reply.receipts.iter().filter(|r| r.delete_fine_store) {
            self.shared
                .deleted
                .write()
                .expect("deleted lock")
                .insert(r.epoch);
            store.strip_fine(r.epoch)?;
            tracing::info!(
                party = self.id(),
                epoch = r.epoch,
                "epoch budget exhausted; fine store deleted"
            );
        }
        store.save_thresholds(&self.state.thresholds)?;
        Ok(())
    }

    fn settle_as_coordinator(&mut self) {
        let mine = Settlement {
            budget_digest: budget_digest(&self.state.ledger),
        };
        let session = self.mesh.session();
        if self
            .mesh
            .broadcast(&Frame::json(FrameKind::BudgetEvent, session, &mine))
            .is_err()
        {
            return;
        }
        let mut session_digests = BTreeMap::new();
        for p in 1..self.shared.cfg.n_parties() {
            match self
                .mesh
                .recv_from(p, FrameKind::BudgetEvent)
                .map(|f| f.parse_json::<Settlement>())
            {
                Ok(Ok(s)) => {
                    session_digests.insert(p, s.budget_digest);
                }
                other => tracing::warn!(peer = p, ?other, "no settlement answer"),
            }
        }
        if session_digests.values().any(|d| *d != mine.budget_digest) {
            tracing::error!(?session_digests, ours = %mine.budget_digest, "budget ledgers diverged");
            self.divergence = true;
        }
    }

    fn settle_as_peer(&mut self) {
        let ours = budget_digest(&self.state.ledger);
        match self.mesh.recv_from(0, FrameKind::BudgetEvent) {
            Ok(f) => {
                if let Ok(s) = f.parse_json::<Settlement>() {
                    if s.budget_digest != ours {
                        tracing::error!(
                            party = self.id(),
                            "budget ledger differs from the coordinator's"
                        );
                        self.divergence = true;
                    }
                }
                let session = self.mesh.session();
                let _ = self.mesh.send_to(
                    0,
                    Frame::json(
                        FrameKind::BudgetEvent,
                        session,
                        &Settlement {
                            budget_digest: ours,
                        },
                    ),
                );
            }
            Err(e) => {
                tracing::warn!(party = self.id(), error = %e, "no settlement from coordinator")
            }
        }
    }
}
