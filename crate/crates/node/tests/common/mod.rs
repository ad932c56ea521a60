#![allow(dead_code)]

use std::net::{SocketAddr, TcpListener};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use tempfile::TempDir;
use trendscope_core::intake::{share_out, CoarseNoiseParams, ProjectedEmbedding, ProjectionMatrix};
use trendscope_core::synth::{generate_corpus, prepare_all, CorpusSpec};
use trendscope_core::{EpochRange, QueryKind, QueryRequest};
use trendscope_node::{ClusterClient, Donor, PrepSource, ServerConfig, ServerHandle};

pub const K: usize = 16;
pub const ELL: usize = 32;
pub const PROJECTION_SEED: u64 = 7;
pub const TIMEOUT: Duration = Duration::from_secs(5);

pub struct Cluster {
    pub dir: TempDir,
    pub cfgs: Vec<ServerConfig>,
    pub servers: Vec<Option<ServerHandle>>,
}

pub fn config(
    party_id: usize,
    peers: &[SocketAddr],
    dir: &TempDir,
    eps_f_max: f64,
) -> ServerConfig {
    ServerConfig {
        party_id,
        listen: peers[party_id],
        peers: peers.to_vec(),
        store_dir: dir.path().join(format!("p{party_id}")),
        k: K,
        ell: ELL,
        projection_seed: PROJECTION_SEED,
        eps_f_max,
        eps_p: 2.0,
        delta_p: 1e-5,
        macs: true,
        zero_noise: true,
        query_timeout_ms: 2_000,
        preprocessing: PrepSource::Seeded { seed: 11 },
    }
}

pub fn listeners(n: usize) -> (Vec<TcpListener>, Vec<SocketAddr>) {
    let ls: Vec<TcpListener> = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0").unwrap())
        .collect();
    let addrs = ls.iter().map(|l| l.local_addr().unwrap()).collect();
    (ls, addrs)
}

impl Cluster {
    pub fn start(n: usize, eps_f_max: f64) -> Self {
        Self::start_with(n, eps_f_max, |_| {})
    }

    pub fn start_with(n: usize, eps_f_max: f64, tweak: impl Fn(&mut ServerConfig)) -> Self {
        let dir = TempDir::new().unwrap();
        let (ls, addrs) = listeners(n);
        let cfgs: Vec<ServerConfig> = (0..n)
            .map(|p| {
                let mut c = config(p, &addrs, &dir, eps_f_max);
                tweak(&mut c);
                c
            })
            .collect();
        let servers = cfgs
            .iter()
            .cloned()
            .zip(ls)
            .map(|(c, l)| Some(trendscope_node::start_on(c, l).unwrap()))
            .collect();
        let c = Cluster { dir, cfgs, servers };
        c.wait_ready();
        c
    }

    pub fn wait_ready(&self) {
        for s in self.servers.iter().flatten() {
            s.wait_ready(Duration::from_secs(20)).unwrap();
        }
    }

    pub fn addrs(&self) -> Vec<SocketAddr> {
        self.cfgs.iter().map(|c| c.listen).collect()
    }

    pub fn client(&self) -> ClusterClient {
        ClusterClient::new(self.addrs(), TIMEOUT)
    }

    pub fn server(&self, p: usize) -> &ServerHandle {
        self.servers[p].as_ref().unwrap()
    }

    pub fn stop(&mut self, p: usize) {
        if let Some(s) = self.servers[p].take() {
            s.shutdown();
        }
    }

    pub fn restart(&mut self, p: usize) {
        self.stop(p);
        self.servers[p] = Some(trendscope_node::start(self.cfgs[p].clone()).unwrap());
    }

    pub fn donate(&self, pes: &[ProjectedEmbedding]) {
        let mut donor = Donor::connect(&self.addrs(), TIMEOUT).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for pe in pes {
            donor
                .submit(&share_out(pe, self.cfgs.len(), &mut rng).unwrap())
                .unwrap();
        }
    }
}

pub fn projection() -> ProjectionMatrix {
    ProjectionMatrix::generate(ELL, K, PROJECTION_SEED)
}

pub fn spec(first_epoch: i64, epochs: usize, background: usize, topic: usize) -> CorpusSpec {
    CorpusSpec {
        dim: ELL,
        first_epoch,
        epochs,
        background_per_epoch: background,
        topic_per_epoch: topic,
        topic_spread: 0.35,
        spike: None,
    }
}

/// Projected corpus and the projected topic direction.
pub fn corpus(
    spec: &CorpusSpec,
    seed: u64,
    params: &CoarseNoiseParams,
) -> (Vec<f64>, Vec<ProjectedEmbedding>) {
    let p = projection();
    let c = generate_corpus(spec, seed);
    let pes = prepare_all(&c.messages, &p, params, seed).unwrap();
    (unit(p.project(&c.topic)), pes)
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn request(
    kind: QueryKind,
    q: &[f64],
    radius: f64,
    epochs: EpochRange,
    eps: Option<f64>,
) -> QueryRequest {
    QueryRequest {
        kind,
        q: q.to_vec(),
        radius,
        threshold: None,
        epochs,
        eps,
    }
}

/// Polls until `f` holds; donations reach the worker asynchronously.
pub fn eventually(mut f: impl FnMut() -> bool) -> bool {
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    while std::time::Instant::now() < deadline {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    false
}
