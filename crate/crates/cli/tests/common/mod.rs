#![allow(dead_code)]

use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::time::Duration;

use tempfile::TempDir;
use trendscope_cli::{donate, tools, DonateOptions, DonateReport};
use trendscope_core::synth::CorpusSpec;
use trendscope_core::ProjectionMatrix;
use trendscope_node::{GatewayConfig, PrepSource, ServerConfig, ServerHandle};

pub const K: usize = 32;
pub const ELL: usize = 64;
pub const PROJECTION_SEED: u64 = 71;
pub const EPS_P: f64 = 2.0;
pub const DELTA_P: f64 = 1e-5;
pub const FIRST_EPOCH: i64 = 19_500;
pub const TIMEOUT: Duration = Duration::from_secs(20);

/// Three servers, a gateway in front of them, and the shared setup files.
pub struct Deployment {
    pub dir: TempDir,
    pub cfgs: Vec<ServerConfig>,
    pub servers: Vec<Option<ServerHandle>>,
    pub gateway: String,
    pub projection_path: PathBuf,
    runtime: Option<tokio::runtime::Runtime>,
}

pub fn server_config(
    party_id: usize,
    peers: &[SocketAddr],
    dir: &Path,
    eps_f_max: f64,
) -> ServerConfig {
    ServerConfig {
        party_id,
        listen: peers[party_id],
        peers: peers.to_vec(),
        store_dir: dir.join(format!("p{party_id}")),
        k: K,
        ell: ELL,
        projection_seed: PROJECTION_SEED,
        eps_f_max,
        eps_p: EPS_P,
        delta_p: DELTA_P,
        macs: true,
        zero_noise: true,
        query_timeout_ms: 10_000,
        preprocessing: PrepSource::Seeded { seed: 11 },
    }
}

pub fn free_addrs(n: usize) -> (Vec<TcpListener>, Vec<SocketAddr>) {
    let ls: Vec<TcpListener> = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0").unwrap())
        .collect();
    let addrs = ls.iter().map(|l| l.local_addr().unwrap()).collect();
    (ls, addrs)
}

impl Deployment {
    pub fn start(eps_f_max: f64) -> Self {
        Self::start_with_token(eps_f_max, None)
    }

    pub fn start_with_token(eps_f_max: f64, token: Option<&str>) -> Self {
        let dir = TempDir::new().unwrap();
        let projection_path = dir.path().join("projection.bin");
        tools::setup(ELL, K, PROJECTION_SEED, &projection_path).unwrap();
        let (ls, addrs) = free_addrs(3);
        let cfgs: Vec<ServerConfig> = (0..3)
            .map(|p| server_config(p, &addrs, dir.path(), eps_f_max))
            .collect();
        let servers: Vec<Option<ServerHandle>> = cfgs
            .iter()
            .cloned()
            .zip(ls)
            .map(|(c, l)| Some(trendscope_node::start_on(c, l).unwrap()))
            .collect();
        for s in servers.iter().flatten() {
            s.wait_ready(TIMEOUT).unwrap();
        }
        let gw = TcpListener::bind("127.0.0.1:0").unwrap();
        let gateway = format!("http://{}", gw.local_addr().unwrap());
        gw.set_nonblocking(true).unwrap();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let cfg = GatewayConfig {
            servers: addrs,
            token: token.map(str::to_string),
            projection: Some(ProjectionMatrix::load(&projection_path).unwrap()),
            timeout: TIMEOUT,
        };
        runtime.spawn(async move {
            let l = tokio::net::TcpListener::from_std(gw).unwrap();
            trendscope_node::gateway::serve(cfg, l).await.unwrap();
        });
        Deployment {
            dir,
            cfgs,
            servers,
            gateway,
            projection_path,
            runtime: Some(runtime),
        }
    }

    pub fn addrs(&self) -> Vec<SocketAddr> {
        self.cfgs.iter().map(|c| c.listen).collect()
    }

    pub fn projection(&self) -> ProjectionMatrix {
        ProjectionMatrix::load(&self.projection_path).unwrap()
    }

    pub fn stop_server(&mut self, p: usize) {
        if let Some(s) = self.servers[p].take() {
            s.shutdown();
        }
    }

    pub fn donate_file(&self, path: &Path, seed: u64) -> DonateReport {
        let opts = DonateOptions {
            servers: self.addrs(),
            projection: self.projection(),
            eps_p: EPS_P,
            delta_p: DELTA_P,
            seed,
            timeout: TIMEOUT,
        };
        donate(
            std::io::BufReader::new(std::fs::File::open(path).unwrap()),
            &opts,
        )
        .unwrap()
    }

    /// Writes a synthetic corpus into the deployment directory.
    pub fn synth(&self, name: &str, spec: &CorpusSpec, seed: u64) -> (PathBuf, Vec<f64>) {
        let path = self.dir.path().join(name);
        let topic = tools::synth(spec, seed, std::fs::File::create(&path).unwrap()).unwrap();
        (path, topic)
    }
}

impl Drop for Deployment {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
        for s in self.servers.iter_mut() {
            if let Some(s) = s.take() {
                s.shutdown();
            }
        }
    }
}

pub fn spec(
    epochs: usize,
    background: usize,
    topic: usize,
    spike: Option<(usize, usize)>,
) -> CorpusSpec {
    CorpusSpec {
        dim: ELL,
        first_epoch: FIRST_EPOCH,
        epochs,
        background_per_epoch: background,
        topic_per_epoch: topic,
        topic_spread: 0.35,
        spike,
    }
}

pub fn range(epochs: usize) -> String {
    format!("{}..{}", FIRST_EPOCH, FIRST_EPOCH + epochs as i64 - 1)
}
