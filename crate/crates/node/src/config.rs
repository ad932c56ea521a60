//! Per-server configuration: one TOML file, with environment overrides for
//! addresses and paths.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::NodeError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PrepSource {
    /// A dealer tape file produced offline.
    Tape { path: PathBuf },
    /// Every server runs the same seeded dealer. Test deployments only.
    Seeded { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub party_id: usize,
    pub listen: SocketAddr,
    /// Every server's address, indexed by party id (this one included).
    pub peers: Vec<SocketAddr>,
    pub store_dir: PathBuf,
    pub k: usize,
    /// Input embedding dimension of the shared projection.
    pub ell: usize,
    pub projection_seed: u64,
    pub eps_f_max: f64,
    pub eps_p: f64,
    pub delta_p: f64,
    #[serde(default = "yes")]
    pub macs: bool,
    #[serde(default)]
    pub zero_noise: bool,
    #[serde(default = "default_timeout")]
    pub query_timeout_ms: u64,
    pub preprocessing: PrepSource,
}

fn yes() -> bool {
    true
}

fn default_timeout() -> u64 {
    30_000
}

pub const ENV_LISTEN: &str = "TRENDSCOPE_LISTEN";
pub const ENV_PEERS: &str = "TRENDSCOPE_PEERS";
pub const ENV_STORE_DIR: &str = "TRENDSCOPE_STORE_DIR";
pub const ENV_TAPE: &str = "TRENDSCOPE_TAPE";

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self, NodeError> {
        let cfg: ServerConfig =
            toml::from_str(text).map_err(|e| NodeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads the file and applies overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self, NodeError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), NodeError> {
        let addr = |name: &str, v: &str| {
            v.trim()
                .parse::<SocketAddr>()
                .map_err(|e| NodeError::Config(format!("{name}: {e}")))
        };
        if let Some(v) = var(ENV_LISTEN) {
            self.listen = addr(ENV_LISTEN, &v)?;
        }
        if let Some(v) = var(ENV_PEERS) {
            self.peers = v
                .split(',')
                .map(|p| addr(ENV_PEERS, p))
                .collect::<Result<_, _>>()?;
        }
        if let Some(v) = var(ENV_STORE_DIR) {
            self.store_dir = PathBuf::from(v);
        }
        if let Some(v) = var(ENV_TAPE) {
            self.preprocessing = PrepSource::Tape {
                path: PathBuf::from(v),
            };
        }
        self.validate()
    }

    pub fn n_parties(&self) -> usize {
        self.peers.len()
    }

    pub fn validate(&self) -> Result<(), NodeError> {
        if self.peers.len() < 2 {
            return Err(NodeError::Config(format!(
                "need at least 2 servers, got {}",
                self.peers.len()
            )));
        }
        if self.party_id >= self.peers.len() {
            return Err(NodeError::Config(format!(
                "party_id {} out of range for {} servers",
                self.party_id,
                self.peers.len()
            )));
        }
        if self.k == 0 || self.ell == 0 {
            return Err(NodeError::Config("k and ell must be positive".into()));
        }
        if !(self.eps_f_max > 0.0 && self.eps_p > 0.0 && self.delta_p > 0.0 && self.delta_p < 0.5) {
            return Err(NodeError::Config("privacy parameters out of range".into()));
        }
        Ok(())
    }

    /// Settings that every server must share, as `(name, value)` pairs.
    ///
    /// `dealer` identifies the preprocessing stream (a seed commitment) and
    /// is supplied by the caller, which may need to open the tape first.
    pub fn agreement_fields(&self, dealer: &str) -> Vec<(String, String)> {
        let source = match &self.preprocessing {
            PrepSource::Tape { .. } => "tape",
            PrepSource::Seeded { .. } => "seeded",
        };
        [
            ("n_parties", self.n_parties().to_string()),
            ("k", self.k.to_string()),
            ("ell", self.ell.to_string()),
            ("projection_seed", self.projection_seed.to_string()),
            ("eps_f_max", self.eps_f_max.to_string()),
            ("eps_p", self.eps_p.to_string()),
            ("delta_p", self.delta_p.to_string()),
            ("macs", self.macs.to_string()),
            ("zero_noise", self.zero_noise.to_string()),
            ("preprocessing", source.to_string()),
            ("dealer", dealer.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

pub fn config_hash(fields: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in fields {
        h.update(k.as_bytes());
        h.update([0]);
        h.update(v.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// The first field on which two servers disagree.
pub fn divergent_field(
    ours: &[(String, String)],
    theirs: &[(String, String)],
) -> Option<(String, String, String)> {
    for (name, mine) in ours {
        let other = theirs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| "<missing>".into());
        if *mine != other {
            return Some((name.clone(), mine.clone(), other));
        }
    }
    theirs
        .iter()
        .find(|(n, _)| !ours.iter().any(|(m, _)| m == n))
        .map(|(n, v)| (n.clone(), "<missing>".into(), v.clone()))
}
