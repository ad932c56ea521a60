//! Donor-side pipeline: project, perturb, square and secret-share a message
//! embedding.

mod projection;
mod toy;

use std::io::BufRead;

use chrono::{DateTime, Utc};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::epoch::{epoch_of, Epoch};
use crate::fixed::RingElement;
use crate::mpc::share::split;

pub use projection::ProjectionMatrix;
pub use toy::{toy_embed, TOY_DIM};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IntakeError {
    #[error("JL distortion must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("corpus size must be at least 2, got {0}")]
    CorpusTooSmall(usize),
    #[error("invalid privacy parameters: {0}")]
    InvalidBudget(String),
    #[error("vector cannot be renormalized (norm below 1e-9)")]
    DegenerateVector,
    #[error("embedding is not unit length (norm {0})")]
    NormError(f64),
    #[error("message text is empty")]
    EmptyMessage,
    #[error("expected {expected} dimensions, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("at least 2 servers are required, got {0}")]
    TooFewServers(usize),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Projection dimension for `n` points at JL distortion `alpha`:
/// `round(4 ln n / (alpha^2/2 - alpha^3/3))`.
pub fn choose_dimension(n: usize, alpha: f64) -> Result<usize, IntakeError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(IntakeError::InvalidAlpha(alpha));
    }
    if n < 2 {
        return Err(IntakeError::CorpusTooSmall(n));
    }
    let denom = alpha * alpha / 2.0 - alpha.powi(3) / 3.0;
    Ok((4.0 * (n as f64).ln() / denom).round() as usize)
}

/// Gaussian perturbation parameters for the coarse store.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseNoiseParams {
    pub eps_p: f64,
    pub delta_p: f64,
    pub sigma_delta: f64,
}

/// Smallest Gaussian std dev making the projection `(eps, delta)`-private:
/// `omega2 * sqrt(2 (ln(1/(2 delta)) + eps)) / eps`.
pub fn compute_sigma_delta(eps_p: f64, delta_p: f64, omega2: f64) -> Result<f64, IntakeError> {
    if !(eps_p > 0.0 && eps_p.is_finite()) {
        return Err(IntakeError::InvalidBudget(format!(
            "eps_P must be positive, got {eps_p}"
        )));
    }
    if !(delta_p > 0.0 && delta_p < 0.5) {
        return Err(IntakeError::InvalidBudget(format!(
            "delta_P must lie in (0, 1/2), got {delta_p}"
        )));
    }
    if !(omega2 >= 0.0 && omega2.is_finite()) {
        return Err(IntakeError::InvalidBudget(format!(
            "omega2 must be non-negative, got {omega2}"
        )));
    }
    Ok(omega2 * (2.0 * ((1.0 / (2.0 * delta_p)).ln() + eps_p)).sqrt() / eps_p)
}

impl CoarseNoiseParams {
    pub fn new(eps_p: f64, delta_p: f64, omega2: f64) -> Result<Self, IntakeError> {
        Ok(CoarseNoiseParams {
            eps_p,
            delta_p,
            sigma_delta: compute_sigma_delta(eps_p, delta_p, omega2)?,
        })
    }

    /// No perturbation; the coarse store then mirrors the fine store.
    pub fn noiseless() -> Self {
        CoarseNoiseParams {
            eps_p: f64::INFINITY,
            delta_p: 0.0,
            sigma_delta: 0.0,
        }
    }
}

/// A precomputed unit-length message embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEmbedding {
    pub message_id: String,
    pub timestamp: DateTime<Utc>,
    pub x_prime: Vec<f64>,
}

impl RawEmbedding {
    pub fn new(
        message_id: String,
        timestamp: DateTime<Utc>,
        x_prime: Vec<f64>,
    ) -> Result<Self, IntakeError> {
        let norm = l2(&x_prime);
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(IntakeError::NormError(norm));
        }
        Ok(RawEmbedding {
            message_id,
            timestamp,
            x_prime,
        })
    }

    /// Embeds text with [`toy_embed`].
    pub fn from_text(
        message_id: String,
        timestamp: DateTime<Utc>,
        text: &str,
    ) -> Result<Self, IntakeError> {
        Self::new(message_id, timestamp, toy_embed(text)?)
    }

    pub fn epoch(&self) -> Epoch {
        epoch_of(&self.timestamp)
    }
}

/// One line of the embedding ingestion format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub message_id: String,
    pub timestamp: DateTime<Utc>,
    pub vector: Vec<f64>,
}

impl From<&RawEmbedding> for EmbeddingRecord {
    fn from(r: &RawEmbedding) -> Self {
        EmbeddingRecord {
            message_id: r.message_id.clone(),
            timestamp: r.timestamp,
            vector: r.x_prime.clone(),
        }
    }
}

pub fn parse_record(line: &str) -> Result<RawEmbedding, IntakeError> {
    let rec: EmbeddingRecord =
        serde_json::from_str(line).map_err(|e| IntakeError::Malformed(e.to_string()))?;
    RawEmbedding::new(rec.message_id, rec.timestamp, rec.vector)
}

/// Parses a JSONL stream, yielding `(line number, record)` for every
/// non-blank line. Bad records are reported, not fatal.
pub fn read_jsonl<R: BufRead>(
    reader: R,
) -> impl Iterator<Item = (usize, Result<RawEmbedding, IntakeError>)> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(i, line)| match line {
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some((i + 1, parse_record(&l))),
            Err(e) => Some((i + 1, Err(IntakeError::Io(e.to_string())))),
        })
}

/// A projected, perturbed and squared embedding ready for sharing.
///
/// `x` and `x_tilde` are at single fixed-point scale; the squares are exact
/// products of the fixed-point entries, held at double scale.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectedEmbedding {
    pub donation_id: u64,
    pub epoch: Epoch,
    pub x: Vec<RingElement>,
    pub x_sq: Vec<RingElement>,
    pub x_tilde: Vec<RingElement>,
    pub x_tilde_sq: Vec<RingElement>,
}

/// Stable opaque id under which servers file a donation.
pub fn donation_id(message_id: &str) -> u64 {
    let d = Sha256::new()
        .chain_update(b"donation")
        .chain_update(message_id.as_bytes())
        .finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Per-message randomness derived from a donor seed and the message id.
pub fn message_rng(seed: u64, message_id: &str) -> ChaCha20Rng {
    let d: [u8; 32] = Sha256::new()
        .chain_update(b"message-rng")
        .chain_update(seed.to_le_bytes())
        .chain_update(message_id.as_bytes())
        .finalize()
        .into();
    ChaCha20Rng::from_seed(d)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &[f64]) -> Result<Vec<f64>, IntakeError> {
    let n = l2(v);
    if !(n >= 1e-9) {
        return Err(IntakeError::DegenerateVector);
    }
    Ok(v.iter().map(|x| (x / n).clamp(-1.0, 1.0)).collect())
}

fn encode_with_squares(v: &[f64]) -> (Vec<RingElement>, Vec<RingElement>) {
    let enc: Vec<RingElement> = v.iter().map(|x| RingElement::encode(*x)).collect();
    let sq = enc
        .iter()
        .map(|e| RingElement(e.signed().wrapping_mul(e.signed()) as u64))
        .collect();
    (enc, sq)
}

/// Projects `x'` to `k` dimensions, renormalizes, and builds the perturbed
/// twin `normalize(x + r)` with `r ~ N(0, sigma_delta^2)` per coordinate.
pub fn prepare_message<R: RngCore>(
    raw: &RawEmbedding,
    p: &ProjectionMatrix,
    params: &CoarseNoiseParams,
    rng: &mut R,
) -> Result<ProjectedEmbedding, IntakeError> {
    if raw.x_prime.len() != p.ell() {
        return Err(IntakeError::DimensionMismatch {
            expected: p.ell(),
            got: raw.x_prime.len(),
        });
    }
    let norm = l2(&raw.x_prime);
    if !((norm - 1.0).abs() <= 1e-6) {
        return Err(IntakeError::NormError(norm));
    }
    let x = normalize(&p.project(&raw.x_prime))?;
    let x_tilde = if params.sigma_delta > 0.0 {
        let normal = Normal::new(0.0, params.sigma_delta)
            .map_err(|e| IntakeError::InvalidBudget(e.to_string()))?;
        let perturbed: Vec<f64> = x.iter().map(|v| v + normal.sample(rng)).collect();
        normalize(&perturbed)?
    } else {
        x.clone()
    };
    let (x, x_sq) = encode_with_squares(&x);
    let (x_tilde, x_tilde_sq) = encode_with_squares(&x_tilde);
    Ok(ProjectedEmbedding {
        donation_id: donation_id(&raw.message_id),
        epoch: raw.epoch(),
        x,
        x_sq,
        x_tilde,
        x_tilde_sq,
    })
}

/// What one server receives for one donated message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareBundle {
    pub party_id: usize,
    pub donation_id: u64,
    pub epoch: Epoch,
    pub x: Vec<u128>,
    pub x_sq: Vec<u128>,
    pub x_tilde: Vec<u128>,
    pub x_tilde_sq: Vec<u128>,
}

impl ShareBundle {
    pub fn dimension(&self) -> usize {
        self.x.len()
    }

    /// All four vectors have the expected length.
    pub fn is_well_formed(&self, k: usize) -> bool {
        [&self.x, &self.x_sq, &self.x_tilde, &self.x_tilde_sq]
            .iter()
            .all(|v| v.len() == k)
    }
}

/// Splits every vector of `pe` into additive shares, one bundle per server.
pub fn share_out<R: RngCore>(
    pe: &ProjectedEmbedding,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ShareBundle>, IntakeError> {
    if n < 2 {
        return Err(IntakeError::TooFewServers(n));
    }
    let mut bundles: Vec<ShareBundle> = (0..n)
        .map(|party_id| ShareBundle {
            party_id,
            donation_id: pe.donation_id,
            epoch: pe.epoch,
            x: Vec::with_capacity(pe.x.len()),
            x_sq: Vec::with_capacity(pe.x.len()),
            x_tilde: Vec::with_capacity(pe.x.len()),
            x_tilde_sq: Vec::with_capacity(pe.x.len()),
        })
        .collect();
    let fields: [(&[RingElement], fn(&mut ShareBundle) -> &mut Vec<u128>); 4] = [
        (&pe.x, |b| &mut b.x),
        (&pe.x_sq, |b| &mut b.x_sq),
        (&pe.x_tilde, |b| &mut b.x_tilde),
        (&pe.x_tilde_sq, |b| &mut b.x_tilde_sq),
    ];
    for (values, field) in fields {
        for v in values {
            for (b, s) in bundles.iter_mut().zip(split(v.0 as u128, n, rng)) {
                field(b).push(s);
            }
        }
    }
    Ok(bundles)
}

/// Sums bundles back into the embedding they encode.
pub fn reconstruct_bundles(bundles: &[ShareBundle]) -> Result<ProjectedEmbedding, IntakeError> {
    let first = bundles
        .first()
        .ok_or_else(|| IntakeError::Malformed("no bundles".into()))?;
    let k = first.dimension();
    if bundles.iter().any(|b| {
        !b.is_well_formed(k) || b.donation_id != first.donation_id || b.epoch != first.epoch
    }) {
        return Err(IntakeError::Malformed("bundles disagree".into()));
    }
    let sum = |f: fn(&ShareBundle) -> &Vec<u128>| -> Vec<RingElement> {
        (0..k)
            .map(|j| RingElement(bundles.iter().fold(0u128, |a, b| a.wrapping_add(f(b)[j])) as u64))
            .collect()
    };
    Ok(ProjectedEmbedding {
        donation_id: first.donation_id,
        epoch: first.epoch,
        x: sum(|b| &b.x),
        x_sq: sum(|b| &b.x_sq),
        x_tilde: sum(|b| &b.x_tilde),
        x_tilde_sq: sum(|b| &b.x_tilde_sq),
    })
}
