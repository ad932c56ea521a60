//! Query and response types shared by the engine, servers and clients.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dp::MAX_THRESHOLD;
use crate::epoch::Epoch;
use crate::fixed::RingElement;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    /// Fine count: noisy count over the unperturbed store.
    Fc,
    /// Fine threshold: sparse-vector alert over the unperturbed store.
    Ft,
    /// Coarse count: exact count over the perturbed store.
    Cc,
    /// Coarse threshold: `count > t` over the perturbed store.
    Ct,
}

impl QueryKind {
    pub fn is_fine(self) -> bool {
        matches!(self, QueryKind::Fc | QueryKind::Ft)
    }

    pub fn is_threshold(self) -> bool {
        matches!(self, QueryKind::Ft | QueryKind::Ct)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QueryKind::Fc => "fc",
            QueryKind::Ft => "ft",
            QueryKind::Cc => "cc",
            QueryKind::Ct => "ct",
        }
    }
}

impl std::str::FromStr for QueryKind {
    type Err = QueryError;
    fn from_str(s: &str) -> Result<Self, QueryError> {
        match s.to_ascii_lowercase().as_str() {
            "fc" => Ok(QueryKind::Fc),
            "ft" => Ok(QueryKind::Ft),
            "cc" => Ok(QueryKind::Cc),
            "ct" => Ok(QueryKind::Ct),
            other => Err(QueryError(format!("unknown query kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for QueryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid query: {0}")]
pub struct QueryError(pub String);

/// Inclusive range of epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochRange {
    pub from: Epoch,
    pub to: Epoch,
}

impl EpochRange {
    pub fn single(epoch: Epoch) -> Self {
        EpochRange {
            from: epoch,
            to: epoch,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Epoch> {
        self.from..=self.to
    }

    pub fn len(&self) -> usize {
        if self.to < self.from {
            0
        } else {
            (self.to - self.from + 1) as usize
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses `FROM..TO` where each side is a day number or ISO date.
    pub fn parse(s: &str) -> Result<Self, QueryError> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| QueryError(format!("epoch range {s:?} is not FROM..TO")))?;
        let parse = |x: &str| {
            crate::epoch::parse_epoch(x.trim())
                .ok_or_else(|| QueryError(format!("bad epoch {x:?}")))
        };
        let r = EpochRange {
            from: parse(a)?,
            to: parse(b)?,
        };
        if r.is_empty() {
            return Err(QueryError(format!("epoch range {s:?} is empty")));
        }
        Ok(r)
    }
}

/// Longest epoch range a single query may span.
pub const MAX_EPOCHS_PER_QUERY: usize = 3660;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub kind: QueryKind,
    /// Query point in the projected space; unit length.
    pub q: Vec<f64>,
    /// L2 match radius `a` in `(0, 2]`.
    pub radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<u64>,
    pub epochs: EpochRange,
    /// Per-epoch budget for fine kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
}

/// L2 radius matching a cosine-distance radius on unit vectors.
pub fn l2_radius_from_cosine(rho: f64) -> f64 {
    (2.0 * rho).sqrt()
}

impl QueryRequest {
    pub fn validate(&self, k: usize) -> Result<(), QueryError> {
        if self.q.len() != k {
            return Err(QueryError(format!(
                "query has {} dimensions, store has {k}",
                self.q.len()
            )));
        }
        let norm = self.q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= 1e-3) {
            return Err(QueryError(format!(
                "query vector must be unit length, norm is {norm}"
            )));
        }
        if !(self.radius > 0.0 && self.radius <= 2.0) {
            return Err(QueryError(format!(
                "radius must lie in (0, 2], got {}",
                self.radius
            )));
        }
        match (self.kind.is_threshold(), self.threshold) {
            (true, None) => return Err(QueryError(format!("{} needs a threshold", self.kind))),
            (true, Some(t)) if !(1..=MAX_THRESHOLD).contains(&t) => {
                return Err(QueryError(format!(
                    "threshold must lie in [1, {MAX_THRESHOLD}], got {t}"
                )))
            }
            _ => {}
        }
        if self.kind.is_fine() {
            match self.eps {
                Some(e) if e > 0.0 && e.is_finite() => {}
                other => {
                    return Err(QueryError(format!(
                        "{} needs a positive eps, got {other:?}",
                        self.kind
                    )))
                }
            }
        }
        if self.epochs.is_empty() || self.epochs.len() > MAX_EPOCHS_PER_QUERY {
            return Err(QueryError(format!(
                "epoch range must cover 1..={MAX_EPOCHS_PER_QUERY} epochs"
            )));
        }
        Ok(())
    }

    /// The query point as fixed-point elements.
    pub fn q_fixed(&self) -> Vec<RingElement> {
        self.q.iter().map(|v| RingElement::encode(*v)).collect()
    }

    pub fn radius_fixed(&self) -> RingElement {
        RingElement::encode(self.radius)
    }

    /// `a^2` at double scale, computed from the fixed-point radius.
    pub fn radius_sq_double(&self) -> u64 {
        let a = self.radius_fixed().signed();
        (a * a) as u64
    }

    fn hash(&self, tag: &str, epoch: Epoch, extra: &[u64]) -> String {
        let mut h = Sha256::new();
        h.update(tag.as_bytes());
        h.update(epoch.to_le_bytes());
        for v in self.q_fixed() {
            h.update(v.0.to_le_bytes());
        }
        h.update(self.radius_fixed().0.to_le_bytes());
        for v in extra {
            h.update(v.to_le_bytes());
        }
        let d = h.finalize();
        d[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Cache key for fine counts: exact fixed-point `(epoch, q, a)`.
    pub fn count_key(&self, epoch: Epoch) -> String {
        self.hash("fc", epoch, &[])
    }

    /// Open-threshold key: exact fixed-point `(epoch, q, a, t)`.
    pub fn threshold_key(&self, epoch: Epoch) -> String {
        self.hash("ft", epoch, &[self.threshold.unwrap_or(0)])
    }

    /// Identifier of the whole request, used in logs and trend ids.
    pub fn fingerprint(&self) -> String {
        let eps = self.eps.map_or(0, f64::to_bits);
        self.hash(
            self.kind.as_str(),
            self.epochs.from,
            &[self.epochs.to as u64, self.threshold.unwrap_or(0), eps],
        )
    }
}

/// The per-epoch answer as the querier sees it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EpochOutcome {
    /// Noisy fine count.
    Count {
        value: f64,
    },
    /// Exact count over the perturbed store.
    Exact {
        count: i64,
    },
    Bit {
        fired: bool,
    },
    Refused {
        requested: f64,
        remaining: f64,
    },
    Deleted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochResult {
    pub epoch: Epoch,
    #[serde(flatten)]
    pub outcome: EpochOutcome,
    /// Budget charged for this epoch by this query.
    pub charged: f64,
    #[serde(default)]
    pub cached: bool,
}

impl EpochResult {
    /// The plotted value: counts as-is, bits as 0/1, nothing for refusals.
    pub fn value(&self) -> Option<f64> {
        match self.outcome {
            EpochOutcome::Count { value } => Some(value),
            EpochOutcome::Exact { count } => Some(count as f64),
            EpochOutcome::Bit { fired } => Some(fired as u8 as f64),
            EpochOutcome::Refused { .. } | EpochOutcome::Deleted => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub kind: QueryKind,
    pub results: Vec<EpochResult>,
    pub total_charged: f64,
}

impl QueryResponse {
    pub fn any_refused(&self) -> bool {
        self.results
            .iter()
            .any(|r| matches!(r.outcome, EpochOutcome::Refused { .. }))
    }

    pub fn any_deleted(&self) -> bool {
        self.results
            .iter()
            .any(|r| matches!(r.outcome, EpochOutcome::Deleted))
    }
}
