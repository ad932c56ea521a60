//! Differential-privacy mechanisms and per-epoch budget accounting.

mod ledger;
mod mechanisms;
mod threshold;

use serde::{Deserialize, Serialize};

use crate::epoch::Epoch;
use crate::intake::IntakeError;

pub use ledger::{
    BudgetLedger, BudgetView, ChargeReceipt, CoarseCharge, EpochBudget, LedgerRecord, RecordKind,
    ResultKind,
};
pub use mechanisms::{
    laplace_count, noised_threshold, svt_threshold, MAX_THRESHOLD, SVT_COMPARE_WIDTH,
};
pub use threshold::{OpenThresholdEntry, ThresholdBook};

/// Privacy budget in integer units of `1e-9`, so repeated charges add up
/// to an exact zero.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Epsilon(u64);

const UNITS_PER_EPS: f64 = 1e9;

impl Epsilon {
    pub const ZERO: Epsilon = Epsilon(0);

    pub fn from_f64(eps: f64) -> Result<Self, DpError> {
        if !(eps >= 0.0 && eps.is_finite() && eps * UNITS_PER_EPS < u64::MAX as f64) {
            return Err(DpError::InvalidEps(eps));
        }
        Ok(Epsilon((eps * UNITS_PER_EPS).round() as u64))
    }

    pub fn from_nanos(n: u64) -> Self {
        Epsilon(n)
    }

    pub fn nanos(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / UNITS_PER_EPS
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn checked_sub(self, rhs: Epsilon) -> Option<Epsilon> {
        self.0.checked_sub(rhs.0).map(Epsilon)
    }
}

impl std::ops::Add for Epsilon {
    type Output = Epsilon;
    fn add(self, rhs: Epsilon) -> Epsilon {
        Epsilon(self.0 + rhs.0)
    }
}

impl std::iter::Sum for Epsilon {
    fn sum<I: Iterator<Item = Epsilon>>(iter: I) -> Epsilon {
        iter.fold(Epsilon::ZERO, |a, b| a + b)
    }
}

impl std::fmt::Display for Epsilon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_f64())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DpError {
    #[error("refused: epoch {epoch} has {remaining} budget left, {requested} requested")]
    Refusal {
        epoch: Epoch,
        requested: Epsilon,
        remaining: Epsilon,
    },
    #[error("fine store for epoch {0} has been deleted")]
    EpochDeleted(Epoch),
    #[error("the coarse store budget can only be charged once")]
    OneTimeOnly,
    #[error("epsilon must be a positive finite number, got {0}")]
    InvalidEps(f64),
    #[error("ledger replay failed: {0}")]
    Replay(String),
    #[error(transparent)]
    Intake(#[from] IntakeError),
}
