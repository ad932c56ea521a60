//! Private semantic trend queries over secret-shared message embeddings.
//!
//! Donors project their message embeddings to a small dimension, perturb a
//! copy, and split both into additive shares for `n` servers. The servers
//! jointly answer noisy counts, sparse-vector alerts, and exact counts over
//! the perturbed copies, charging a per-day privacy budget and deleting the
//! unperturbed store once that budget is gone.

pub mod dp;
pub mod engine;
pub mod epoch;
pub mod fixed;
pub mod intake;
pub mod mpc;
pub mod query;
pub mod synth;

pub use dp::{BudgetLedger, DpError, Epsilon};
pub use engine::{Engine, EngineConfig, EngineError};
pub use epoch::Epoch;
pub use fixed::RingElement;
pub use intake::{IntakeError, ProjectedEmbedding, ProjectionMatrix, RawEmbedding, ShareBundle};
pub use mpc::{MpcError, NoiseMode};
pub use query::{EpochOutcome, EpochRange, EpochResult, QueryKind, QueryRequest, QueryResponse};
