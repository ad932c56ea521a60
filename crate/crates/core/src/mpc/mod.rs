//! Additive secret sharing over `Z_{2^64}` with a dealer-assisted online phase.

pub mod channel;
pub mod dealer;
pub mod party;
pub mod share;
pub mod tape_file;

pub use channel::{run_local, Channel, LocalChannel};
pub use dealer::{
    dealer_generate, Dealer, DealerCounts, DealerPool, DealerTape, NoiseMode, NoiseShare,
    PoolHandle, Preprocessing, SeededDealer, TapeCursor, Triple,
};
pub use party::{receive_outputs, OpenFault, OutputShare, Party};
pub use share::{reconstruct, share, share_authenticated, AuthShare, MacKey, Share};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MpcError {
    #[error("dealer tape exhausted: no {0} left")]
    DealerExhausted(&'static str),
    #[error("comparison operands reach {bound}, outside the supported range of {limit}")]
    RangeViolation { bound: f64, limit: f64 },
    #[error("integrity check failed: {0}")]
    IntegrityFailure(String),
    #[error("peer unreachable: {0}")]
    PeerUnreachable(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("at least 2 parties are required, got {0}")]
    TooFewParties(usize),
}
