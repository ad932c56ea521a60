use thiserror::Error;
use trendscope_core::dp::DpError;
use trendscope_core::{EngineError, IntakeError, MpcError};

use crate::protocol::{ErrorBody, ErrorCode};
use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("config mismatch on `{field}`: ours {ours}, peer {theirs}")]
    ConfigMismatch {
        field: String,
        ours: String,
        theirs: String,
    },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Intake(#[from] IntakeError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error("store: {0}")]
    Persist(String),
    #[error("server unreachable: {0}")]
    Unreachable(String),
    #[error("server error ({code:?}): {message}")]
    Remote { code: ErrorCode, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<MpcError> for NodeError {
    fn from(e: MpcError) -> Self {
        NodeError::Engine(e.into())
    }
}

impl From<ErrorBody> for NodeError {
    fn from(e: ErrorBody) -> Self {
        NodeError::Remote {
            code: e.code,
            message: e.message,
        }
    }
}

impl NodeError {
    /// Whether the failure lies in reaching servers rather than in the query.
    pub fn is_transport(&self) -> bool {
        match self {
            NodeError::Unreachable(_) | NodeError::Io(_) | NodeError::Wire(_) => true,
            NodeError::Engine(EngineError::Mpc(MpcError::PeerUnreachable(_))) => true,
            NodeError::Remote { code, .. } => *code == ErrorCode::PeerUnreachable,
            _ => false,
        }
    }
}
