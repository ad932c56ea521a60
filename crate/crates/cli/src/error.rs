use thiserror::Error;
use trendscope_core::{IntakeError, MpcError};
use trendscope_node::NodeError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Intake(#[from] IntakeError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("gateway unreachable: {0}")]
    Transport(String),
    #[error("gateway answered {status}: {message}")]
    Http { status: u16, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed trend file: {0}")]
    Series(String),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Some epochs were refused or deleted; the rest of the series is valid.
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Transport(_) => EXIT_TRANSPORT,
            CliError::Http {
                status: 502..=504, ..
            } => EXIT_TRANSPORT,
            CliError::Node(e) if e.is_transport() => EXIT_TRANSPORT,
            _ => 1,
        }
    }
}
