//! JSON bodies carried inside wire frames.

use serde::{Deserialize, Serialize};
use trendscope_core::dp::BudgetView;
use trendscope_core::{EngineError, Epoch, MpcError};

use crate::prep::PrepPosition;

/// First frame on every connection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum Hello {
    Peer {
        party_id: usize,
        fields: Vec<(String, String)>,
    },
    Client,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    PeerUnreachable,
    IntegrityFailure,
    Malformed,
    ConfigMismatch,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: ErrorCode,
    pub message: String,
}

impl ErrorBody {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ErrorBody {
            code,
            message: message.into(),
        }
    }

    pub fn from_engine(e: &EngineError) -> Self {
        let code = match e {
            EngineError::Mpc(MpcError::PeerUnreachable(_)) => ErrorCode::PeerUnreachable,
            EngineError::Mpc(MpcError::IntegrityFailure(_)) => ErrorCode::IntegrityFailure,
            EngineError::Mpc(MpcError::DealerExhausted(_)) => ErrorCode::Internal,
            _ => ErrorCode::Malformed,
        };
        ErrorBody::new(code, e.to_string())
    }
}

/// Answer to a donation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub fine_stored: bool,
    pub duplicate: bool,
}

/// Exchanged by all servers before a query runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapeSync {
    pub position: PrepPosition,
    /// `None` if this server accepts the session.
    pub reject: Option<String>,
}

/// The coordinator's settlement notice and the peers' answers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    /// Hex SHA-256 of the sender's budget state.
    pub budget_digest: String,
}

/// Read-only requests a client may send in a `BudgetEvent` frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "request", rename_all = "snake_case")]
pub enum StatusRequest {
    Budget { epochs: Option<Vec<Epoch>> },
    Alerts,
    Health,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertStatus {
    Open,
    Fired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlertView {
    pub key: String,
    pub epoch: Epoch,
    pub status: AlertStatus,
    /// The public threshold; known only while the alert is open.
    pub threshold: Option<u64>,
    pub eps_t: f64,
    /// Ledger sequence number of the charge, for fired alerts.
    pub charged_at: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub party_id: usize,
    pub peers_connected: usize,
    pub n_parties: usize,
    pub epochs: Vec<(Epoch, usize)>,
    pub ledger_divergence: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "response", rename_all = "snake_case")]
pub enum StatusResponse {
    Budget(BudgetView),
    Alerts { alerts: Vec<AlertView> },
    Health(Health),
}
