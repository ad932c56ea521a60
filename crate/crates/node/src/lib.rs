//! Server process, wire protocol and HTTP gateway.

pub mod client;
pub mod codec;
pub mod config;
mod error;
pub mod gateway;
pub mod mesh;
pub mod persist;
pub mod prep;
pub mod protocol;
pub mod server;
pub mod wire;

pub use client::{ClusterAnswer, ClusterClient, Connection, Donor};
pub use config::{PrepSource, ServerConfig};
pub use error::NodeError;
pub use gateway::{GatewayConfig, GatewayState};
pub use server::{start, start_on, Fault, ServerHandle};
