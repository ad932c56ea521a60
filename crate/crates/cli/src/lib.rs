//! Operator tools: run servers and the gateway, donate corpora, and turn
//! query answers into CSV trend series and plots.

pub mod donate;
mod error;
pub mod plot;
pub mod query;
pub mod series;
pub mod tools;

pub use donate::{donate, DonateOptions, DonateReport};
pub use error::{CliError, EXIT_PARTIAL, EXIT_TRANSPORT};
pub use query::{run_query, QueryOptions, QueryPoint, Radius};
pub use series::{Kernel, PointStatus, SeriesMeta, Smoothing, TrendPoint, TrendSeries};
