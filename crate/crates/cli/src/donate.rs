//! Client-side donation: project, perturb, share and submit each record.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::net::SocketAddr;
use std::time::Duration;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use trendscope_core::epoch::epoch_date;
use trendscope_core::intake::{
    message_rng, prepare_message, read_jsonl, share_out, CoarseNoiseParams,
};
use trendscope_core::ProjectionMatrix;
use trendscope_node::Donor;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Skipped {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DonateReport {
    /// Records every server acknowledged, duplicates included.
    pub submitted: usize,
    /// Records the servers already held.
    pub duplicates: usize,
    /// Records filed only in the coarse store because the day's fine store
    /// is gone.
    pub coarse_only: usize,
    pub per_epoch: BTreeMap<NaiveDate, usize>,
    pub skipped: Vec<Skipped>,
}

pub struct DonateOptions {
    pub servers: Vec<SocketAddr>,
    pub projection: ProjectionMatrix,
    pub eps_p: f64,
    pub delta_p: f64,
    /// Seeds the per-message perturbation and share randomness.
    pub seed: u64,
    pub timeout: Duration,
}

/// Submits every valid record of a JSONL stream. Malformed and non-unit
/// records are skipped with their reason; a transport failure aborts.
///
/// Servers are contacted only once the first valid record is ready.
pub fn donate<R: BufRead>(input: R, opts: &DonateOptions) -> Result<DonateReport, CliError> {
    let params = CoarseNoiseParams::new(opts.eps_p, opts.delta_p, opts.projection.omega2())?;
    let mut share_rng = ChaCha20Rng::seed_from_u64(opts.seed ^ 0x5ea1_ed5e_ed00_0001);
    let mut donor: Option<Donor> = None;
    let mut report = DonateReport::default();
    for (line, record) in read_jsonl(input) {
        let prepared = record.and_then(|raw| {
            let mut rng = message_rng(opts.seed, &raw.message_id);
            prepare_message(&raw, &opts.projection, &params, &mut rng)
        });
        let pe = match prepared {
            Ok(pe) => pe,
            Err(e) => {
                tracing::warn!(line, "skipping record: {e}");
                report.skipped.push(Skipped {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let bundles = share_out(&pe, opts.servers.len(), &mut share_rng)?;
        let d = match donor.as_mut() {
            Some(d) => d,
            None => donor.insert(Donor::connect(&opts.servers, opts.timeout)?),
        };
        let ack = d.submit(&bundles)?;
        report.submitted += 1;
        report.duplicates += ack.duplicate as usize;
        report.coarse_only += (!ack.duplicate && !ack.fine_stored) as usize;
        *report.per_epoch.entry(epoch_date(pe.epoch)).or_default() += 1;
    }
    Ok(report)
}
