//! Setup artifacts and long-running processes.

use std::future::Future;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use trendscope_core::intake::{choose_dimension, EmbeddingRecord};
use trendscope_core::mpc::dealer::{dealer_generate, DealerCounts};
use trendscope_core::mpc::tape_file;
use trendscope_core::synth::{generate_corpus, CorpusSpec};
use trendscope_core::ProjectionMatrix;
use trendscope_node::{GatewayConfig, NodeError, ServerConfig};

use crate::CliError;

/// Projection dimension: `k` when given, else chosen from corpus size and
/// distortion.
pub fn pick_dimension(
    k: Option<usize>,
    n: Option<usize>,
    alpha: Option<f64>,
) -> Result<usize, CliError> {
    match (k, n, alpha) {
        (Some(k), None, None) if k > 0 => Ok(k),
        (None, Some(n), Some(a)) => Ok(choose_dimension(n, a)?),
        _ => Err(CliError::Usage(
            "give either a positive --k or both --n and --alpha".into(),
        )),
    }
}

pub fn setup(ell: usize, k: usize, seed: u64, out: &Path) -> Result<ProjectionMatrix, CliError> {
    if ell == 0 {
        return Err(CliError::Usage("--ell must be positive".into()));
    }
    let p = ProjectionMatrix::generate(ell, k, seed);
    p.save(out)?;
    Ok(p)
}

/// Parses `SCALE:COUNT`.
pub fn parse_laplace(s: &str) -> Result<(f64, usize), CliError> {
    let bad = || CliError::Usage(format!("expected SCALE:COUNT, got {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let scale: f64 = a.parse().map_err(|_| bad())?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(bad());
    }
    Ok((scale, b.parse().map_err(|_| bad())?))
}

/// Writes `tape-<party>.bin` for every party into `dir`.
pub fn dealer(
    parties: usize,
    counts: &DealerCounts,
    seed: u64,
    macs: bool,
    dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    if parties < 2 {
        return Err(CliError::Usage(format!(
            "at least 2 parties are required, got {parties}"
        )));
    }
    std::fs::create_dir_all(dir)?;
    dealer_generate(parties, counts, seed, macs)
        .iter()
        .map(|tape| {
            let path = dir.join(format!("tape-{}.bin", tape.party_id));
            tape_file::write(&path, tape)?;
            Ok(path)
        })
        .collect()
}

/// Writes a synthetic corpus as JSONL and returns its topic direction.
pub fn synth<W: Write>(spec: &CorpusSpec, seed: u64, mut out: W) -> Result<Vec<f64>, CliError> {
    let corpus = generate_corpus(spec, seed);
    for m in &corpus.messages {
        serde_json::to_writer(&mut out, &EmbeddingRecord::from(m))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(corpus.topic)
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn termination() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

/// Runs one server until `shutdown` resolves.
///
/// Startup fails if a peer's configuration differs; the error names the
/// field. Peers that are not up yet are waited for.
pub async fn serve(cfg: ServerConfig, shutdown: impl Future<Output = ()>) -> Result<(), CliError> {
    let party = cfg.party_id;
    let n = cfg.n_parties();
    let handle = Arc::new(trendscope_node::start(cfg)?);
    tracing::info!(party, addr = %handle.local_addr(), config = %handle.config_hash(), "listening");
    let stop = Arc::new(AtomicBool::new(false));
    let ready = {
        let (handle, stop) = (handle.clone(), stop.clone());
        tokio::task::spawn_blocking(move || loop {
            match handle.wait_ready(Duration::from_millis(500)) {
                Err(NodeError::Unreachable(_)) if !stop.load(Ordering::SeqCst) => continue,
                other => return other,
            }
        })
    };
    tokio::pin!(shutdown);
    let outcome = tokio::select! {
        r = ready => Some(r.map_err(|e| CliError::Usage(e.to_string()))?),
        _ = &mut shutdown => None,
    };
    match outcome {
        Some(Ok(())) => {
            tracing::info!(party, peers = n - 1, "handshake complete, ready");
            shutdown.await;
        }
        Some(Err(e)) => {
            tracing::error!(party, "startup refused: {e}");
            return Err(e.into());
        }
        None => stop.store(true, Ordering::SeqCst),
    }
    tracing::info!(party, "shutting down");
    match Arc::try_unwrap(handle) {
        Ok(h) => tokio::task::spawn_blocking(move || h.shutdown())
            .await
            .map_err(|e| CliError::Usage(e.to_string()))?,
        // The readiness poller still holds a reference; dropping ours and
        // theirs stops the server all the same.
        Err(h) => drop(h),
    }
    Ok(())
}

/// Serves the HTTP gateway until `shutdown` resolves.
pub async fn gateway(
    cfg: GatewayConfig,
    listen: SocketAddr,
    shutdown: impl Future<Output = ()>,
) -> Result<(), CliError> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    tracing::info!(addr = %listener.local_addr()?, servers = cfg.servers.len(), "gateway listening");
    tokio::select! {
        r = trendscope_node::gateway::serve(cfg, listener) => r?,
        _ = shutdown => tracing::info!("gateway shutting down"),
    }
    Ok(())
}
