use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use trendscope_cli::tools::{self, parse_laplace, pick_dimension};
use trendscope_cli::{
    donate, plot, run_query, CliError, DonateOptions, QueryOptions, QueryPoint, Radius, Smoothing,
    EXIT_PARTIAL,
};
use trendscope_core::epoch::{epoch_date, parse_epoch};
use trendscope_core::mpc::dealer::DealerCounts;
use trendscope_core::synth::CorpusSpec;
use trendscope_core::{Epoch, ProjectionMatrix, QueryKind};
use trendscope_node::{GatewayConfig, ServerConfig};

#[derive(Parser)]
#[command(name = "trendscope", version, about = "Private semantic trend queries")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Out {
    Csv,
    Png,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one MPC server.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the HTTP gateway in front of the servers.
    Gateway {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        #[arg(long, value_delimiter = ',', required = true)]
        servers: Vec<SocketAddr>,
        #[arg(long, env = "TRENDSCOPE_TOKEN")]
        token: Option<String>,
        /// Projection used for free-text queries.
        #[arg(long)]
        projection: Option<PathBuf>,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
    },
    /// Write the shared projection matrix.
    Setup {
        #[arg(long)]
        ell: usize,
        #[arg(long)]
        k: Option<usize>,
        /// Corpus size, to choose k from the JL bound.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate preprocessing tapes for every server.
    Dealer {
        #[arg(long)]
        parties: usize,
        #[arg(long)]
        triples: usize,
        #[arg(long)]
        bits: usize,
        /// Laplace samples as SCALE:COUNT; repeatable.
        #[arg(long)]
        laplace: Vec<String>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        no_macs: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a synthetic JSONL corpus with one topic and an optional spike.
    Synth {
        #[arg(long)]
        dim: usize,
        /// First day, as a day number or ISO date.
        #[arg(long)]
        first_epoch: String,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        background: usize,
        #[arg(long)]
        topic: usize,
        #[arg(long, default_value_t = 0.3)]
        spread: f64,
        /// OFFSET:FACTOR
        #[arg(long)]
        spike: Option<String>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the topic direction as a JSON array.
        #[arg(long)]
        topic_out: Option<PathBuf>,
    },
    /// Donate every record of a JSONL corpus.
    Donate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        servers: Vec<SocketAddr>,
        #[arg(long)]
        projection: PathBuf,
        #[arg(long)]
        eps_p: f64,
        #[arg(long)]
        delta_p: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
    },
    /// Query the gateway and emit a trend series.
    Query {
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        gateway: String,
        #[arg(long, env = "TRENDSCOPE_TOKEN")]
        token: Option<String>,
        #[arg(long)]
        kind: QueryKind,
        #[arg(
            long,
            conflicts_with = "vector_file",
            required_unless_present = "vector_file"
        )]
        text: Option<String>,
        /// JSON array; projected first when --projection is given.
        #[arg(long)]
        vector_file: Option<PathBuf>,
        #[arg(long, requires = "vector_file")]
        projection: Option<PathBuf>,
        /// Cosine-distance radius.
        #[arg(
            long,
            conflicts_with = "radius_l2",
            required_unless_present = "radius_l2"
        )]
        radius: Option<f64>,
        #[arg(long)]
        radius_l2: Option<f64>,
        #[arg(long)]
        threshold: Option<u64>,
        /// FROM..TO as day numbers or ISO dates.
        #[arg(long)]
        epochs: String,
        #[arg(long)]
        eps: Option<f64>,
        /// Centered smoothing: N, uniform:N or triangular:N.
        #[arg(long)]
        smooth: Option<Smoothing>,
        #[arg(long, value_enum, default_value = "csv")]
        out: Out,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 60_000)]
        timeout_ms: u64,
    },
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    Ok(tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?)
}

fn read_vector(path: &PathBuf) -> Result<Vec<f64>, CliError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn print_json(v: &impl serde::Serialize) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn run(cmd: Cmd) -> Result<u8, CliError> {
    match cmd {
        Cmd::Serve { config } => {
            let cfg = ServerConfig::load(&config)?;
            runtime()?.block_on(tools::serve(cfg, tools::termination()))?;
        }
        Cmd::Gateway {
            listen,
            servers,
            token,
            projection,
            timeout_ms,
        } => {
            let projection = projection.map(|p| ProjectionMatrix::load(&p)).transpose()?;
            let cfg = GatewayConfig {
                servers,
                token,
                projection,
                timeout: Duration::from_millis(timeout_ms),
            };
            runtime()?.block_on(tools::gateway(cfg, listen, tools::termination()))?;
        }
        Cmd::Setup {
            ell,
            k,
            n,
            alpha,
            seed,
            out,
        } => {
            let k = pick_dimension(k, n, alpha)?;
            let p = tools::setup(ell, k, seed, &out)?;
            print_json(&json!({
                "path": out,
                "ell": p.ell(),
                "k": p.k(),
                "seed": p.seed(),
                "omega2": p.omega2(),
            }))?;
        }
        Cmd::Dealer {
            parties,
            triples,
            bits,
            laplace,
            seed,
            no_macs,
            out_dir,
        } => {
            let counts = DealerCounts {
                triples,
                bits,
                laplace: laplace
                    .iter()
                    .map(|s| parse_laplace(s))
                    .collect::<Result<_, _>>()?,
            };
            for path in tools::dealer(parties, &counts, seed, !no_macs, &out_dir)? {
                println!("{}", path.display());
            }
        }
        Cmd::Synth {
            dim,
            first_epoch,
            epochs,
            background,
            topic,
            spread,
            spike,
            seed,
            out,
            topic_out,
        } => {
            let first: Epoch = parse_epoch(&first_epoch)
                .ok_or_else(|| CliError::Usage(format!("bad --first-epoch {first_epoch:?}")))?;
            let spike = spike
                .map(|s| {
                    s.split_once(':')
                        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                        .ok_or_else(|| CliError::Usage(format!("bad --spike {s:?}")))
                })
                .transpose()?;
            let spec = CorpusSpec {
                dim,
                first_epoch: first,
                epochs,
                background_per_epoch: background,
                topic_per_epoch: topic,
                topic_spread: spread,
                spike,
            };
            let topic = tools::synth(&spec, seed, BufWriter::new(File::create(&out)?))?;
            if let Some(path) = topic_out {
                serde_json::to_writer(BufWriter::new(File::create(path)?), &topic)?;
            }
            let total: usize = (0..epochs).map(|o| background + spec.topic_count(o)).sum();
            eprintln!(
                "wrote {total} records for {} to {}",
                epoch_date(first),
                epoch_date(first + epochs as Epoch - 1)
            );
        }
        Cmd::Donate {
            input,
            servers,
            projection,
            eps_p,
            delta_p,
            seed,
            timeout_ms,
        } => {
            let opts = DonateOptions {
                servers,
                projection: ProjectionMatrix::load(&projection)?,
                eps_p,
                delta_p,
                seed: seed.unwrap_or_else(rand::random),
                timeout: Duration::from_millis(timeout_ms),
            };
            let report = donate(BufReader::new(File::open(&input)?), &opts)?;
            print_json(&report)?;
        }
        Cmd::Query {
            gateway,
            token,
            kind,
            text,
            vector_file,
            projection,
            radius,
            radius_l2,
            threshold,
            epochs,
            eps,
            smooth,
            out,
            output,
            timeout_ms,
        } => {
            let point = match (text, vector_file, projection) {
                (Some(t), _, _) => QueryPoint::Text(t),
                (None, Some(v), None) => QueryPoint::Projected(read_vector(&v)?),
                (None, Some(v), Some(p)) => {
                    QueryPoint::Raw(read_vector(&v)?, ProjectionMatrix::load(&p)?)
                }
                (None, None, _) => {
                    return Err(CliError::Usage("give --text or --vector-file".into()))
                }
            };
            let radius = match (radius, radius_l2) {
                (Some(r), _) => Radius::Cosine(r),
                (None, Some(a)) => Radius::L2(a),
                (None, None) => return Err(CliError::Usage("give --radius or --radius-l2".into())),
            };
            if matches!(out, Out::Png) && output.is_none() {
                return Err(CliError::Usage("--out png needs --output".into()));
            }
            let opts = QueryOptions {
                gateway,
                token,
                kind,
                point,
                radius,
                threshold,
                epochs,
                eps,
                smoothing: smooth,
                timeout: Duration::from_millis(timeout_ms),
            };
            let series = run_query(&opts)?;
            match (out, output) {
                (Out::Csv, Some(path)) => series.write_csv(BufWriter::new(File::create(path)?))?,
                (Out::Png, Some(path)) => {
                    plot::write_png(&series, &path)?;
                    series.write_csv(std::io::stdout().lock())?;
                }
                (_, None) => series.write_csv(std::io::stdout().lock())?,
            }
            let missing: Vec<String> = series
                .points
                .iter()
                .filter(|p| p.status.is_missing())
                .map(|p| format!("{} ({:?})", p.date, p.status).to_lowercase())
                .collect();
            eprintln!(
                "trend {}: {} epochs, total charged {}",
                series.meta.trend_id.as_deref().unwrap_or("-"),
                series.points.len(),
                series.meta.total_charged
            );
            if !missing.is_empty() {
                eprintln!("no value for {}", missing.join(", "));
                return Ok(EXIT_PARTIAL as u8);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Code 2 is reserved for partial answers.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
