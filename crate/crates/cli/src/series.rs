//! Per-epoch trend series and their CSV form.
//!
//! The CSV starts with `# key=value` metadata lines, followed by a header and
//! one row per epoch. Floats are written in shortest round-trip form, so
//! parsing a written file gives back the same series bit for bit.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use trendscope_core::epoch::epoch_date;
use trendscope_core::{Epoch, EpochOutcome, QueryKind, QueryResponse};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointStatus {
    Count,
    Exact,
    Bit,
    Refused,
    Deleted,
}

impl PointStatus {
    pub fn is_missing(self) -> bool {
        matches!(self, PointStatus::Refused | PointStatus::Deleted)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    /// Plain centered rolling mean.
    Uniform,
    /// Weights `1, 2, .., h+1, .., 2, 1`.
    Triangular,
}

/// A centered smoothing window of odd width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Smoothing {
    pub kernel: Kernel,
    pub window: usize,
}

impl Smoothing {
    pub fn new(kernel: Kernel, window: usize) -> Result<Self, CliError> {
        if window.is_multiple_of(2) {
            return Err(CliError::Usage(format!(
                "smoothing window must be odd, got {window}"
            )));
        }
        Ok(Smoothing { kernel, window })
    }

    fn weights(&self) -> Vec<f64> {
        let h = self.window / 2;
        (0..self.window)
            .map(|i| match self.kernel {
                Kernel::Uniform => 1.0,
                Kernel::Triangular => (h + 1 - i.abs_diff(h)) as f64,
            })
            .collect()
    }

    /// Weighted mean over the window, skipping missing values and
    /// renormalizing at the edges.
    pub fn apply(&self, values: &[Option<f64>]) -> Vec<Option<f64>> {
        let w = self.weights();
        let h = self.window / 2;
        (0..values.len())
            .map(|i| {
                let (mut num, mut den) = (0.0, 0.0);
                for (j, wj) in w.iter().enumerate() {
                    let Some(idx) = (i + j).checked_sub(h) else {
                        continue;
                    };
                    if let Some(Some(v)) = values.get(idx) {
                        num += wj * v;
                        den += wj;
                    }
                }
                (den > 0.0).then(|| num / den)
            })
            .collect()
    }
}

impl fmt::Display for Smoothing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kernel {
            Kernel::Uniform => "uniform",
            Kernel::Triangular => "triangular",
        };
        write!(f, "{k}:{}", self.window)
    }
}

impl FromStr for Smoothing {
    type Err = CliError;

    /// `N`, `uniform:N` or `triangular:N`.
    fn from_str(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Usage(format!("bad smoothing {s:?}"));
        let (kernel, n) = match s.split_once(':') {
            Some(("uniform", n)) => (Kernel::Uniform, n),
            Some(("triangular", n)) => (Kernel::Triangular, n),
            Some(_) => return Err(bad()),
            None => (Kernel::Uniform, s),
        };
        Smoothing::new(kernel, n.parse().map_err(|_| bad())?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesMeta {
    pub kind: QueryKind,
    /// The cosine radius as given, when one was.
    pub radius_cosine: Option<f64>,
    /// The L2 radius the servers used.
    pub radius_l2: f64,
    pub threshold: Option<u64>,
    pub eps: Option<f64>,
    pub total_charged: f64,
    pub trend_id: Option<String>,
    pub smoothing: Option<Smoothing>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub date: NaiveDate,
    pub epoch: Epoch,
    pub value: Option<f64>,
    pub smoothed: Option<f64>,
    pub status: PointStatus,
    pub charged: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendSeries {
    pub meta: SeriesMeta,
    pub points: Vec<TrendPoint>,
}

impl TrendSeries {
    /// Checks that dates match epochs and strictly increase.
    pub fn new(meta: SeriesMeta, points: Vec<TrendPoint>) -> Result<Self, CliError> {
        for p in &points {
            if p.date != epoch_date(p.epoch) {
                return Err(CliError::Series(format!(
                    "epoch {} is {}, not {}",
                    p.epoch,
                    epoch_date(p.epoch),
                    p.date
                )));
            }
        }
        if let Some(w) = points.windows(2).find(|w| w[0].epoch >= w[1].epoch) {
            return Err(CliError::Series(format!(
                "dates must strictly increase, {} is followed by {}",
                w[0].date, w[1].date
            )));
        }
        Ok(TrendSeries { meta, points })
    }

    pub fn from_response(mut meta: SeriesMeta, resp: &QueryResponse) -> Result<Self, CliError> {
        let mut results = resp.results.clone();
        results.sort_by_key(|r| r.epoch);
        let points = results
            .iter()
            .map(|r| TrendPoint {
                date: epoch_date(r.epoch),
                epoch: r.epoch,
                value: r.value(),
                smoothed: None,
                status: match r.outcome {
                    EpochOutcome::Count { .. } => PointStatus::Count,
                    EpochOutcome::Exact { .. } => PointStatus::Exact,
                    EpochOutcome::Bit { .. } => PointStatus::Bit,
                    EpochOutcome::Refused { .. } => PointStatus::Refused,
                    EpochOutcome::Deleted => PointStatus::Deleted,
                },
                charged: r.charged,
            })
            .collect();
        meta.kind = resp.kind;
        meta.total_charged = resp.total_charged;
        let mut s = TrendSeries::new(meta, points)?;
        if let Some(sm) = s.meta.smoothing {
            s.smooth(sm);
        }
        Ok(s)
    }

    pub fn smooth(&mut self, s: Smoothing) {
        let values: Vec<Option<f64>> = self.points.iter().map(|p| p.value).collect();
        for (p, v) in self.points.iter_mut().zip(s.apply(&values)) {
            p.smoothed = v;
        }
        self.meta.smoothing = Some(s);
    }

    /// Any epoch refused or deleted.
    pub fn is_partial(&self) -> bool {
        self.points.iter().any(|p| p.status.is_missing())
    }

    /// The plotted value of each point: smoothed if available.
    pub fn plotted(&self) -> Vec<Option<f64>> {
        self.points
            .iter()
            .map(|p| {
                if self.meta.smoothing.is_some() {
                    p.smoothed
                } else {
                    p.value
                }
            })
            .collect()
    }

    /// Epoch of the largest plotted value; the earliest wins ties.
    pub fn peak(&self) -> Option<Epoch> {
        let mut best: Option<(f64, Epoch)> = None;
        for (p, v) in self.points.iter().zip(self.plotted()) {
            if let Some(v) = v {
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, p.epoch));
                }
            }
        }
        best.map(|(_, e)| e)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), CliError> {
        for (k, v) in self.meta.pairs() {
            writeln!(out, "# {k}={v}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        for p in &self.points {
            w.serialize(p)?;
        }
        if self.points.is_empty() {
            w.write_record(["date", "epoch", "value", "smoothed", "status", "charged"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn parse_csv(text: &str) -> Result<Self, CliError> {
        let mut pairs = Vec::new();
        for line in text.lines() {
            let Some(rest) = line.strip_prefix('#') else {
                break;
            };
            let (k, v) = rest
                .trim_start()
                .split_once('=')
                .ok_or_else(|| CliError::Series(format!("bad metadata line {line:?}")))?;
            pairs.push((k.to_string(), v.to_string()));
        }
        let meta = SeriesMeta::from_pairs(&pairs)?;
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let points = r
            .deserialize()
            .collect::<Result<Vec<TrendPoint>, csv::Error>>()?;
        TrendSeries::new(meta, points)
    }
}

impl SeriesMeta {
    pub fn new(kind: QueryKind, radius_l2: f64) -> Self {
        SeriesMeta {
            kind,
            radius_cosine: None,
            radius_l2,
            threshold: None,
            eps: None,
            total_charged: 0.0,
            trend_id: None,
            smoothing: None,
        }
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![("kind", self.kind.to_string())];
        if let Some(r) = self.radius_cosine {
            out.push(("radius_cosine", r.to_string()));
        }
        out.push(("radius_l2", self.radius_l2.to_string()));
        if let Some(t) = self.threshold {
            out.push(("threshold", t.to_string()));
        }
        if let Some(e) = self.eps {
            out.push(("eps", e.to_string()));
        }
        out.push(("total_charged", self.total_charged.to_string()));
        if let Some(id) = &self.trend_id {
            out.push(("trend_id", id.clone()));
        }
        if let Some(s) = self.smoothing {
            out.push(("smoothing", s.to_string()));
        }
        out
    }

    fn from_pairs(pairs: &[(String, String)]) -> Result<Self, CliError> {
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T, CliError> {
            v.parse()
                .map_err(|_| CliError::Series(format!("bad {k} value {v:?}")))
        }
        let mut kind = None;
        let mut radius_l2 = None;
        let mut m = SeriesMeta::new(QueryKind::Fc, 0.0);
        for (k, v) in pairs {
            match k.as_str() {
                "kind" => {
                    kind = Some(
                        v.parse::<QueryKind>()
                            .map_err(|e| CliError::Series(e.to_string()))?,
                    )
                }
                "radius_cosine" => m.radius_cosine = Some(num(k, v)?),
                "radius_l2" => radius_l2 = Some(num(k, v)?),
                "threshold" => m.threshold = Some(num(k, v)?),
                "eps" => m.eps = Some(num(k, v)?),
                "total_charged" => m.total_charged = num(k, v)?,
                "trend_id" => m.trend_id = Some(v.clone()),
                "smoothing" => m.smoothing = Some(v.parse()?),
                other => return Err(CliError::Series(format!("unknown metadata key {other:?}"))),
            }
        }
        m.kind = kind.ok_or_else(|| CliError::Series("metadata lacks kind".into()))?;
        m.radius_l2 =
            radius_l2.ok_or_else(|| CliError::Series("metadata lacks radius_l2".into()))?;
        Ok(m)
    }
}
