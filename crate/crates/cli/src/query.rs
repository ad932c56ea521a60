//! Queries through the HTTP gateway.

use std::time::Duration;

use reqwest::StatusCode;
use serde_json::{json, Value};
use trendscope_core::{ProjectionMatrix, QueryKind};
use trendscope_node::gateway::TrendRecord;

use crate::series::{SeriesMeta, Smoothing, TrendSeries};
use crate::CliError;

#[derive(Clone, Debug)]
pub enum QueryPoint {
    Text(String),
    /// Already in the projected space.
    Projected(Vec<f64>),
    /// An input-space embedding, projected here before sending.
    Raw(Vec<f64>, ProjectionMatrix),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Radius {
    Cosine(f64),
    L2(f64),
}

#[derive(Clone, Debug)]
pub struct QueryOptions {
    pub gateway: String,
    pub token: Option<String>,
    pub kind: QueryKind,
    pub point: QueryPoint,
    pub radius: Radius,
    pub threshold: Option<u64>,
    /// `FROM..TO`, day numbers or ISO dates.
    pub epochs: String,
    pub eps: Option<f64>,
    pub smoothing: Option<Smoothing>,
    pub timeout: Duration,
}

impl QueryOptions {
    pub fn body(&self) -> Value {
        let mut b = json!({ "kind": self.kind, "epochs": self.epochs });
        match &self.point {
            QueryPoint::Text(t) => b["text"] = json!(t),
            QueryPoint::Projected(v) => b["vector"] = json!(v),
            QueryPoint::Raw(v, p) => b["vector"] = json!(p.project(v)),
        }
        match self.radius {
            Radius::Cosine(r) => b["radius"] = json!(r),
            Radius::L2(r) => b["radius_l2"] = json!(r),
        }
        if let Some(t) = self.threshold {
            b["threshold"] = json!(t);
        }
        if let Some(e) = self.eps {
            b["eps"] = json!(e);
        }
        b
    }
}

fn transport(e: reqwest::Error) -> CliError {
    CliError::Transport(e.to_string())
}

/// Sends the query and builds the series. Refused and deleted epochs come
/// back as points with no value; callers check [`TrendSeries::is_partial`].
pub fn run_query(opts: &QueryOptions) -> Result<TrendSeries, CliError> {
    if let QueryPoint::Raw(v, p) = &opts.point {
        if v.len() != p.ell() {
            return Err(CliError::Usage(format!(
                "vector has {} entries, projection expects {}",
                v.len(),
                p.ell()
            )));
        }
    }
    let http = reqwest::blocking::Client::builder()
        .timeout(opts.timeout)
        .build()
        .map_err(transport)?;
    let url = format!("{}/query", opts.gateway.trim_end_matches('/'));
    let mut req = http.post(url).json(&opts.body());
    if let Some(t) = &opts.token {
        req = req.bearer_auth(t);
    }
    let resp = req.send().map_err(transport)?;
    let status = resp.status();
    let text = resp.text().map_err(transport)?;
    if !matches!(
        status,
        StatusCode::OK | StatusCode::CONFLICT | StatusCode::GONE
    ) {
        let message = serde_json::from_str::<Value>(&text)
            .ok()
            .and_then(|v| v["error"].as_str().map(str::to_string))
            .unwrap_or(text);
        return Err(CliError::Http {
            status: status.as_u16(),
            message,
        });
    }
    let rec: TrendRecord = serde_json::from_str(&text)?;
    let meta = SeriesMeta {
        kind: rec.request.kind,
        radius_cosine: match opts.radius {
            Radius::Cosine(r) => Some(r),
            Radius::L2(_) => None,
        },
        radius_l2: rec.request.radius,
        threshold: rec.request.threshold,
        eps: rec.request.eps,
        total_charged: rec.response.total_charged,
        trend_id: Some(rec.id.clone()),
        smoothing: opts.smoothing,
    };
    TrendSeries::from_response(meta, &rec.response)
}
