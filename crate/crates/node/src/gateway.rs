//! HTTP front end for queriers.
//!
//! Each request is forwarded to every server through a [`ClusterClient`];
//! the blocking client runs on tokio's blocking pool.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use trendscope_core::dp::ChargeReceipt;
use trendscope_core::query::{l2_radius_from_cosine, EpochRange};
use trendscope_core::{
    intake::toy_embed, EngineError, Epoch, MpcError, ProjectionMatrix, QueryKind, QueryRequest,
    QueryResponse,
};

use crate::client::ClusterClient;
use crate::protocol::ErrorCode;
use crate::NodeError;

#[derive(Clone, Debug)]
pub struct GatewayConfig {
    pub servers: Vec<SocketAddr>,
    /// Required bearer token; `None` disables authentication.
    pub token: Option<String>,
    /// Projection used to embed free-text queries.
    pub projection: Option<ProjectionMatrix>,
    pub timeout: Duration,
}

/// A stored query answer, served again under `/trends/{id}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRecord {
    pub id: String,
    pub request: QueryRequest,
    pub response: QueryResponse,
    pub receipts: Vec<ChargeReceipt>,
}

pub struct GatewayState {
    client: ClusterClient,
    token: Option<String>,
    projection: Option<ProjectionMatrix>,
    trends: Mutex<HashMap<String, TrendRecord>>,
    next_id: Mutex<u64>,
}

impl GatewayState {
    pub fn new(cfg: GatewayConfig) -> Arc<Self> {
        Arc::new(GatewayState {
            client: ClusterClient::new(cfg.servers, cfg.timeout),
            token: cfg.token,
            projection: cfg.projection,
            trends: Mutex::new(HashMap::new()),
            next_id: Mutex::new(0),
        })
    }

    fn store(
        &self,
        request: QueryRequest,
        response: QueryResponse,
        receipts: Vec<ChargeReceipt>,
    ) -> TrendRecord {
        let id = {
            let mut n = self.next_id.lock().expect("id lock");
            *n += 1;
            format!("{}-{}", &request.fingerprint()[..12], *n)
        };
        let rec = TrendRecord {
            id: id.clone(),
            request,
            response,
            receipts,
        };
        self.trends
            .lock()
            .expect("trend lock")
            .insert(id, rec.clone());
        rec
    }
}

/// Epoch range given either as `"FROM..TO"` or as `{from, to}`.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum EpochsField {
    Text(String),
    Range(EpochRange),
}

/// Body of `POST /query`.
#[derive(Clone, Debug, Deserialize)]
pub struct QueryBody {
    pub kind: QueryKind,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub vector: Option<Vec<f64>>,
    /// Cosine-distance radius.
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub radius_l2: Option<f64>,
    #[serde(default)]
    pub threshold: Option<u64>,
    pub epochs: EpochsField,
    #[serde(default)]
    pub eps: Option<f64>,
}

#[derive(Debug, Deserialize)]
pub struct BudgetParams {
    #[serde(default)]
    pub epochs: Option<String>,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

impl From<NodeError> for ApiError {
    fn from(e: NodeError) -> Self {
        let status = match &e {
            e if e.is_transport() => StatusCode::BAD_GATEWAY,
            NodeError::Remote {
                code: ErrorCode::Malformed,
                ..
            }
            | NodeError::Engine(EngineError::Query(_)) => StatusCode::BAD_REQUEST,
            NodeError::Remote {
                code: ErrorCode::ConfigMismatch,
                ..
            } => StatusCode::BAD_GATEWAY,
            NodeError::Remote { .. }
            | NodeError::Engine(EngineError::Mpc(MpcError::IntegrityFailure(_))) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn authorize(state: &GatewayState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(token) = &state.token else {
        return Ok(());
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given == Some(token.as_str()) {
        Ok(())
    } else {
        Err(ApiError(
            StatusCode::UNAUTHORIZED,
            "missing or wrong bearer token".into(),
        ))
    }
}

fn unit(v: &[f64]) -> Result<Vec<f64>, ApiError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-9 && n.is_finite()) {
        return Err(bad_request("query vector has zero length"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Turns a request body into a server query.
pub fn build_request(
    body: &QueryBody,
    projection: Option<&ProjectionMatrix>,
) -> Result<QueryRequest, String> {
    let q = match (&body.text, &body.vector) {
        (Some(text), None) => {
            let p = projection.ok_or("this gateway has no projection for text queries")?;
            let raw = toy_embed(text).map_err(|e| e.to_string())?;
            if raw.len() != p.ell() {
                return Err(format!(
                    "text embeds to {} dimensions, projection expects {}",
                    raw.len(),
                    p.ell()
                ));
            }
            unit(&p.project(&raw)).map_err(|e| e.1)?
        }
        (None, Some(v)) => unit(v).map_err(|e| e.1)?,
        _ => return Err("give exactly one of `text` and `vector`".into()),
    };
    let radius = match (body.radius, body.radius_l2) {
        (Some(rho), None) if rho > 0.0 && rho <= 2.0 => l2_radius_from_cosine(rho).min(2.0),
        (Some(rho), None) => return Err(format!("cosine radius must lie in (0, 2], got {rho}")),
        (None, Some(a)) => a,
        _ => return Err("give exactly one of `radius` and `radius_l2`".into()),
    };
    let epochs = match &body.epochs {
        EpochsField::Text(s) => EpochRange::parse(s).map_err(|e| e.to_string())?,
        EpochsField::Range(r) => *r,
    };
    let req = QueryRequest {
        kind: body.kind,
        q,
        radius,
        threshold: body.threshold,
        epochs,
        eps: body.eps,
    };
    if let Some(p) = projection {
        req.validate(p.k()).map_err(|e| e.to_string())?;
    }
    Ok(req)
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, NodeError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn post_query(
    State(state): State<Arc<GatewayState>>,
    headers: HeaderMap,
    body: Result<Json<QueryBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Response, ApiError> {
    authorize(&state, &headers)?;
    let Json(body) = body.map_err(|e| bad_request(e.body_text()))?;
    let req = build_request(&body, state.projection.as_ref()).map_err(bad_request)?;
    let client = state.client.clone();
    let sent = req.clone();
    let answer = blocking(move || client.query(&sent)).await?;
    let status = if answer.response.any_deleted() {
        StatusCode::GONE
    } else if answer.response.any_refused() {
        StatusCode::CONFLICT
    } else {
        StatusCode::OK
    };
    let rec = state.store(req, answer.response, answer.receipts);
    Ok((status, Json(rec)).into_response())
}

async fn get_budget(
    State(state): State<Arc<GatewayState>>,
    headers: HeaderMap,
    Query(params): Query<BudgetParams>,
) -> Result<Response, ApiError> {
    authorize(&state, &headers)?;
    let epochs: Option<Vec<Epoch>> = match params.epochs {
        Some(s) => Some(
            EpochRange::parse(&s)
                .map_err(|e| bad_request(e.to_string()))?
                .iter()
                .collect(),
        ),
        None => None,
    };
    let client = state.client.clone();
    let view = blocking(move || client.budget(epochs)).await?;
    Ok(Json(view).into_response())
}

async fn get_alerts(
    State(state): State<Arc<GatewayState>>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    authorize(&state, &headers)?;
    let client = state.client.clone();
    let alerts = blocking(move || client.alerts()).await?;
    Ok(Json(json!({ "alerts": alerts })).into_response())
}

async fn get_trend(
    State(state): State<Arc<GatewayState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    authorize(&state, &headers)?;
    let rec = state.trends.lock().expect("trend lock").get(&id).cloned();
    match rec {
        Some(r) => Ok(Json(r).into_response()),
        None => Err(ApiError(StatusCode::NOT_FOUND, format!("no trend {id}"))),
    }
}

pub fn router(state: Arc<GatewayState>) -> Router {
    Router::new()
        .route("/query", post(post_query))
        .route("/budget", get(get_budget))
        .route("/alerts", get(get_alerts))
        .route("/trends/{id}", get(get_trend))
        .with_state(state)
}

/// Serves the gateway until the future is dropped or the listener fails.
pub async fn serve(cfg: GatewayConfig, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(GatewayState::new(cfg))).await
}
