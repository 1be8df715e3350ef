//! HTTP API. Handlers lock the engine only for synchronous work; peer
//! traffic produced by a request is handed to the [`Network`] afterwards.

use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State as AxState};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use coldledger_core::access_control::owner_type_of;
use coldledger_core::replication::{Envelope, TxStatus};
use coldledger_core::telemetry::{Alert, Reading, SignedReading};
use coldledger_core::{Address, Hash, Transaction, VaccineId};

use crate::engine::{Engine, Outbound, Rejection, SubmitError};
use crate::net::{now_ms, Network};

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<RwLock<Engine>>,
    pub net: Network,
}

/// Error body: `{code, message, height}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub code: String,
    pub message: String,
    pub height: u64,
}

impl ApiError {
    fn new(status: StatusCode, code: impl Into<String>, message: impl Into<String>, height: u64) -> Self {
        ApiError {
            status,
            code: code.into(),
            message: message.into(),
            height,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/tx", post(post_tx))
        .route("/tx/{hash}", get(get_tx))
        .route("/telemetry", post(post_telemetry))
        .route("/vaccines/{id}", get(get_vaccine))
        .route("/vaccines/{id}/history", get(get_history))
        .route("/handovers/pending", get(get_pending))
        .route("/alerts", get(get_alerts))
        .route("/chain/height", get(get_height))
        .route("/chain/blocks/{h}", get(get_block))
        .route("/accounts/{addr}/nonce", get(get_nonce))
        .route("/state/digest", get(get_digest))
        .route("/node", get(get_node))
        .route("/p2p", post(post_p2p))
        .with_state(state)
}

impl AppState {
    fn height(&self) -> u64 {
        self.engine.read().expect("engine lock").chain().height()
    }

    fn decode_error(&self, message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, "DECODE_ERROR", message, self.height())
    }

    fn dispatch(&self, out: Vec<Outbound>) {
        self.net.dispatch(out);
    }

    fn fatal(&self, e: crate::engine::EngineError) -> ApiError {
        tracing::error!(error = %e, "engine failure");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.code(), e.to_string(), self.height())
    }
}

fn parse_id(app: &AppState, raw: &str) -> Result<VaccineId, ApiError> {
    raw.parse::<u64>()
        .map(VaccineId)
        .map_err(|_| app.decode_error(format!("bad vaccine id {raw:?}")))
}

fn parse_address(app: &AppState, raw: &str) -> Result<Address, ApiError> {
    raw.parse()
        .map_err(|_| app.decode_error(format!("bad address {raw:?}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Submitted {
    pub hash: Hash,
    pub status: String,
}

async fn post_tx(AxState(app): AxState<AppState>, body: Bytes) -> Result<(StatusCode, Json<Submitted>), ApiError> {
    let tx: Transaction = serde_json::from_slice(&body).map_err(|e| app.decode_error(e.to_string()))?;
    let result = app.engine.write().expect("engine lock").submit(now_ms(), tx);
    match result {
        Ok((hash, out)) => {
            app.dispatch(out);
            app.net.wake();
            Ok((
                StatusCode::ACCEPTED,
                Json(Submitted {
                    hash,
                    status: "PENDING".into(),
                }),
            ))
        }
        Err(SubmitError::Rejected(r)) => Err(rejected(&app, r)),
        Err(SubmitError::Fatal(e)) => Err(app.fatal(e)),
    }
}

fn rejected(app: &AppState, r: Rejection) -> ApiError {
    let status = if r.code == "DUPLICATE_TRANSACTION" {
        StatusCode::CONFLICT
    } else {
        StatusCode::UNPROCESSABLE_ENTITY
    };
    ApiError::new(status, r.code, r.message, app.height())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TxReport {
    pub hash: Hash,
    #[serde(flatten)]
    pub status: TxStatus,
}

async fn get_tx(AxState(app): AxState<AppState>, Path(raw): Path<String>) -> ApiResult<TxReport> {
    let hash: Hash = raw.parse().map_err(|_| app.decode_error(format!("bad hash {raw:?}")))?;
    let status = app.engine.read().expect("engine lock").tx_status(&hash);
    if status == TxStatus::Unknown {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "UNKNOWN_TRANSACTION",
            format!("transaction {hash} is not known to this node"),
            app.height(),
        ));
    }
    Ok(Json(TxReport { hash, status }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LineResult {
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hash: Option<Hash>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TelemetryReceipt {
    pub accepted: usize,
    pub rejected: usize,
    pub results: Vec<LineResult>,
}

/// Line-delimited JSON `SignedReading`s. Lines are processed in order; the
/// response lists a result per non-empty line.
async fn post_telemetry(
    AxState(app): AxState<AppState>,
    body: Bytes,
) -> Result<(StatusCode, Json<TelemetryReceipt>), ApiError> {
    let text = std::str::from_utf8(&body).map_err(|e| app.decode_error(e.to_string()))?;
    let mut lines = Vec::new();
    let mut readings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        lines.push(i + 1);
        readings.push(serde_json::from_str::<SignedReading>(line).map_err(|e| Rejection {
            code: "DECODE_ERROR".into(),
            message: e.to_string(),
        }));
    }
    let result = app.engine.write().expect("engine lock").ingest(now_ms(), readings);
    let (results, out) = result.map_err(|e| app.fatal(e))?;
    app.dispatch(out);
    app.net.wake();
    let results: Vec<LineResult> = lines
        .into_iter()
        .zip(results)
        .map(|(line, r)| match r {
            Ok(hash) => LineResult {
                line,
                hash: Some(hash),
                code: None,
                message: None,
            },
            Err(rej) => LineResult {
                line,
                hash: None,
                code: Some(rej.code),
                message: Some(rej.message),
            },
        })
        .collect();
    let rejected = results.iter().filter(|r| r.code.is_some()).count();
    let receipt = TelemetryReceipt {
        accepted: results.len() - rejected,
        rejected,
        results,
    };
    let status = if rejected == 0 {
        StatusCode::ACCEPTED
    } else {
        StatusCode::UNPROCESSABLE_ENTITY
    };
    Ok((status, Json(receipt)))
}

fn unknown_vaccine(app: &AppState, id: VaccineId) -> ApiError {
    ApiError::new(
        StatusCode::NOT_FOUND,
        "UNKNOWN_VACCINE",
        format!("vaccine {id} is not registered"),
        app.height(),
    )
}

async fn get_vaccine(AxState(app): AxState<AppState>, Path(raw): Path<String>) -> Response {
    let id = match parse_id(&app, &raw) {
        Ok(id) => id,
        Err(e) => return e.into_response(),
    };
    let snapshot = app.engine.read().expect("engine lock").state().snapshot(id);
    match snapshot {
        Some(s) => Json(s).into_response(),
        None => unknown_vaccine(&app, id).into_response(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct History {
    pub vaccine_id: VaccineId,
    pub owner_history: Vec<Address>,
    pub readings: Vec<Reading>,
}

async fn get_history(AxState(app): AxState<AppState>, Path(raw): Path<String>) -> ApiResult<History> {
    let id = parse_id(&app, &raw)?;
    let engine = app.engine.read().expect("engine lock");
    let state = engine.state();
    let Some(record) = state.vaccine(id) else {
        drop(engine);
        return Err(unknown_vaccine(&app, id));
    };
    Ok(Json(History {
        vaccine_id: id,
        owner_history: record.owner_history.clone(),
        readings: state.telemetry().readings_for(id).into_iter().cloned().collect(),
    }))
}

#[derive(Debug, Deserialize)]
struct PendingQuery {
    owner: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PendingHandover {
    pub vaccine_id: VaccineId,
    pub current_owner: Address,
    pub next_owner: Address,
}

/// Pending handovers the party is sending or receiving.
async fn get_pending(
    AxState(app): AxState<AppState>,
    query: Result<Query<PendingQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Vec<PendingHandover>> {
    let Query(q) = query.map_err(|e| app.decode_error(e.body_text()))?;
    let owner = parse_address(&app, &q.owner)?;
    let engine = app.engine.read().expect("engine lock");
    let list = engine
        .state()
        .ownership()
        .pending_for(&owner)
        .into_iter()
        .map(|(vaccine_id, o)| PendingHandover {
            vaccine_id,
            current_owner: o.current_owner,
            next_owner: o.next_owner,
        })
        .collect();
    Ok(Json(list))
}

#[derive(Debug, Deserialize)]
struct AlertQuery {
    vaccine_id: Option<u64>,
}

async fn get_alerts(AxState(app): AxState<AppState>, Query(q): Query<AlertQuery>) -> Json<Vec<Alert>> {
    let engine = app.engine.read().expect("engine lock");
    let alerts = engine
        .alerts()
        .iter()
        .filter(|a| q.vaccine_id.is_none_or(|id| a.vaccine_ids.contains(&VaccineId(id))))
        .cloned()
        .collect();
    Json(alerts)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Height {
    pub height: u64,
    pub tip_hash: Hash,
}

async fn get_height(AxState(app): AxState<AppState>) -> Json<Height> {
    let engine = app.engine.read().expect("engine lock");
    let tip = engine.chain().tip();
    Json(Height {
        height: tip.height,
        tip_hash: tip.hash,
    })
}

async fn get_block(AxState(app): AxState<AppState>, Path(raw): Path<String>) -> Response {
    let Ok(h) = raw.parse::<u64>() else {
        return app.decode_error(format!("bad height {raw:?}")).into_response();
    };
    let engine = app.engine.read().expect("engine lock");
    let Some(block) = engine.chain().block(h) else {
        let height = engine.chain().height();
        return ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_BLOCK", format!("no block at height {h}"), height)
            .into_response();
    };
    let certificate = engine.replica().certificates().get(&h).cloned().unwrap_or_default();
    Json(json!({ "block": block, "certificate": certificate })).into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NonceInfo {
    pub address: Address,
    pub last_nonce: Option<u64>,
    /// Next nonce after the committed chain and this node's pending pool.
    pub next_nonce: u64,
}

async fn get_nonce(AxState(app): AxState<AppState>, Path(raw): Path<String>) -> ApiResult<NonceInfo> {
    let address = parse_address(&app, &raw)?;
    let engine = app.engine.read().expect("engine lock");
    let ahead = engine.speculative_state();
    let pending_max = engine
        .replica()
        .pending()
        .filter(|tx| tx.sender == address)
        .map(|tx| tx.nonce + 1)
        .max()
        .unwrap_or(0);
    Ok(Json(NonceInfo {
        address,
        last_nonce: engine.state().last_nonce(&address),
        next_nonce: ahead.next_nonce(&address).max(pending_max),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Digest {
    pub height: u64,
    pub digest: Hash,
}

async fn get_digest(AxState(app): AxState<AppState>) -> Json<Digest> {
    let engine = app.engine.read().expect("engine lock");
    Json(Digest {
        height: engine.chain().height(),
        digest: engine.state().digest(),
    })
}

async fn get_node(AxState(app): AxState<AppState>) -> Json<serde_json::Value> {
    let engine = app.engine.read().expect("engine lock");
    let address = engine.address();
    Json(json!({
        "address": address,
        "chain_id": engine.chain().config().chain_id,
        "height": engine.chain().height(),
        "role": owner_type_of(engine.state().parties(), &address),
        "validators": engine.chain().config().validator_addresses(),
        "pending": engine.replica().pending_len(),
        "policy": engine.policy(),
    }))
}

async fn post_p2p(AxState(app): AxState<AppState>, body: Bytes) -> Result<StatusCode, ApiError> {
    let envelope: Envelope = serde_json::from_slice(&body).map_err(|e| app.decode_error(e.to_string()))?;
    let result = app.engine.write().expect("engine lock").on_peer_message(now_ms(), envelope);
    match result {
        Ok(out) => {
            app.dispatch(out);
            app.net.wake();
            Ok(StatusCode::ACCEPTED)
        }
        Err(SubmitError::Rejected(r)) => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            r.code,
            r.message,
            app.height(),
        )),
        Err(SubmitError::Fatal(e)) => Err(app.fatal(e)),
    }
}
