use crate::AppState;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use mstraj_core::dataset::Domain;
use mstraj_core::evaluation::{rollout, validate_request, EvalError, GroundingSpan, RolloutRequest, RolloutResult, DEFAULT_HORIZON};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use serde_path_to_error::Segment;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt::Write;
use std::sync::Arc;

pub struct ApiError {
    status: StatusCode,
    message: String,
    pointer: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), pointer: None }
    }

    fn at(status: StatusCode, pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), pointer: Some(pointer.into()) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(p) = self.pointer {
            body["pointer"] = Value::String(p);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

fn one() -> usize {
    1
}

/// Body of `POST /rollouts`. The burn-in is either a bundled snippet
/// (`burnin_id`) or inline states. Grounding entries are span objects or
/// the compact string `"t_start:t_end,agent,category"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutBody {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burnin_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burnin: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burnin_macro: Option<Vec<Vec<u16>>>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "one")]
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub grounding: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResponse {
    pub id: String,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burnin_id: Option<String>,
    /// The resolved library request, grounding spans included.
    pub request: RolloutRequest,
    pub results: Vec<RolloutResult>,
}

/// Content address of a rollout: equal model and request give equal ids.
pub fn rollout_id(model_id: &str, req: &RolloutRequest) -> String {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(req).expect("requests serialize"));
    hex::encode(&h.finalize()[..12])
}

fn pointer(base: &str, path: &serde_path_to_error::Path) -> String {
    let mut out = base.to_string();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => write!(out, "/{index}").unwrap(),
            Segment::Map { key } => write!(out, "/{}", key.replace('~', "~0").replace('/', "~1")).unwrap(),
            Segment::Enum { variant } => write!(out, "/{variant}").unwrap(),
            Segment::Unknown => {}
        }
    }
    out
}

fn bad_request<E: std::fmt::Display>(base: &str, e: serde_path_to_error::Error<E>) -> ApiError {
    ApiError::at(StatusCode::BAD_REQUEST, pointer(base, e.path()), e.inner().to_string())
}

fn parse_grounding(entries: &[Value]) -> ApiResult<Vec<GroundingSpan>> {
    entries
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let base = format!("/grounding/{i}");
            match v {
                Value::String(s) => s.parse().map_err(|e: String| ApiError::at(StatusCode::BAD_REQUEST, base, e)),
                Value::Object(_) => serde_path_to_error::deserialize(v).map_err(|e| bad_request(&base, e)),
                _ => Err(ApiError::at(StatusCode::BAD_REQUEST, base, "expected a span object or a \"t_start:t_end,agent,category\" string")),
            }
        })
        .collect()
}

pub async fn list_models(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "models": state.models.entries() }))
}

pub async fn get_burnins(State(state): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Json<Value>> {
    let name = q.get("domain").ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing query parameter `domain`"))?;
    let domain: Domain = name.parse().map_err(|e: String| ApiError::new(StatusCode::NOT_FOUND, e))?;
    Ok(Json(json!({ "domain": domain, "snippets": state.burnins.for_domain(domain) })))
}

pub async fn create_rollout(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let mut de = serde_json::Deserializer::from_slice(&body);
    let body: RolloutBody = serde_path_to_error::deserialize(&mut de).map_err(|e| bad_request("", e))?;
    let grounding = parse_grounding(&body.grounding)?;
    let burnin = match (&body.burnin_id, body.burnin) {
        (Some(id), None) => state
            .burnins
            .get(id)
            .map(|s| s.frames.clone())
            .ok_or_else(|| ApiError::at(StatusCode::NOT_FOUND, "/burnin_id", format!("unknown burn-in `{id}`")))?,
        (None, Some(frames)) => frames,
        _ => return Err(ApiError::at(StatusCode::BAD_REQUEST, "/burnin", "give exactly one of `burnin_id` and `burnin`")),
    };
    let model = state.models.get(&body.model_id).ok_or_else(|| {
        let msg = match state.models.entry(&body.model_id).and_then(|e| e.error.as_deref()) {
            Some(err) => format!("model `{}` failed to load: {err}", body.model_id),
            None => format!("unknown model `{}`", body.model_id),
        };
        ApiError::at(StatusCode::NOT_FOUND, "/model_id", msg)
    })?;
    let req = RolloutRequest {
        burnin,
        burnin_macro: body.burnin_macro,
        horizon: body.horizon,
        grounding,
        samples: body.samples,
        seed: body.seed,
    };
    validate_request(&model, &req).map_err(|e| match e {
        EvalError::Request { pointer, message } => ApiError::at(StatusCode::BAD_REQUEST, pointer, message),
        other => ApiError::new(StatusCode::BAD_REQUEST, other.to_string()),
    })?;
    let permit = state
        .rollout_permits
        .clone()
        .try_acquire_owned()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "all rollout slots are busy, retry later"))?;
    let id = rollout_id(&body.model_id, &req);
    let (req, results) = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let results = rollout(&model, &req);
        (req, results)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let results = results.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let response = Arc::new(RolloutResponse { id: id.clone(), model_id: body.model_id, burnin_id: body.burnin_id, request: req, results });
    state.cache.lock().expect("cache lock").insert(id, response.clone());
    Ok(Json(&*response).into_response())
}

pub async fn get_rollout(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let hit = state.cache.lock().expect("cache lock").get(&id);
    match hit {
        Some(r) => Ok(Json(&*r).into_response()),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("no cached rollout `{id}`"))),
    }
}

fn cell_json(state: &AppState, cell: usize) -> Value {
    let c = &state.court;
    json!({ "cell": cell, "row": cell / c.cols, "col": cell % c.cols, "center": c.cell_center(cell) })
}

pub async fn court(State(state): State<Arc<AppState>>) -> Json<Value> {
    let cells: Vec<Value> = (0..state.court.cell_count()).map(|c| cell_json(&state, c)).collect();
    Json(json!({ "geometry": state.court, "cells": cells }))
}

/// Grid cell of a court position in feet.
pub async fn court_cell(State(state): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Json<Value>> {
    let coord = |name: &str| -> ApiResult<f64> {
        let raw = q.get(name).ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("missing query parameter `{name}`")))?;
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("`{name}` must be a finite number")))
    };
    let (x, y) = (coord("x")?, coord("y")?);
    let mut out = cell_json(&state, state.court.label_cell(&[x, y]));
    out["x"] = json!(x);
    out["y"] = json!(y);
    Ok(Json(out))
}
