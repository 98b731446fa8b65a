//! HTTP JSON API over the engine.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fieldcare_core::domain::{CaseId, CaseRecord, LanguageTag, PipelineEvent, Sex};
use fieldcare_core::pipeline::{CaseSession, Engine, EngineError, FinalResponse};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    /// Static bearer token; `None` disables authentication.
    pub token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, code: code.to_string(), message: message.into(), violations: Vec::new() }
    }

    fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
    }

    fn invalid_body(rejection: &JsonRejection) -> Self {
        // The rejection text can echo request content, so only its class is kept.
        let message = match rejection {
            JsonRejection::MissingJsonContentType(_) => "expected an application/json body",
            JsonRejection::JsonSyntaxError(_) => "request body is not valid JSON",
            JsonRejection::JsonDataError(_) => "request body does not match the expected schema",
            _ => "request body could not be read",
        };
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }
}

impl From<EngineError> for ApiError {
    fn from(err: EngineError) -> Self {
        match err {
            EngineError::InvalidCase(report) => Self {
                violations: report
                    .violations
                    .iter()
                    .map(|v| {
                        let mut value = serde_json::to_value(v).unwrap_or(Value::Null);
                        value["message"] = Value::String(v.to_string());
                        value
                    })
                    .collect(),
                ..Self::new(StatusCode::BAD_REQUEST, "invalid_case", "case failed validation")
            },
            EngineError::EmptyTurn => Self::new(StatusCode::BAD_REQUEST, "empty_turn", err.to_string()),
            EngineError::DuplicateCase(_) => Self::new(StatusCode::CONFLICT, "duplicate_case", err.to_string()),
            EngineError::UnknownCase(_) => Self::new(StatusCode::NOT_FOUND, "unknown_case", err.to_string()),
            EngineError::ClosedSession { .. } => Self::new(StatusCode::CONFLICT, "closed_session", err.to_string()),
            EngineError::Store(store) => {
                tracing::error!("storage failure: {store}");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_failure", "case storage failed")
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientBody {
    #[serde(default)]
    pub age: Option<i64>,
    #[serde(default)]
    pub sex: Option<Sex>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewCaseBody {
    pub language: String,
    #[serde(default)]
    pub patient: PatientBody,
    pub text: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnBody {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseCreated {
    pub case_id: CaseId,
    pub response: FinalResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnReply {
    pub response: FinalResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseView {
    pub session: CaseSession,
    pub events: Vec<PipelineEvent>,
}

/// Fresh random case identifier.
pub fn new_case_id() -> CaseId {
    CaseId::new(format!("case-{}", uuid::Uuid::new_v4().simple()))
}

fn require_backends(engine: &Engine) -> Result<(), ApiError> {
    let missing = engine.missing_backends();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "backend_unconfigured",
            format!("no backend configured for: {}", missing.join(", ")),
        ))
    }
}

fn known_case_id(raw: &str) -> Result<CaseId, ApiError> {
    let id = CaseId::new(raw);
    if id.is_well_formed() {
        Ok(id)
    } else {
        Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_case", "unknown case"))
    }
}

async fn create_case(
    State(state): State<AppState>,
    body: Result<Json<NewCaseBody>, JsonRejection>,
) -> Result<(StatusCode, Json<CaseCreated>), ApiError> {
    let Json(body) = body.map_err(|e| ApiError::invalid_body(&e))?;
    let language = LanguageTag::parse(&body.language).map_err(|e| ApiError {
        violations: vec![json!({"kind": "invalid_language", "message": e.to_string()})],
        ..ApiError::new(StatusCode::BAD_REQUEST, "invalid_case", "case failed validation")
    })?;
    require_backends(&state.engine)?;
    let mut case = CaseRecord::new(new_case_id(), language, body.text);
    case.patient_age = body.patient.age;
    case.patient_sex = body.patient.sex;
    let case_id = case.case_id.clone();
    let response = state.engine.run_case(case).await?;
    Ok((StatusCode::CREATED, Json(CaseCreated { case_id, response })))
}

async fn add_turn(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<TurnBody>, JsonRejection>,
) -> Result<Json<TurnReply>, ApiError> {
    let case_id = known_case_id(&id)?;
    let Json(body) = body.map_err(|e| ApiError::invalid_body(&e))?;
    require_backends(&state.engine)?;
    let response = state.engine.handle_turn(&case_id, &body.text).await?;
    Ok(Json(TurnReply { response }))
}

async fn get_case(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<CaseView>, ApiError> {
    let case_id = known_case_id(&id)?;
    let session = state.engine.load_session(&case_id)?;
    let events = state.engine.events(&case_id)?;
    Ok(Json(CaseView { session, events }))
}

async fn health(State(state): State<AppState>) -> Response {
    let mut failing = state.engine.pool().unreachable().await;
    failing.extend(state.engine.missing_backends());
    if failing.is_empty() {
        Json(json!({"ok": true})).into_response()
    } else {
        (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"ok": false, "unavailable": failing}))).into_response()
    }
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::unauthorized().into_response();
        }
    }
    next.run(request).await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

fn cors(origins: &[String]) -> Option<CorsLayer> {
    let origins: Vec<HeaderValue> = origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
    if origins.is_empty() {
        return None;
    }
    Some(
        CorsLayer::new()
            .allow_origin(origins)
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]),
    )
}

/// Full router: `/v1/health` is open, the case routes sit behind the
/// optional bearer token, CORS follows `server.cors_origins`.
pub fn router(state: AppState) -> Router {
    let protected = Router::new()
        .route("/v1/cases", post(create_case))
        .route("/v1/cases/{id}", get(get_case))
        .route("/v1/cases/{id}/turns", post(add_turn))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    let origins = state.engine.settings().server.cors_origins.clone();
    let app = Router::new()
        .route("/v1/health", get(health))
        .merge(protected)
        .fallback(not_found)
        .with_state(state);
    match cors(&origins) {
        Some(layer) => app.layer(layer),
        None => app,
    }
}
