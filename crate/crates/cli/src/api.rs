//! The `/v1` HTTP service.

#![allow(clippy::result_large_err)]

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use oncotwin_core::eval::{
    check_verdicts, evaluate_run, lint_reported_table, AdjudicationRecord, EvalError, LintIssue, MetricsTable,
    ReportedRow,
};
use oncotwin_core::matcher::{cohort_funnel, whatif, FunnelStage, MatchError, WhatIfResult};
use oncotwin_core::model::{validate_twin, ValidationReport};
use oncotwin_core::recommend::{default_kb, load_kb, recommend, KbError};
use oncotwin_core::store::{PutReceipt, StoreError};
use oncotwin_core::{
    Config, DigitalTwin, EligibilitySpec, KnowledgeEntry, OutcomeUpdate, RecommendContext, Recommendation, TwinStore,
    Verdict, WhatIfOverrides,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::jobs::{execute_extraction, preflight, ExtractError, ExtractRequest, JobRegistry, JobStatus, JobView};

/// Error body of every failed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[error("{status} {code}: {message}")]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status: status.as_u16(),
            code: code.into(),
            message: message.into(),
            detail: None,
        }
    }

    fn with_detail(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }

    pub fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn unprocessable(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    /// A 422 naming every field with a blocking finding.
    pub fn invalid_twin(report: &ValidationReport) -> Self {
        let fields: Vec<&str> = report.errors().map(|f| f.field.as_str()).collect();
        Self::unprocessable("invalid_twin", format!("twin failed validation: {}", fields.join(", ")))
            .with_detail(json!({ "fields": fields, "findings": report.findings }))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match &e {
            StoreError::NotFound(_) => ApiError::not_found("twin_not_found", e.to_string()),
            StoreError::Invalid(report) => ApiError::invalid_twin(report),
            StoreError::ImmutableField(f) => {
                ApiError::unprocessable("immutable_field", e.to_string()).with_detail(json!({ "fields": [f] }))
            }
            StoreError::BadUpdate(_) => ApiError::unprocessable("bad_update", e.to_string()),
            StoreError::Query(_) => ApiError::bad_request("bad_query", e.to_string()),
            StoreError::Locked(_) => ApiError::new(StatusCode::CONFLICT, "store_locked", e.to_string()),
            StoreError::Corrupt { .. } | StoreError::SchemaMismatch { .. } | StoreError::Io(_) => {
                ApiError::internal(e.to_string())
            }
        }
    }
}

impl From<MatchError> for ApiError {
    fn from(e: MatchError) -> Self {
        match &e {
            MatchError::UnmodeledField(f) => {
                ApiError::unprocessable("unmodeled_field", e.to_string()).with_detail(json!({ "fields": [f] }))
            }
            MatchError::MalformedOverrides(_) => ApiError::unprocessable("bad_overrides", e.to_string()),
            MatchError::InvalidSpec(_) => ApiError::unprocessable("bad_spec", e.to_string()),
        }
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        match &e {
            EvalError::ConflictingVerdicts(c) => {
                ApiError::unprocessable("conflicting_verdicts", e.to_string()).with_detail(json!({ "conflicts": c }))
            }
            EvalError::Io(_) => ApiError::internal(e.to_string()),
            _ => ApiError::unprocessable("bad_evaluation", e.to_string()),
        }
    }
}

impl From<ExtractError> for ApiError {
    fn from(e: ExtractError) -> Self {
        match &e {
            ExtractError::Privacy { .. } => ApiError::unprocessable("privacy_refused", e.to_string()),
            ExtractError::Config(_) => ApiError::unprocessable("backend_config", e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

/// Unwraps a JSON body and deserializes it, reporting syntax errors as 400
/// and shape errors as 422.
fn body<T: DeserializeOwned>(payload: Result<Json<Value>, JsonRejection>) -> Result<T, ApiError> {
    let Json(value) = payload.map_err(|r| ApiError::bad_request("bad_json", r.body_text()))?;
    serde_json::from_value(value).map_err(|e| {
        let field = e.to_string().split('`').nth(1).map(str::to_string);
        ApiError::unprocessable("bad_body", e.to_string())
            .with_detail(json!({ "fields": field.into_iter().collect::<Vec<_>>() }))
    })
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<TwinStore>,
    pub kb: Arc<Vec<KnowledgeEntry>>,
    pub config: Arc<Config>,
    pub jobs: Arc<JobRegistry>,
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("cannot open store: {0}")]
    Store(#[from] StoreError),
    #[error("cannot load knowledge base: {0}")]
    Kb(#[from] KbError),
}

impl AppState {
    pub fn open(config: Config) -> Result<Self, StartupError> {
        let store = TwinStore::open(&config.store.path)?;
        let kb = match &config.kb.path {
            Some(p) => load_kb(p)?,
            None => default_kb(),
        };
        Ok(AppState {
            store: Arc::new(store),
            kb: Arc::new(kb),
            config: Arc::new(config),
            jobs: Arc::new(JobRegistry::default()),
        })
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

pub fn router(state: AppState) -> Router {
    let v1 = Router::new()
        .route("/healthz", get(healthz))
        .route("/twins", get(list_twins).post(put_twin))
        .route("/twins/{id}", get(get_twin))
        .route("/twins/{id}/outcome", post(record_outcome))
        .route("/match", post(match_cohort))
        .route("/whatif", post(run_whatif))
        .route("/recommend", post(run_recommend))
        .route("/evaluate", post(run_evaluate))
        .route("/kb", get(knowledge_base))
        .route("/extract", post(start_extraction))
        .route("/jobs/{id}", get(get_job));
    Router::new()
        .nest("/v1", v1)
        .fallback(|| async { ApiError::not_found("no_route", "no such endpoint") })
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn healthz(State(s): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "twins": s.store.count() }))
}

#[derive(Debug, Deserialize)]
struct TwinQuery {
    #[serde(default)]
    query: String,
}

async fn list_twins(State(s): State<AppState>, Query(q): Query<TwinQuery>) -> Result<Json<Vec<DigitalTwin>>, ApiError> {
    Ok(Json(s.store.snapshot().query(&q.query)?))
}

async fn get_twin(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<DigitalTwin>, ApiError> {
    Ok(Json(s.store.get(&id)?))
}

async fn put_twin(
    State(s): State<AppState>,
    payload: Result<Json<Value>, JsonRejection>,
) -> Result<(StatusCode, Json<PutReceipt>), ApiError> {
    let twin: DigitalTwin = body(payload)?;
    let report = validate_twin(&twin);
    if !report.is_admissible() {
        return Err(ApiError::invalid_twin(&report));
    }
    let receipt = blocking(move || Ok(s.store.put(twin)?)).await?;
    Ok((StatusCode::CREATED, Json(receipt)))
}

async fn record_outcome(
    State(s): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<Value>, JsonRejection>,
) -> Result<Json<PutReceipt>, ApiError> {
    let value: Value = body(payload)?;
    let update = OutcomeUpdate::from_json(&value)?;
    Ok(Json(blocking(move || Ok(s.store.record_outcome(&id, &update)?)).await?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MatchRequest {
    spec: EligibilitySpec,
    /// Restricts the candidates; empty means the whole store.
    query: String,
}

async fn match_cohort(
    State(s): State<AppState>,
    payload: Result<Json<Value>, JsonRejection>,
) -> Result<Json<Vec<FunnelStage>>, ApiError> {
    let req: MatchRequest = body(payload)?;
    req.spec.validate()?;
    let candidates = s.store.snapshot().query(&req.query)?;
    Ok(Json(cohort_funnel(&candidates, &req.spec)))
}

/// The twin a request is about: an inline record, else a stored id.
fn subject(store: &TwinStore, id: Option<String>, twin: Option<DigitalTwin>) -> Result<DigitalTwin, ApiError> {
    match (id, twin) {
        (_, Some(t)) => Ok(t),
        (Some(id), None) => Ok(store.get(&id)?),
        (None, None) => Err(
            ApiError::unprocessable("missing_subject", "either `id` or `twin` is required")
                .with_detail(json!({ "fields": ["id", "twin"] })),
        ),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WhatIfRequest {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    twin: Option<DigitalTwin>,
    #[serde(default)]
    overrides: Option<Value>,
    #[serde(default)]
    spec: EligibilitySpec,
    /// Gate for the modified twin.
    #[serde(default)]
    index_spec: EligibilitySpec,
    #[serde(default)]
    query: String,
}

fn overrides(value: Option<Value>) -> Result<WhatIfOverrides, ApiError> {
    Ok(value
        .map(|v| WhatIfOverrides::from_json(&v))
        .transpose()?
        .unwrap_or_default())
}

async fn run_whatif(
    State(s): State<AppState>,
    payload: Result<Json<Value>, JsonRejection>,
) -> Result<Json<WhatIfResult>, ApiError> {
    let req: WhatIfRequest = body(payload)?;
    req.spec.validate()?;
    req.index_spec.validate()?;
    let ov = overrides(req.overrides)?;
    let twin = subject(&s.store, req.id, req.twin)?;
    let candidates = s.store.snapshot().query(&req.query)?;
    Ok(Json(whatif(&twin, &ov, &req.spec, &req.index_spec, &candidates)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecommendRequest {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    twin: Option<DigitalTwin>,
    #[serde(default)]
    overrides: Option<Value>,
    #[serde(default)]
    context: RecommendContext,
}

async fn run_recommend(
    State(s): State<AppState>,
    payload: Result<Json<Value>, JsonRejection>,
) -> Result<Json<Vec<Recommendation>>, ApiError> {
    let req: RecommendRequest = body(payload)?;
    let ov = overrides(req.overrides)?;
    let twin = ov.apply(&subject(&s.store, req.id, req.twin)?);
    Ok(Json(recommend(&twin, &s.kb, &req.context)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateRequest {
    adjudications: Vec<AdjudicationRecord>,
    /// A published table to check against its own counts.
    #[serde(default)]
    reported: Vec<ReportedRow>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub table: MetricsTable,
    /// Records whose stored verdict disagrees with the scoring rule, by
    /// position, with the rescored verdict.
    pub mismatches: Vec<(usize, Verdict)>,
    pub lint: Vec<LintIssue>,
}

async fn run_evaluate(payload: Result<Json<Value>, JsonRejection>) -> Result<Json<EvaluationReport>, ApiError> {
    let req: EvaluateRequest = body(payload)?;
    Ok(Json(EvaluationReport {
        table: evaluate_run(&req.adjudications)?,
        mismatches: check_verdicts(&req.adjudications),
        lint: lint_reported_table(&req.reported),
    }))
}

async fn knowledge_base(State(s): State<AppState>) -> Json<Vec<KnowledgeEntry>> {
    Json(s.kb.as_ref().clone())
}

async fn start_extraction(
    State(s): State<AppState>,
    payload: Result<Json<Value>, JsonRejection>,
) -> Result<(StatusCode, Json<JobView>), ApiError> {
    let req: ExtractRequest = body(payload)?;
    preflight(&s.config, &req)?;
    s.config.backend_spec(req.backend).map_err(ExtractError::from)?;
    let view = s.jobs.start(req.clone());
    let id = view.id.clone();
    tokio::task::spawn_blocking(move || {
        let status = match execute_extraction(&s.config, &req) {
            Ok(out) => {
                let twins: Vec<DigitalTwin> = out.twins().cloned().collect();
                match s.store.put_all(twins) {
                    Ok(receipts) => JobStatus::Succeeded {
                        report: out.report,
                        stored: receipts.into_iter().map(|r| r.id).collect(),
                    },
                    Err(e) => JobStatus::Failed { error: e.to_string() },
                }
            }
            Err(e) => JobStatus::Failed { error: e.to_string() },
        };
        s.jobs.finish(&id, status);
    });
    Ok((StatusCode::ACCEPTED, Json(view)))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<JobView>, ApiError> {
    s.jobs
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found("job_not_found", format!("job `{id}` not found")))
}
