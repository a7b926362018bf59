//! HTTP API over the expense pipeline.
//!
//! All routes live under `/api/v1` and speak JSON. The pipeline is a
//! single writer: every request takes the pipeline lock on a blocking
//! thread, so reads see a consistent snapshot and concurrent decisions on
//! the same task resolve to one success and one `already_decided`.

mod error;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use expenseflow::classifier::ItemVerdict;
use expenseflow::evaluation::{evaluate, read_labels, Evaluation};
use expenseflow::hitl::{FeedbackRecord, ItemResolution, TaskFilter};
use expenseflow::pipeline::{Event, ExpenseSubmission, FinalDecision, Ledger, Report};
use expenseflow::policy::{ListKind, PolicyEntry, Provenance, ProvenanceSource};
use expenseflow::receipt::ExtractionResult;
use expenseflow::{
    AdvisorRecommendation, Config, Pipeline, PolicyStore, ReceiptDocument, ReviewAction, ReviewDecision, ReviewTask,
    Stage, TaskId, TaskState, Verdict,
};

pub use error::{status_for, ApiError};

pub const DEFAULT_TASK_LIMIT: usize = 100;
pub const MANUAL_REVIEWER: &str = "manual";

#[derive(Clone)]
pub struct AppState {
    pipeline: Arc<Mutex<Pipeline>>,
    labels_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(pipeline: Pipeline, labels_dir: Option<PathBuf>) -> Self {
        Self {
            pipeline: Arc::new(Mutex::new(pipeline)),
            labels_dir,
        }
    }

    /// Runs `f` against the pipeline on a blocking thread.
    async fn with<R, F>(&self, f: F) -> Result<R, ApiError>
    where
        R: Send + 'static,
        F: FnOnce(&mut Pipeline) -> Result<R, ApiError> + Send + 'static,
    {
        let pipeline = Arc::clone(&self.pipeline);
        tokio::task::spawn_blocking(move || {
            let mut guard = pipeline.lock().map_err(|_| ApiError::internal())?;
            f(&mut guard)
        })
        .await
        .map_err(|_| ApiError::internal())?
    }
}

pub fn router(state: AppState, ui_origin: Option<&str>) -> Router {
    let api = Router::new()
        .route("/submissions", post(submit))
        .route("/reports/{id}", get(report))
        .route("/reports/{id}/advance", post(advance))
        .route("/tasks", get(list_tasks))
        .route("/tasks/{id}", get(task_detail))
        .route("/tasks/{id}/decision", post(decide))
        .route("/policy", get(policy))
        .route("/policy/entries", post(add_policy_entry))
        .route("/metrics", get(metrics));
    let mut app = Router::new().nest("/api/v1", api).with_state(state);
    if let Some(origin) = ui_origin.and_then(|o| o.parse::<HeaderValue>().ok()) {
        app = app.layer(
            CorsLayer::new()
                .allow_origin(origin)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE]),
        );
    }
    app
}

/// Opens the pipeline described by `config` and serves until the process
/// is stopped.
pub async fn serve(config: Config) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let pipeline = Pipeline::open(&config)?;
    let app = router(AppState::new(pipeline, config.labels_dir.clone()), config.ui_origin.as_deref());
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app).await?;
    Ok(())
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::invalid_request(e.body_text()))
}

fn parse_task_id(raw: &str) -> Result<TaskId, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "task_not_found", format!("task {raw:?} not found")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmissionRequest {
    pub report_id: String,
    pub user: String,
    pub account_code: String,
    #[serde(default)]
    pub description: String,
    pub declared_total: i64,
    pub receipt_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateResponse {
    pub report_id: String,
    pub state: Stage,
}

async fn submit(
    State(state): State<AppState>,
    payload: Result<Json<SubmissionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<StateResponse>), ApiError> {
    let req = body(payload)?;
    let response = state
        .with(move |p| {
            let report_id = req.report_id.clone();
            p.submit(ExpenseSubmission {
                receipt: ReceiptDocument::new(req.report_id.clone(), req.receipt_text),
                report_id: req.report_id,
                user: req.user,
                account_code: req.account_code,
                description: req.description,
                declared_total: req.declared_total,
            })?;
            let state = p.run_to_completion(&report_id)?;
            Ok(StateResponse { report_id, state })
        })
        .await?;
    Ok((StatusCode::CREATED, Json(response)))
}

async fn advance(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<StateResponse>, ApiError> {
    let response = state
        .with(move |p| {
            let state = p.advance(&id)?;
            Ok(StateResponse { report_id: id, state })
        })
        .await?;
    Ok(Json(response))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportResponse {
    pub report: Report,
    pub audit: Vec<Event>,
    /// Stage obtained by replaying `audit` alone.
    pub replayed_state: Stage,
}

async fn report(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<ReportResponse>, ApiError> {
    let response = state
        .with(move |p| {
            let report = p
                .report(&id)
                .cloned()
                .ok_or_else(|| expenseflow::PipelineError::ReportNotFound(id.clone()))?;
            let audit: Vec<Event> = p.events_for(&id).cloned().collect();
            let replayed = Ledger::replay(&audit)?;
            let replayed_state = replayed.reports.get(&id).map(|r| r.stage).ok_or_else(ApiError::internal)?;
            Ok(ReportResponse {
                report,
                audit,
                replayed_state,
            })
        })
        .await?;
    Ok(Json(response))
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct TaskQuery {
    pub state: Option<String>,
    pub report_id: Option<String>,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: TaskId,
    pub report_id: String,
    pub created_at: DateTime<Utc>,
    pub state: TaskState,
    pub item_count: usize,
    pub item_names: Vec<String>,
}

impl From<&ReviewTask> for TaskSummary {
    fn from(t: &ReviewTask) -> Self {
        Self {
            task_id: t.task_id,
            report_id: t.report_id.clone(),
            created_at: t.created_at,
            state: t.state,
            item_count: t.items.len(),
            item_names: t.items.iter().map(|i| i.item.name.clone()).collect(),
        }
    }
}

async fn list_tasks(
    State(state): State<AppState>,
    query: Result<Query<TaskQuery>, QueryRejection>,
) -> Result<Json<Vec<TaskSummary>>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::invalid_request(e.body_text()))?;
    let task_state = match q.state.as_deref().map(str::to_ascii_lowercase).as_deref() {
        None | Some("") | Some("all") => None,
        Some("pending") => Some(TaskState::Pending),
        Some("decided") => Some(TaskState::Decided),
        Some(other) => return Err(ApiError::invalid_request(format!("unknown task state {other:?}"))),
    };
    let filter = TaskFilter {
        state: task_state,
        report_id: q.report_id,
    };
    let limit = q.limit.unwrap_or(DEFAULT_TASK_LIMIT);
    let tasks = state
        .with(move |p| Ok(p.list_tasks(&filter).into_iter().take(limit).map(TaskSummary::from).collect()))
        .await?;
    Ok(Json(tasks))
}

/// Everything the reviewer screen shows for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskDetail {
    pub task: ReviewTask,
    pub report_id: String,
    pub report_state: Stage,
    pub user: String,
    pub account_code: String,
    pub account_name: Option<String>,
    pub allowed_categories: BTreeSet<String>,
    pub description: String,
    pub declared_total: i64,
    pub extraction: Option<ExtractionResult>,
    pub verdicts: Vec<ItemVerdict>,
    pub recommendations: Vec<AdvisorRecommendation>,
}

async fn task_detail(State(state): State<AppState>, UrlPath(raw): UrlPath<String>) -> Result<Json<TaskDetail>, ApiError> {
    let id = parse_task_id(&raw)?;
    let detail = state
        .with(move |p| {
            let task = p.task(id).cloned().ok_or(expenseflow::ReviewError::TaskNotFound(id)).map_err(
                |e| ApiError::from(expenseflow::PipelineError::from(e)),
            )?;
            let report = p.report(&task.report_id).ok_or_else(ApiError::internal)?;
            let account = p.store().account_policy(&report.submission.account_code);
            Ok(TaskDetail {
                report_id: task.report_id.clone(),
                report_state: report.stage,
                user: report.submission.user.clone(),
                account_code: report.submission.account_code.clone(),
                account_name: account.map(|a| a.name.clone()),
                allowed_categories: account.map(|a| a.allowed_categories.clone()).unwrap_or_default(),
                description: report.submission.description.clone(),
                declared_total: report.submission.declared_total,
                extraction: report.extraction.clone(),
                verdicts: report.outcome.as_ref().map(|o| o.verdicts.clone()).unwrap_or_default(),
                recommendations: task.items.iter().map(|i| i.recommendation.clone()).collect(),
                task,
            })
        })
        .await?;
    Ok(Json(detail))
}

/// Decision body; `decided_at` defaults to the time the request arrives.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub action: ReviewAction,
    #[serde(default)]
    pub item_resolutions: Vec<ItemResolution>,
    pub reviewer: String,
    #[serde(default)]
    pub comment: Option<String>,
    #[serde(default)]
    pub decided_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub task_id: TaskId,
    pub report_id: String,
    pub final_state: Stage,
    pub verdict: Option<Verdict>,
    pub decision: Option<FinalDecision>,
    pub feedback: FeedbackRecord,
}

async fn decide(
    State(state): State<AppState>,
    UrlPath(raw): UrlPath<String>,
    payload: Result<Json<DecisionRequest>, JsonRejection>,
) -> Result<Json<DecisionResponse>, ApiError> {
    let id = parse_task_id(&raw)?;
    let req = body(payload)?;
    let decision = ReviewDecision {
        action: req.action,
        item_resolutions: req.item_resolutions,
        reviewer: req.reviewer,
        comment: req.comment,
        decided_at: req.decided_at.unwrap_or_else(Utc::now),
    };
    let response = state
        .with(move |p| {
            let out = p.submit_decision(id, decision)?;
            Ok(DecisionResponse {
                task_id: id,
                report_id: out.report_id,
                final_state: out.final_state,
                verdict: out.decision.as_ref().map(|d| d.verdict),
                decision: out.decision,
                feedback: out.feedback,
            })
        })
        .await?;
    Ok(Json(response))
}

async fn policy(State(state): State<AppState>) -> Result<Json<PolicyStore>, ApiError> {
    Ok(Json(state.with(|p| Ok(p.store().clone())).await?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyEntryRequest {
    pub name: String,
    #[serde(default = "default_list")]
    pub list: ListKind,
    #[serde(default)]
    pub category: Option<String>,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub reason: Option<String>,
}

fn default_list() -> ListKind {
    ListKind::Whitelist
}

async fn add_policy_entry(
    State(state): State<AppState>,
    payload: Result<Json<PolicyEntryRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<PolicyEntry>), ApiError> {
    let req = body(payload)?;
    let entry = PolicyEntry::new(
        req.name,
        req.category,
        req.list,
        req.synonyms,
        Provenance {
            source: ProvenanceSource::Seed,
            reviewer: Some(MANUAL_REVIEWER.into()),
            timestamp: Utc::now(),
        },
        req.reason,
    )?;
    let written = state.with(move |p| Ok(p.upsert_policy_entry(entry)?)).await?;
    Ok((StatusCode::CREATED, Json(written)))
}

#[derive(Debug, Clone, Deserialize)]
pub struct MetricsQuery {
    pub labels: String,
}

/// Resolves `requested` inside `dir`, refusing anything that escapes it.
fn labels_path(dir: Option<&Path>, requested: &str) -> Result<PathBuf, ApiError> {
    let dir = dir.ok_or_else(|| {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "no labels directory is configured")
    })?;
    let root = dir
        .canonicalize()
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_labels", e.to_string()))?;
    let candidate = root.join(requested);
    let resolved = candidate.canonicalize().map_err(|e| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_labels", format!("{requested}: {e}"))
    })?;
    if !resolved.starts_with(&root) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_request",
            format!("{requested} is outside the labels directory"),
        ));
    }
    Ok(resolved)
}

async fn metrics(
    State(state): State<AppState>,
    query: Result<Query<MetricsQuery>, QueryRejection>,
) -> Result<Json<Evaluation>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::invalid_request(e.body_text()))?;
    let path = labels_path(state.labels_dir.as_deref(), &q.labels)?;
    let evaluation = state
        .with(move |p| {
            let labels = read_labels(&path)?;
            Ok(evaluate(&labels, p.exports())?)
        })
        .await?;
    Ok(Json(evaluation))
}
