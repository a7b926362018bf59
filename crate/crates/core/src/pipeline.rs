//! End-to-end expense processing as an event-sourced state machine.
//!
//! ```text
//! Received ─► Extracted ─┬─► Defective ─────────────► Rejected ─┐
//!                        └─► Classified ─┬─► AutoApproved ──────┤
//!                                        ├─► AutoRejected ──────┼─► Exported
//!                                        └─► PendingReview ─┬─► Approved
//!                                                           └─► Rejected
//! ```
//!
//! Every transition is one [`Event`] appended to the event log before the
//! in-memory state changes, so replaying the log reproduces the state of
//! every report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::advisor::{Advisor, AdvisorQuery, AdvisorRecommendation, Compliance, ExternalAdvisor, StubAdvisor, Thresholds};
use crate::classifier::{classify_report, ClassificationOutcome, ClassifierOptions, ClassifyError, ItemStatus};
use crate::config::{AdvisorConfig, Config};
use crate::hitl::{
    EscalatedItem, FeedbackRecord, ReviewAction, ReviewDecision, ReviewError, ReviewQueue, ReviewTask, TaskFilter, TaskId,
    TaskState,
};
use crate::journal::{Journal, JournalError};
use crate::policy::{load_store, normalize_name, save_store, ListKind, PolicyEntry, PolicyError, PolicyStore};
use crate::receipt::{gate_confidence, parse_receipt, ConfidenceVerdict, ExtractionResult, FieldName, ReceiptDocument, ReceiptError};

pub const REASON_DEFECTIVE: &str = "defective receipt";
pub const REVIEWER_RECIPIENT: &str = "finance-reviewers";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("report {0:?} already submitted")]
    DuplicateReport(String),
    #[error("report {0:?} not found")]
    ReportNotFound(String),
    #[error("report {0:?} is already exported")]
    TerminalState(String),
    #[error("report {0:?} is waiting for a review decision")]
    AwaitingReview(String),
    #[error("invalid submission: {0}")]
    InvalidSubmission(String),
    #[error("unknown account {0:?}")]
    UnknownAccount(String),
    #[error(transparent)]
    Receipt(#[from] ReceiptError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("event log inconsistent: {0}")]
    CorruptLog(String),
}

impl From<ClassifyError> for PipelineError {
    fn from(e: ClassifyError) -> Self {
        match e {
            ClassifyError::UnknownAccount(code) => PipelineError::UnknownAccount(code),
        }
    }
}

impl PipelineError {
    /// Machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::DuplicateReport(_) => "duplicate_report",
            PipelineError::ReportNotFound(_) => "report_not_found",
            PipelineError::TerminalState(_) => "terminal_state",
            PipelineError::AwaitingReview(_) => "awaiting_review",
            PipelineError::InvalidSubmission(_) => "invalid_submission",
            PipelineError::UnknownAccount(_) => "unknown_account",
            PipelineError::Receipt(ReceiptError::MalformedReceipt { .. }) => "malformed_receipt",
            PipelineError::Receipt(ReceiptError::InvalidNumber { .. }) => "invalid_number",
            PipelineError::Receipt(ReceiptError::InvalidDate { .. }) => "invalid_date",
            PipelineError::Review(e) => match e {
                ReviewError::EmptyEscalation => "empty_escalation",
                ReviewError::DuplicateTaskForReport(_) => "duplicate_task_for_report",
                ReviewError::TaskNotFound(_) => "task_not_found",
                ReviewError::AlreadyDecided(_) => "already_decided",
                ReviewError::InvalidDecision(_) => "invalid_decision",
                ReviewError::Policy(p) => policy_code(p),
            },
            PipelineError::Policy(p) => policy_code(p),
            PipelineError::Journal(JournalError::Io { .. }) | PipelineError::IoFailure { .. } => "io_failure",
            PipelineError::Journal(JournalError::Corrupt { .. }) | PipelineError::CorruptLog(_) => "corrupt_log",
        }
    }
}

fn policy_code(e: &PolicyError) -> &'static str {
    match e {
        PolicyError::ConflictingCategory { .. } => "conflicting_category",
        PolicyError::InvalidEntry(_) => "invalid_entry",
        PolicyError::InvalidAccount(_) => "invalid_account",
        PolicyError::StoreCorrupt(_) => "store_corrupt",
        PolicyError::IoFailure { .. } => "io_failure",
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock that advances one second per reading.
#[derive(Debug)]
pub struct SteppingClock {
    next: AtomicI64,
}

impl SteppingClock {
    pub fn starting_at(start: DateTime<Utc>) -> Self {
        Self {
            next: AtomicI64::new(start.timestamp()),
        }
    }
}

impl Default for SteppingClock {
    fn default() -> Self {
        Self::starting_at(Utc.with_ymd_and_hms(2025, 3, 25, 9, 0, 0).unwrap())
    }
}

impl Clock for SteppingClock {
    fn now(&self) -> DateTime<Utc> {
        let secs = self.next.fetch_add(1, Ordering::SeqCst);
        Utc.timestamp_opt(secs, 0).single().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpenseSubmission {
    pub report_id: String,
    pub user: String,
    pub account_code: String,
    pub description: String,
    pub declared_total: i64,
    pub receipt: ReceiptDocument,
}

/// Submission as written by scripts: the receipt is either inline text or a
/// path to a `.rcpt` file relative to the submission file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmissionFile {
    pub report_id: String,
    pub user: String,
    pub account_code: String,
    #[serde(default)]
    pub description: String,
    pub declared_total: i64,
    #[serde(default)]
    pub receipt_text: Option<String>,
    #[serde(default)]
    pub receipt_path: Option<PathBuf>,
}

impl SubmissionFile {
    pub fn resolve(self, base_dir: &Path) -> Result<ExpenseSubmission> {
        let (source_id, raw_text) = match (self.receipt_text, self.receipt_path) {
            (Some(text), None) => (self.report_id.clone(), text),
            (None, Some(rel)) => {
                let path = if rel.is_absolute() { rel } else { base_dir.join(rel) };
                let text = std::fs::read_to_string(&path).map_err(|source| PipelineError::IoFailure {
                    path: path.display().to_string(),
                    source,
                })?;
                (path.display().to_string(), text)
            }
            _ => {
                return Err(PipelineError::InvalidSubmission(
                    "exactly one of receipt_text or receipt_path is required".into(),
                ))
            }
        };
        Ok(ExpenseSubmission {
            report_id: self.report_id,
            user: self.user,
            account_code: self.account_code,
            description: self.description,
            declared_total: self.declared_total,
            receipt: ReceiptDocument { source_id, raw_text },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Received,
    Extracted,
    Defective,
    Classified,
    PendingReview,
    AutoApproved,
    AutoRejected,
    Approved,
    Rejected,
    Exported,
}

impl Stage {
    pub fn is_decided(self) -> bool {
        matches!(
            self,
            Stage::AutoApproved | Stage::AutoRejected | Stage::Approved | Stage::Rejected
        )
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Approve,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectionClass {
    Defective,
    Policy,
    Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecidedBy {
    System,
    Reviewer(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemResult {
    pub name: String,
    pub category: Option<String>,
    pub result: ItemStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalDecision {
    pub report_id: String,
    pub verdict: Verdict,
    pub reasons: Vec<String>,
    pub reason_class: Option<RejectionClass>,
    pub decided_by: DecidedBy,
    pub item_results: Vec<ItemResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub seq: u64,
    pub exported_at: DateTime<Utc>,
    pub decision: FinalDecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NotificationKind {
    DefectiveReceipt,
    ReviewRequested,
    Finalized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub recipient: String,
    pub kind: NotificationKind,
    #[serde(default)]
    pub report_id: Option<String>,
    pub payload: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload")]
pub enum EventKind {
    Submitted {
        submission: ExpenseSubmission,
    },
    Extracted {
        extraction: ExtractionResult,
    },
    GateFailed {
        gate: ConfidenceVerdict,
    },
    Classified {
        gate: ConfidenceVerdict,
        outcome: ClassificationOutcome,
        amount_matches: bool,
    },
    ReviewRequested {
        task: ReviewTask,
    },
    TaskDecided {
        task: ReviewTask,
        entries: Vec<PolicyEntry>,
    },
    Finalized {
        stage: Stage,
        decision: FinalDecision,
    },
    Exported {
        record: ExportRecord,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub report_id: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Everything known about one report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub submission: ExpenseSubmission,
    pub stage: Stage,
    pub extraction: Option<ExtractionResult>,
    pub gate: Option<ConfidenceVerdict>,
    pub outcome: Option<ClassificationOutcome>,
    pub amount_matches: Option<bool>,
    pub task_id: Option<TaskId>,
    pub decision: Option<FinalDecision>,
    pub export: Option<ExportRecord>,
}

impl Report {
    fn new(submission: ExpenseSubmission) -> Self {
        Self {
            submission,
            stage: Stage::Received,
            extraction: None,
            gate: None,
            outcome: None,
            amount_matches: None,
            task_id: None,
            decision: None,
            export: None,
        }
    }

    pub fn report_id(&self) -> &str {
        &self.submission.report_id
    }
}

enum Change {
    Report(Box<Report>),
    ReportAndTask(Box<Report>, ReviewTask),
    Task(ReviewTask),
}

/// Report states and the review queue, rebuilt by folding events.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ledger {
    pub reports: BTreeMap<String, Report>,
    pub queue: ReviewQueue,
}

impl Ledger {
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<Self> {
        let mut ledger = Ledger::default();
        for event in events {
            ledger.apply(event)?;
        }
        Ok(ledger)
    }

    pub fn apply(&mut self, event: &Event) -> Result<()> {
        let change = self.transition(event)?;
        self.commit(change);
        Ok(())
    }

    fn commit(&mut self, change: Change) {
        match change {
            Change::Report(r) => {
                self.reports.insert(r.report_id().to_string(), *r);
            }
            Change::ReportAndTask(r, t) => {
                self.reports.insert(r.report_id().to_string(), *r);
                self.queue.commit(t);
            }
            Change::Task(t) => self.queue.commit(t),
        }
    }

    /// Computes the effect of `event` without touching the ledger.
    fn transition(&self, event: &Event) -> Result<Change> {
        let id = event.report_id.as_str();
        let bad = |what: &str| PipelineError::CorruptLog(format!("event {} for {id:?}: {what}", event.seq));

        if let EventKind::Submitted { submission } = &event.kind {
            if self.reports.contains_key(id) || submission.report_id != id {
                return Err(bad("duplicate or mismatched submission"));
            }
            return Ok(Change::Report(Box::new(Report::new(submission.clone()))));
        }

        let current = self.reports.get(id).ok_or_else(|| bad("unknown report"))?;
        let mut next = current.clone();
        let expect = |stages: &[Stage]| -> Result<()> {
            if stages.contains(&current.stage) {
                Ok(())
            } else {
                Err(bad(&format!("not allowed from {}", current.stage)))
            }
        };
        match &event.kind {
            EventKind::Submitted { .. } => unreachable!("handled above"),
            EventKind::Extracted { extraction } => {
                expect(&[Stage::Received])?;
                next.extraction = Some(extraction.clone());
                next.stage = Stage::Extracted;
            }
            EventKind::GateFailed { gate } => {
                expect(&[Stage::Extracted])?;
                next.gate = Some(gate.clone());
                next.stage = Stage::Defective;
            }
            EventKind::Classified {
                gate,
                outcome,
                amount_matches,
            } => {
                expect(&[Stage::Extracted])?;
                next.gate = Some(gate.clone());
                next.outcome = Some(outcome.clone());
                next.amount_matches = Some(*amount_matches);
                next.stage = Stage::Classified;
            }
            EventKind::ReviewRequested { task } => {
                expect(&[Stage::Classified])?;
                if task.report_id != id || self.queue.get(task.task_id).is_some() {
                    return Err(bad("review task id reused or mismatched"));
                }
                next.task_id = Some(task.task_id);
                next.stage = Stage::PendingReview;
                return Ok(Change::ReportAndTask(Box::new(next), task.clone()));
            }
            EventKind::TaskDecided { task, .. } => {
                expect(&[Stage::PendingReview])?;
                let pending = self.queue.get(task.task_id).ok_or_else(|| bad("decision for unknown task"))?;
                if pending.state != TaskState::Pending || task.state != TaskState::Decided {
                    return Err(bad("task decided twice"));
                }
                return Ok(Change::Task(task.clone()));
            }
            EventKind::Finalized { stage, decision } => {
                let allowed: &[Stage] = match stage {
                    Stage::AutoApproved | Stage::AutoRejected => &[Stage::Classified],
                    Stage::Approved => &[Stage::PendingReview],
                    Stage::Rejected => &[Stage::PendingReview, Stage::Defective],
                    _ => return Err(bad("finalized into a non-decision stage")),
                };
                expect(allowed)?;
                next.decision = Some(decision.clone());
                next.stage = *stage;
            }
            EventKind::Exported { record } => {
                if !current.stage.is_decided() {
                    return Err(bad(&format!("export from {}", current.stage)));
                }
                next.export = Some(record.clone());
                next.stage = Stage::Exported;
            }
        }
        Ok(Change::Report(Box::new(next)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub confidence_threshold: u8,
    pub mandatory_fields: BTreeSet<FieldName>,
    pub classifier: ClassifierOptions,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            confidence_threshold: 50,
            mandatory_fields: FieldName::default_mandatory(),
            classifier: ClassifierOptions::default(),
        }
    }
}

/// Result of a reviewer decision once the report has been finalized.
#[derive(Debug, Clone, Serialize)]
pub struct DecisionReceipt {
    pub task: ReviewTask,
    pub feedback: FeedbackRecord,
    pub report_id: String,
    pub final_state: Stage,
    pub decision: Option<FinalDecision>,
}

pub struct Pipeline {
    settings: PipelineSettings,
    store: PolicyStore,
    store_path: Option<PathBuf>,
    ledger: Ledger,
    events: Journal<Event>,
    exports: Journal<ExportRecord>,
    notifications: Journal<Notification>,
    advisor: Box<dyn Advisor>,
    clock: Box<dyn Clock>,
    webhook_url: Option<String>,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("settings", &self.settings)
            .field("store_version", &self.store.version())
            .field("reports", &self.ledger.reports.len())
            .field("events", &self.events.len())
            .field("advisor", &self.advisor.name())
            .finish()
    }
}

impl Pipeline {
    /// Pipeline with no files behind it.
    pub fn in_memory(store: PolicyStore, settings: PipelineSettings, advisor: Box<dyn Advisor>) -> Self {
        Self {
            settings,
            store,
            store_path: None,
            ledger: Ledger::default(),
            events: Journal::in_memory(),
            exports: Journal::in_memory(),
            notifications: Journal::in_memory(),
            advisor,
            clock: Box::new(SystemClock),
            webhook_url: None,
        }
    }

    /// Opens the file-backed pipeline described by `config`, seeding the
    /// store on first use and recovering from any interrupted transition.
    pub fn open(config: &Config) -> Result<Self> {
        let store = if config.store_path.exists() {
            load_store(&config.store_path)?
        } else {
            let seed = PolicyStore::seed();
            save_store(&seed, &config.store_path)?;
            info!(path = %config.store_path.display(), "initialized policy store from seed");
            seed
        };
        let events: Journal<Event> = Journal::open(&config.event_log_path)?;
        let ledger = Ledger::replay(events.records())?;
        let mut pipeline = Self {
            settings: config.pipeline_settings(),
            store,
            store_path: Some(config.store_path.clone()),
            ledger,
            events,
            exports: Journal::open(&config.export_sink_path)?,
            notifications: Journal::open(&config.notification_log_path)?,
            advisor: advisor_from_config(config)?,
            clock: Box::new(SystemClock),
            webhook_url: config.webhook_url.clone(),
        };
        pipeline.recover()?;
        Ok(pipeline)
    }

    pub fn with_clock(mut self, clock: Box<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn settings(&self) -> &PipelineSettings {
        &self.settings
    }

    pub fn store(&self) -> &PolicyStore {
        &self.store
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn report(&self, report_id: &str) -> Option<&Report> {
        self.ledger.reports.get(report_id)
    }

    pub fn reports(&self) -> impl Iterator<Item = &Report> {
        self.ledger.reports.values()
    }

    pub fn task(&self, id: TaskId) -> Option<&ReviewTask> {
        self.ledger.queue.get(id)
    }

    pub fn list_tasks(&self, filter: &TaskFilter) -> Vec<&ReviewTask> {
        self.ledger.queue.list_tasks(filter)
    }

    pub fn events(&self) -> &[Event] {
        self.events.records()
    }

    pub fn events_for<'a>(&'a self, report_id: &'a str) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.records().iter().filter(move |e| e.report_id == report_id)
    }

    pub fn exports(&self) -> &[ExportRecord] {
        self.exports.records()
    }

    pub fn notifications(&self) -> &[Notification] {
        self.notifications.records()
    }

    pub fn advisor_name(&self) -> &str {
        self.advisor.name()
    }

    fn record(&mut self, report_id: &str, kind: EventKind) -> Result<()> {
        let event = Event {
            seq: self.events.records().last().map_or(1, |e| e.seq + 1),
            at: self.clock.now(),
            report_id: report_id.to_string(),
            kind,
        };
        let change = self.ledger.transition(&event)?;
        self.events.append(event)?;
        self.ledger.commit(change);
        Ok(())
    }

    fn persist_store(&self) -> Result<()> {
        if let Some(path) = &self.store_path {
            save_store(&self.store, path)?;
        }
        Ok(())
    }

    /// Fire-and-forget POST of `body` to the configured webhook.
    fn mirror(&self, kind: &str, body: &impl Serialize) {
        let Some(url) = self.webhook_url.clone() else { return };
        let body = serde_json::json!({ "type": kind, "body": body });
        std::thread::spawn(move || {
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(5)))
                .build()
                .into();
            if let Err(e) = agent.post(&url).send_json(&body) {
                warn!(%url, error = %e, "webhook delivery failed");
            }
        });
    }

    fn notify(&mut self, recipient: &str, kind: NotificationKind, report_id: &str, payload: String) {
        let note = Notification {
            recipient: recipient.to_string(),
            kind,
            report_id: Some(report_id.to_string()),
            payload,
            at: self.clock.now(),
        };
        self.mirror("notification", &note);
        if let Err(e) = self.notifications.append(note) {
            warn!(error = %e, "could not append notification");
        }
    }

    /// Registers a submission in state `Received`. The receipt must parse and
    /// the account must exist; nothing is recorded otherwise.
    pub fn submit(&mut self, submission: ExpenseSubmission) -> Result<Stage> {
        let mut submission = submission;
        if submission.report_id.trim().is_empty() {
            return Err(PipelineError::InvalidSubmission("report_id is empty".into()));
        }
        if self.ledger.reports.contains_key(&submission.report_id) {
            return Err(PipelineError::DuplicateReport(submission.report_id));
        }
        if submission.declared_total < 0 {
            return Err(PipelineError::InvalidSubmission("declared_total is negative".into()));
        }
        if submission.receipt.source_id.trim().is_empty() {
            submission.receipt.source_id = submission.report_id.clone();
        }
        if self.store.account_policy(&submission.account_code).is_none() {
            return Err(PipelineError::UnknownAccount(submission.account_code));
        }
        parse_receipt(&submission.receipt)?;
        let id = submission.report_id.clone();
        self.record(&id, EventKind::Submitted { submission })?;
        Ok(Stage::Received)
    }

    /// Performs exactly one transition for the report.
    pub fn advance(&mut self, report_id: &str) -> Result<Stage> {
        let report = self
            .ledger
            .reports
            .get(report_id)
            .ok_or_else(|| PipelineError::ReportNotFound(report_id.to_string()))?
            .clone();
        match report.stage {
            Stage::Received => {
                let extraction = parse_receipt(&report.submission.receipt)?;
                self.record(report_id, EventKind::Extracted { extraction })?;
            }
            Stage::Extracted => self.gate_and_classify(&report)?,
            Stage::Defective => {
                let gate = report.gate.clone().unwrap_or_else(|| ConfidenceVerdict {
                    status: crate::receipt::GateStatus::Defective,
                    defective_fields: Vec::new(),
                });
                let decision = FinalDecision {
                    report_id: report_id.to_string(),
                    verdict: Verdict::Reject,
                    reasons: vec![REASON_DEFECTIVE.to_string()],
                    reason_class: Some(RejectionClass::Defective),
                    decided_by: DecidedBy::System,
                    item_results: pending_items(&report),
                };
                debug_assert!(gate.is_defective());
                self.record(
                    report_id,
                    EventKind::Finalized {
                        stage: Stage::Rejected,
                        decision,
                    },
                )?;
            }
            Stage::Classified => self.decide_or_escalate(&report)?,
            Stage::PendingReview => {
                let task_id = report.task_id.ok_or_else(|| {
                    PipelineError::CorruptLog(format!("{report_id} pending without a task"))
                })?;
                let task = self
                    .ledger
                    .queue
                    .get(task_id)
                    .cloned()
                    .ok_or_else(|| PipelineError::CorruptLog(format!("task {task_id} missing")))?;
                if task.state == TaskState::Pending {
                    return Err(PipelineError::AwaitingReview(report_id.to_string()));
                }
                self.finalize_review(&report, &task)?;
            }
            Stage::AutoApproved | Stage::AutoRejected | Stage::Approved | Stage::Rejected => {
                self.export(&report)?;
            }
            Stage::Exported => return Err(PipelineError::TerminalState(report_id.to_string())),
        }
        Ok(self.ledger.reports[report_id].stage)
    }

    /// Advances until the report is exported or parked for review.
    pub fn run_to_completion(&mut self, report_id: &str) -> Result<Stage> {
        loop {
            let stage = self
                .report(report_id)
                .ok_or_else(|| PipelineError::ReportNotFound(report_id.to_string()))?
                .stage;
            if stage == Stage::Exported {
                return Ok(stage);
            }
            if stage == Stage::PendingReview {
                let decided = self
                    .report(report_id)
                    .and_then(|r| r.task_id)
                    .and_then(|t| self.task(t))
                    .is_some_and(|t| t.state == TaskState::Decided);
                if !decided {
                    return Ok(stage);
                }
            }
            self.advance(report_id)?;
        }
    }

    fn gate_and_classify(&mut self, report: &Report) -> Result<()> {
        let id = report.report_id().to_string();
        let extraction = report
            .extraction
            .as_ref()
            .ok_or_else(|| PipelineError::CorruptLog(format!("{id} extracted without extraction")))?;
        let gate = gate_confidence(extraction, &self.settings.mandatory_fields, self.settings.confidence_threshold);
        if gate.is_defective() {
            let fields: Vec<&str> = gate.defective_fields.iter().map(|f| f.as_str()).collect();
            let payload = format!(
                "receipt for report {id} is defective: {} below confidence {} or missing",
                fields.join(", "),
                self.settings.confidence_threshold
            );
            self.record(&id, EventKind::GateFailed { gate })?;
            self.notify(&report.submission.user, NotificationKind::DefectiveReceipt, &id, payload);
            return Ok(());
        }
        let outcome = classify_report(extraction, &report.submission.account_code, &self.store, self.settings.classifier)?;
        let amount_matches = extraction.total() == Some(report.submission.declared_total);
        self.record(
            &id,
            EventKind::Classified {
                gate,
                outcome,
                amount_matches,
            },
        )
    }

    fn decide_or_escalate(&mut self, report: &Report) -> Result<()> {
        let id = report.report_id().to_string();
        let outcome = report
            .outcome
            .clone()
            .ok_or_else(|| PipelineError::CorruptLog(format!("{id} classified without outcome")))?;
        let amount_matches = report.amount_matches.unwrap_or(false);
        let item_results = item_results(&outcome);

        let mut reasons: Vec<String> = outcome
            .prohibited()
            .map(|v| format!("prohibited item {:?}: {}", v.item.name, v.basis))
            .collect();
        let policy_hit = !reasons.is_empty();
        if !amount_matches {
            let receipt_total = report
                .extraction
                .as_ref()
                .and_then(|e| e.total())
                .map_or("missing".to_string(), |t| t.to_string());
            reasons.push(format!(
                "declared total {} ≠ receipt total {receipt_total}",
                report.submission.declared_total
            ));
        }
        if !reasons.is_empty() {
            let decision = FinalDecision {
                report_id: id.clone(),
                verdict: Verdict::Reject,
                reasons,
                reason_class: Some(if policy_hit { RejectionClass::Policy } else { RejectionClass::Amount }),
                decided_by: DecidedBy::System,
                item_results,
            };
            return self.record(
                &id,
                EventKind::Finalized {
                    stage: Stage::AutoRejected,
                    decision,
                },
            );
        }
        if outcome.escalations.is_empty() {
            let decision = FinalDecision {
                report_id: id.clone(),
                verdict: Verdict::Approve,
                reasons: Vec::new(),
                reason_class: None,
                decided_by: DecidedBy::System,
                item_results,
            };
            return self.record(
                &id,
                EventKind::Finalized {
                    stage: Stage::AutoApproved,
                    decision,
                },
            );
        }

        let mut escalated = Vec::with_capacity(outcome.escalations.len());
        for &i in &outcome.escalations {
            let verdict = outcome.verdicts[i].clone();
            let recommendation = match AdvisorQuery::new(
                &verdict.item.name,
                &report.submission.account_code,
                &report.submission.description,
                &self.store,
            ) {
                Ok(query) => self.advisor.advise(&query, &self.store),
                Err(e) => AdvisorRecommendation::unsure(&verdict.item.name, e.to_string()),
            };
            escalated.push(EscalatedItem {
                item: verdict.item.clone(),
                verdict,
                recommendation,
            });
        }
        let task = self.ledger.queue.prepare_task(&id, escalated, self.clock.now())?;
        let summary = task
            .items
            .iter()
            .map(|i| match (&i.recommendation.compliant, &i.recommendation.recommended_category) {
                (Compliance::Yes, Some(c)) => format!("{} (suggested {c})", i.item.name),
                _ => i.item.name.clone(),
            })
            .collect::<Vec<_>>()
            .join(", ");
        let payload = format!("task {} for report {id} needs review: {summary}", task.task_id);
        self.record(&id, EventKind::ReviewRequested { task })?;
        self.notify(REVIEWER_RECIPIENT, NotificationKind::ReviewRequested, &id, payload);
        Ok(())
    }

    fn finalize_review(&mut self, report: &Report, task: &ReviewTask) -> Result<()> {
        let id = report.report_id().to_string();
        let decision = task
            .decision
            .as_ref()
            .ok_or_else(|| PipelineError::CorruptLog(format!("task {} decided without decision", task.task_id)))?;
        let outcome = report
            .outcome
            .as_ref()
            .ok_or_else(|| PipelineError::CorruptLog(format!("{id} pending without outcome")))?;
        let decided_by = DecidedBy::Reviewer(decision.reviewer.clone());
        let (stage, final_decision) = match decision.action {
            ReviewAction::Approve => {
                let resolved: BTreeMap<String, &str> = decision
                    .item_resolutions
                    .iter()
                    .map(|r| (normalize_name(&r.original_name), r.category.as_str()))
                    .collect();
                let item_results = outcome
                    .verdicts
                    .iter()
                    .map(|v| match (v.status, resolved.get(&normalize_name(&v.item.name))) {
                        (ItemStatus::Unknown, Some(category)) => ItemResult {
                            name: v.item.name.clone(),
                            category: Some(category.to_string()),
                            result: ItemStatus::Allowed,
                        },
                        _ => ItemResult {
                            name: v.item.name.clone(),
                            category: v.category.clone(),
                            result: v.status,
                        },
                    })
                    .collect::<Vec<_>>();
                let unresolved: Vec<String> = item_results
                    .iter()
                    .filter(|r| r.result != ItemStatus::Allowed)
                    .map(|r| format!("item {:?} left unresolved", r.name))
                    .collect();
                if unresolved.is_empty() {
                    (
                        Stage::Approved,
                        FinalDecision {
                            report_id: id.clone(),
                            verdict: Verdict::Approve,
                            reasons: Vec::new(),
                            reason_class: None,
                            decided_by,
                            item_results,
                        },
                    )
                } else {
                    (
                        Stage::Rejected,
                        FinalDecision {
                            report_id: id.clone(),
                            verdict: Verdict::Reject,
                            reasons: unresolved,
                            reason_class: Some(RejectionClass::Policy),
                            decided_by,
                            item_results,
                        },
                    )
                }
            }
            ReviewAction::Reject => {
                let mut reason = "rejected by reviewer".to_string();
                if let Some(c) = decision.comment.as_deref().filter(|c| !c.trim().is_empty()) {
                    reason.push_str(&format!(": {c}"));
                }
                let item_results = outcome
                    .verdicts
                    .iter()
                    .map(|v| ItemResult {
                        name: v.item.name.clone(),
                        category: v.category.clone(),
                        result: if v.status == ItemStatus::Unknown { ItemStatus::Prohibited } else { v.status },
                    })
                    .collect();
                (
                    Stage::Rejected,
                    FinalDecision {
                        report_id: id.clone(),
                        verdict: Verdict::Reject,
                        reasons: vec![reason],
                        reason_class: Some(RejectionClass::Policy),
                        decided_by,
                        item_results,
                    },
                )
            }
        };
        self.record(
            &id,
            EventKind::Finalized {
                stage,
                decision: final_decision,
            },
        )
    }

    fn export(&mut self, report: &Report) -> Result<()> {
        let id = report.report_id().to_string();
        let decision = report
            .decision
            .clone()
            .ok_or_else(|| PipelineError::CorruptLog(format!("{id} decided without a decision")))?;
        let record = ExportRecord {
            seq: self.exports.records().last().map_or(1, |r| r.seq + 1),
            exported_at: self.clock.now(),
            decision,
        };
        self.exports.append(record.clone())?;
        self.mirror("export", &record);
        let payload = format!(
            "report {id} finalized: {:?}{}",
            record.decision.verdict,
            if record.decision.reasons.is_empty() {
                String::new()
            } else {
                format!(" ({})", record.decision.reasons.join("; "))
            }
        );
        self.record(&id, EventKind::Exported { record })?;
        self.notify(&report.submission.user, NotificationKind::Finalized, &id, payload);
        Ok(())
    }

    /// Applies a reviewer decision. The decided task and its policy
    /// write-back are logged as one event, after which the report is
    /// finalized and exported.
    pub fn submit_decision(&mut self, task_id: TaskId, decision: ReviewDecision) -> Result<DecisionReceipt> {
        let task = self
            .ledger
            .queue
            .get(task_id)
            .ok_or(ReviewError::TaskNotFound(task_id))?
            .clone();
        if task.state == TaskState::Decided {
            return Err(ReviewError::AlreadyDecided(task_id).into());
        }
        let report = self
            .report(&task.report_id)
            .ok_or_else(|| PipelineError::CorruptLog(format!("task {task_id} for unknown report")))?;
        if decision.action == ReviewAction::Approve {
            let account = self
                .store
                .account_policy(&report.submission.account_code)
                .ok_or_else(|| PipelineError::UnknownAccount(report.submission.account_code.clone()))?;
            if let Some(bad) = decision.item_resolutions.iter().find(|r| !account.allows(&r.category)) {
                return Err(ReviewError::InvalidDecision(format!(
                    "category {:?} is not allowed for account {}",
                    bad.category, account.code
                ))
                .into());
            }
        }

        let outcome = self.ledger.queue.evaluate_decision(task_id, decision, &self.store)?;
        let report_id = task.report_id.clone();
        self.record(
            &report_id,
            EventKind::TaskDecided {
                task: outcome.task.clone(),
                entries: outcome.entries.clone(),
            },
        )?;
        self.store = outcome.store;
        self.persist_store()?;

        let final_state = self.run_to_completion(&report_id)?;
        Ok(DecisionReceipt {
            task: outcome.task,
            feedback: outcome.feedback,
            report_id: report_id.clone(),
            final_state,
            decision: self.report(&report_id).and_then(|r| r.decision.clone()),
        })
    }

    /// Manual policy edit outside the review loop.
    pub fn upsert_policy_entry(&mut self, entry: PolicyEntry) -> Result<PolicyEntry> {
        let mut next = self.store.clone();
        let written = next.upsert_entry(entry)?.clone();
        self.store = next;
        self.persist_store()?;
        Ok(written)
    }

    /// Repairs state left by an interrupted run: replays learned entries the
    /// store file missed, records exports the sink has but the log lacks, and
    /// finalizes reviews that were decided but not yet exported.
    fn recover(&mut self) -> Result<()> {
        let mut store_dirty = false;
        for event in self.events.records() {
            if let EventKind::TaskDecided { entries, .. } = &event.kind {
                for entry in entries {
                    let present = self.store.lookup(&entry.name).is_some_and(|hit| {
                        hit.entry.list == ListKind::Whitelist
                            && hit.entry.normalized_key == entry.normalized_key
                            && hit.entry.category == entry.category
                            && entry.synonyms.is_subset(&hit.entry.synonyms)
                    });
                    if !present {
                        warn!(key = %entry.normalized_key, "re-applying learned entry missing from store");
                        self.store.upsert_entry(entry.clone())?;
                        store_dirty = true;
                    }
                }
            }
        }
        if store_dirty {
            self.persist_store()?;
        }

        let orphans: Vec<ExportRecord> = self
            .exports
            .records()
            .iter()
            .filter(|r| {
                self.ledger
                    .reports
                    .get(&r.decision.report_id)
                    .is_some_and(|rep| rep.stage.is_decided())
            })
            .cloned()
            .collect();
        for record in orphans {
            let id = record.decision.report_id.clone();
            warn!(report = %id, "recording export found in sink but missing from event log");
            self.record(&id, EventKind::Exported { record })?;
        }

        let stalled: Vec<String> = self
            .ledger
            .reports
            .values()
            .filter(|r| {
                r.stage == Stage::PendingReview
                    && r.task_id
                        .and_then(|t| self.ledger.queue.get(t))
                        .is_some_and(|t| t.state == TaskState::Decided)
            })
            .map(|r| r.report_id().to_string())
            .collect();
        for id in stalled {
            self.run_to_completion(&id)?;
        }
        Ok(())
    }
}

fn item_results(outcome: &ClassificationOutcome) -> Vec<ItemResult> {
    outcome
        .verdicts
        .iter()
        .map(|v| ItemResult {
            name: v.item.name.clone(),
            category: v.category.clone(),
            result: v.status,
        })
        .collect()
}

fn pending_items(report: &Report) -> Vec<ItemResult> {
    report
        .extraction
        .iter()
        .flat_map(|e| e.items.iter())
        .map(|i| ItemResult {
            name: i.name.clone(),
            category: None,
            result: ItemStatus::Unknown,
        })
        .collect()
}

pub fn advisor_from_config(config: &Config) -> Result<Box<dyn Advisor>> {
    let thresholds = Thresholds {
        tau_white: config.tau_white,
        tau_black: config.tau_black,
    };
    Ok(match &config.advisor {
        AdvisorConfig::Stub => Box::new(StubAdvisor::new(thresholds)),
        AdvisorConfig::External {
            url,
            timeout_s,
            prompt_path,
        } => {
            let template = match prompt_path {
                Some(path) => std::fs::read_to_string(path).map_err(|source| PipelineError::IoFailure {
                    path: path.display().to_string(),
                    source,
                })?,
                None => crate::advisor::DEFAULT_PROMPT_TEMPLATE.to_string(),
            };
            Box::new(ExternalAdvisor::new(url.clone(), Duration::from_secs_f64(*timeout_s), template))
        }
    })
}
