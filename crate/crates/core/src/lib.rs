//! Expense receipt automation.
//!
//! A submitted expense report flows through receipt extraction, a
//! confidence gate, whitelist/blacklist classification against the account's
//! allowed categories, an advisor for items the policy does not cover, and a
//! human review step whose approvals are written back into the policy store
//! so the same item is handled automatically next time. Every transition is
//! recorded in an append-only event log; final decisions go to an export
//! sink.
//!
//! ```no_run
//! use expenseflow::{Config, Pipeline};
//!
//! let config = Config::resolve(None, &[]).unwrap();
//! let mut pipeline = Pipeline::open(&config).unwrap();
//! for task in pipeline.list_tasks(&Default::default()) {
//!     println!("{} {}", task.task_id, task.report_id);
//! }
//! ```

pub mod advisor;
pub mod classifier;
pub mod config;
pub mod evaluation;
pub mod hitl;
pub mod journal;
pub mod pipeline;
pub mod policy;
pub mod receipt;

pub use advisor::{Advisor, AdvisorQuery, AdvisorRecommendation, Compliance, ExternalAdvisor, StubAdvisor, Thresholds};
pub use classifier::{classify_item, classify_report, ClassificationOutcome, ItemStatus, ItemVerdict};
pub use config::{AdvisorConfig, Config, ConfigError};
pub use evaluation::{
    build_confusion, compute_metrics, ConfusionMatrix, CorpusSpec, EvalError, LabeledOutcome, Metric, MetricScalar,
    MetricsReport,
};
pub use hitl::{ItemResolution, ReviewAction, ReviewDecision, ReviewError, ReviewQueue, ReviewTask, TaskId, TaskState};
pub use pipeline::{ExpenseSubmission, FinalDecision, Pipeline, PipelineError, Stage, Verdict};
pub use policy::{normalize_name, PolicyEntry, PolicyError, PolicyStore};
pub use receipt::{parse_receipt, ExtractionResult, ReceiptDocument, ReceiptError};

/// Metrics in double precision, the default for reports.
pub type Metrics = MetricsReport<f64>;
/// Metrics as exact fractions of the confusion counts.
pub type ExactMetrics = MetricsReport<num_rational::Ratio<u64>>;
