//! `expenseflow` command-line driver.
//!
//! Every command prints one JSON document on stdout. Domain failures print
//! `{"code": ..., "message": ...}` on stderr and exit with status 1; usage
//! errors exit with status 2.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::Utc;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tracing_subscriber::EnvFilter;

use expenseflow::evaluation::{evaluate, generate_corpus, read_corpus, read_labels, run_with_oracle, write_corpus};
use expenseflow::hitl::TaskFilter;
use expenseflow::journal::Journal;
use expenseflow::pipeline::{ExportRecord, SubmissionFile};
use expenseflow::policy::{ListKind, Provenance, ProvenanceSource};
use expenseflow::{
    normalize_name, Config, ConfigError, CorpusSpec, EvalError, ItemResolution, Pipeline, PipelineError, PolicyEntry,
    PolicyError, ReviewAction, ReviewDecision, TaskId, TaskState,
};

#[derive(Parser)]
#[command(name = "expenseflow", version, about = "Expense report automation pipeline")]
struct Cli {
    /// Config file (defaults to $EXPFLOW_CONFIG, then ./expenseflow.json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config field, e.g. `--set confidence_threshold=60`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_override)]
    overrides: Vec<(String, String)>,

    #[command(subcommand)]
    command: Command,
}

fn parse_override(raw: &str) -> Result<(String, String), String> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected KEY=VALUE, got {raw:?}"))
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve,
    /// Submit an expense report from a JSON file and run it as far as it goes.
    Submit {
        #[arg(long)]
        report: PathBuf,
    },
    /// Advance one report by a single step, or every open report to completion.
    Advance {
        #[arg(required_unless_present = "all", conflicts_with = "all")]
        report_id: Option<String>,
        #[arg(long)]
        all: bool,
    },
    /// Inspect and decide review tasks.
    Tasks {
        #[command(subcommand)]
        command: TasksCommand,
    },
    /// Inspect and edit the policy store.
    Policy {
        #[command(subcommand)]
        command: PolicyCommand,
    },
    /// Generate a labeled synthetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Push a generated corpus through the pipeline, answering reviews from
    /// its ground truth, and report metrics.
    RunCorpus { dir: PathBuf },
    /// Compute metrics from a labels file against exported decisions.
    Metrics {
        #[arg(long)]
        labels: PathBuf,
        /// Export log to read (defaults to the configured sink).
        #[arg(long)]
        exports: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TasksCommand {
    List {
        #[arg(long, value_enum)]
        state: Option<StateArg>,
        #[arg(long)]
        report: Option<String>,
        #[arg(long, default_value_t = 100)]
        limit: usize,
    },
    Show {
        task_id: String,
    },
    Decide(DecideArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StateArg {
    Pending,
    Decided,
}

#[derive(Args)]
struct DecideArgs {
    task_id: String,
    #[arg(long, conflicts_with = "reject", required_unless_present = "reject")]
    approve: bool,
    #[arg(long)]
    reject: bool,
    /// Category for every item in the task.
    #[arg(long)]
    category: Option<String>,
    /// Category for one item, as `NAME=CATEGORY`; overrides --category.
    #[arg(long = "resolve", value_name = "NAME=CATEGORY", value_parser = parse_override)]
    resolutions: Vec<(String, String)>,
    /// Save the advisor's similar match as a synonym of each approved item.
    #[arg(long)]
    save_synonyms: bool,
    #[arg(long, default_value = "cli")]
    reviewer: String,
    #[arg(long)]
    comment: Option<String>,
}

#[derive(Subcommand)]
enum PolicyCommand {
    List,
    Add {
        #[arg(long)]
        name: String,
        #[arg(long, value_enum, default_value = "whitelist")]
        list: ListArg,
        #[arg(long)]
        category: Option<String>,
        #[arg(long = "synonym")]
        synonyms: Vec<String>,
        #[arg(long)]
        reason: Option<String>,
    },
    AddSynonym {
        name: String,
        synonym: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ListArg {
    Whitelist,
    Blacklist,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    fraction_blacklisted: Option<f64>,
    #[arg(long)]
    fraction_unknown: Option<f64>,
    #[arg(long)]
    fraction_defective: Option<f64>,
}

struct Failure {
    code: &'static str,
    message: String,
}

impl Failure {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

impl From<PolicyError> for Failure {
    fn from(e: PolicyError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::new("invalid_config", e.to_string())
    }
}

type Outcome = Result<Value, Failure>;

fn to_json(value: impl serde::Serialize) -> Outcome {
    serde_json::to_value(value).map_err(|e| Failure::new("internal", e.to_string()))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("EXPFLOW_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", json!({ "code": f.code, "message": f.message }));
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let config = Config::resolve(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Serve => serve(config),
        Command::Submit { report } => submit(&config, &report),
        Command::Advance { report_id, all } => advance(&config, report_id.as_deref(), all),
        Command::Tasks { command } => tasks(&config, command),
        Command::Policy { command } => policy(&config, command),
        Command::GenCorpus(args) => gen_corpus(&config, args),
        Command::RunCorpus { dir } => run_corpus(&config, &dir),
        Command::Metrics { labels, exports } => metrics(&config, &labels, exports.as_deref()),
    }
}

fn serve(config: Config) -> Outcome {
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::new("internal", e.to_string()))?;
    runtime
        .block_on(expenseflow_server::serve(config))
        .map_err(|e| Failure::new("internal", e.to_string()))?;
    Ok(Value::Null)
}

fn submit(config: &Config, path: &Path) -> Outcome {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::new("invalid_submission", format!("{}: {e}", path.display())))?;
    let file: SubmissionFile = serde_json::from_str(&text)
        .map_err(|e| Failure::new("invalid_submission", format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let submission = file.resolve(base)?;
    let report_id = submission.report_id.clone();
    let mut pipeline = Pipeline::open(config)?;
    pipeline.submit(submission)?;
    let state = pipeline.run_to_completion(&report_id)?;
    Ok(json!({ "report_id": report_id, "state": state }))
}

fn advance(config: &Config, report_id: Option<&str>, all: bool) -> Outcome {
    let mut pipeline = Pipeline::open(config)?;
    if !all {
        let id = report_id.unwrap_or_default();
        let state = pipeline.advance(id)?;
        return Ok(json!({ "report_id": id, "state": state }));
    }
    let open: Vec<String> = pipeline
        .reports()
        .filter(|r| !r.stage.is_decided())
        .map(|r| r.submission.report_id.clone())
        .collect();
    let mut states = BTreeMap::new();
    for id in open {
        states.insert(id.clone(), pipeline.run_to_completion(&id)?);
    }
    to_json(states)
}

fn parse_task_id(raw: &str) -> Result<TaskId, Failure> {
    raw.parse().map_err(|_| Failure::new("task_not_found", format!("task {raw:?} not found")))
}

fn tasks(config: &Config, command: TasksCommand) -> Outcome {
    let mut pipeline = Pipeline::open(config)?;
    match command {
        TasksCommand::List { state, report, limit } => {
            let filter = TaskFilter {
                state: state.map(|s| match s {
                    StateArg::Pending => TaskState::Pending,
                    StateArg::Decided => TaskState::Decided,
                }),
                report_id: report,
            };
            let rows: Vec<Value> = pipeline
                .list_tasks(&filter)
                .into_iter()
                .take(limit)
                .map(|t| {
                    json!({
                        "task_id": t.task_id,
                        "report_id": t.report_id,
                        "state": t.state,
                        "created_at": t.created_at,
                        "items": t.items.iter().map(|i| i.item.name.as_str()).collect::<Vec<_>>(),
                    })
                })
                .collect();
            Ok(Value::Array(rows))
        }
        TasksCommand::Show { task_id } => {
            let id = parse_task_id(&task_id)?;
            let task = pipeline
                .task(id)
                .ok_or_else(|| Failure::new("task_not_found", format!("task {id} not found")))?;
            to_json(task)
        }
        TasksCommand::Decide(args) => {
            let id = parse_task_id(&args.task_id)?;
            let task = pipeline
                .task(id)
                .ok_or_else(|| Failure::new("task_not_found", format!("task {id} not found")))?;
            let overrides: BTreeMap<String, String> =
                args.resolutions.iter().map(|(n, c)| (normalize_name(n), c.clone())).collect();
            let item_resolutions = if args.approve {
                task.items
                    .iter()
                    .filter_map(|i| {
                        let category = overrides
                            .get(&normalize_name(&i.item.name))
                            .or(args.category.as_ref())?
                            .clone();
                        Some(ItemResolution {
                            original_name: i.item.name.clone(),
                            category,
                            save_synonyms: args.save_synonyms,
                            synonyms: Default::default(),
                            description: None,
                        })
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let decision = ReviewDecision {
                action: if args.approve { ReviewAction::Approve } else { ReviewAction::Reject },
                item_resolutions,
                reviewer: args.reviewer,
                comment: args.comment,
                decided_at: Utc::now(),
            };
            let out = pipeline.submit_decision(id, decision)?;
            Ok(json!({
                "task_id": id,
                "report_id": out.report_id,
                "final_state": out.final_state,
                "verdict": out.decision.as_ref().map(|d| d.verdict),
                "decision": out.decision,
                "feedback": out.feedback,
            }))
        }
    }
}

fn manual_provenance() -> Provenance {
    Provenance {
        source: ProvenanceSource::Seed,
        reviewer: Some("manual".into()),
        timestamp: Utc::now(),
    }
}

fn policy(config: &Config, command: PolicyCommand) -> Outcome {
    let mut pipeline = Pipeline::open(config)?;
    match command {
        PolicyCommand::List => to_json(pipeline.store()),
        PolicyCommand::Add {
            name,
            list,
            category,
            synonyms,
            reason,
        } => {
            let list = match list {
                ListArg::Whitelist => ListKind::Whitelist,
                ListArg::Blacklist => ListKind::Blacklist,
            };
            let entry = PolicyEntry::new(name, category, list, synonyms, manual_provenance(), reason)?;
            to_json(pipeline.upsert_policy_entry(entry)?)
        }
        PolicyCommand::AddSynonym { name, synonym } => {
            let key = normalize_name(&name);
            let mut entry = pipeline
                .store()
                .entries()
                .iter()
                .find(|e| e.normalized_key == key)
                .cloned()
                .ok_or_else(|| Failure::new("entry_not_found", format!("no policy entry named {name:?}")))?;
            entry.synonyms.insert(synonym);
            entry.provenance = manual_provenance();
            to_json(pipeline.upsert_policy_entry(entry)?)
        }
    }
}

fn gen_corpus(config: &Config, args: GenCorpusArgs) -> Outcome {
    let mut spec = CorpusSpec::new(args.count, args.seed);
    if let Some(f) = args.fraction_blacklisted {
        spec.fraction_blacklisted = f;
    }
    if let Some(f) = args.fraction_unknown {
        spec.fraction_unknown = f;
    }
    if let Some(f) = args.fraction_defective {
        spec.fraction_defective = f;
    }
    spec.fraction_whitelisted = (1.0 - spec.fraction_blacklisted - spec.fraction_unknown - spec.fraction_defective).max(0.0);
    // Corpus names come from the configured store when it exists, so a
    // tuned store yields a matching corpus.
    let store = if config.store_path.exists() {
        Pipeline::open(config)?.store().clone()
    } else {
        expenseflow::PolicyStore::seed()
    };
    let cases = generate_corpus(&spec, &store)?;
    write_corpus(&args.out, &cases)?;
    Ok(json!({ "out": args.out, "count": cases.len(), "seed": args.seed, "classes": to_json(spec.class_counts())? }))
}

fn run_corpus(config: &Config, dir: &Path) -> Outcome {
    let cases = read_corpus(dir)?;
    let mut pipeline = Pipeline::open(config)?;
    let run = run_with_oracle(&mut pipeline, &cases)?;
    to_json(run)
}

fn metrics(config: &Config, labels: &Path, exports: Option<&Path>) -> Outcome {
    let labels = read_labels(labels)?;
    let path = exports.unwrap_or(&config.export_sink_path);
    let journal: Journal<ExportRecord> = Journal::open(path).map_err(PipelineError::from)?;
    to_json(evaluate(&labels, journal.records())?)
}
