//! Confusion matrix and quality metrics over labeled outcomes, plus a
//! seeded synthetic corpus generator for desk-scale runs.
//!
//! Approval is the positive class: `tp` counts reports both the ground truth
//! and the system approved, `fn` counts approvable reports the system
//! rejected.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::ops::{Add, Div, Mul};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, Utc};
use num_rational::Ratio;
use num_traits::{One, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::ItemStatus;
use crate::hitl::{ItemResolution, ReviewAction, ReviewDecision, TaskFilter, TaskState};
use crate::advisor::Compliance;
use crate::pipeline::{
    ExpenseSubmission, ExportRecord, FinalDecision, Pipeline, PipelineError, RejectionClass, Stage, SubmissionFile,
    Verdict,
};
use crate::policy::{normalize_name, ListKind, PolicyEntry, PolicyStore};
use crate::receipt::{ExtractionResult, FieldExtraction, FieldName, FieldValue, LineItem, ReceiptDocument};

pub const LABELS_HEADER: [&str; 2] = ["report_id", "ground_truth"];
pub const ORACLE_REVIEWER: &str = "oracle";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("report {0:?} appears more than once")]
    DuplicateReportId(String),
    #[error("invalid labels{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    InvalidLabels { line: Option<u64>, message: String },
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus file {path} is malformed: {message}")]
    CorpusFormat { path: String, message: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::DuplicateReportId(_) => "duplicate_report",
            EvalError::InvalidLabels { .. } => "invalid_labels",
            EvalError::InvalidSpec(_) => "invalid_spec",
            EvalError::Io { .. } => "io_failure",
            EvalError::CorpusFormat { .. } => "invalid_corpus",
            EvalError::Pipeline(e) => e.code(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledOutcome {
    pub report_id: String,
    pub ground_truth: Verdict,
    pub system_verdict: Verdict,
    pub rejection_reason_class: Option<RejectionClass>,
}

impl LabeledOutcome {
    pub fn from_decision(ground_truth: Verdict, decision: &FinalDecision) -> Self {
        Self {
            report_id: decision.report_id.clone(),
            ground_truth,
            system_verdict: decision.verdict,
            rejection_reason_class: match decision.verdict {
                Verdict::Approve => None,
                Verdict::Reject => Some(decision.reason_class.unwrap_or(RejectionClass::Policy)),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn scaled(&self, k: u64) -> Self {
        Self::new(self.tp * k, self.tn * k, self.fp * k, self.fn_ * k)
    }

    pub fn record(&mut self, ground_truth: Verdict, system: Verdict) {
        match (ground_truth, system) {
            (Verdict::Approve, Verdict::Approve) => self.tp += 1,
            (Verdict::Reject, Verdict::Reject) => self.tn += 1,
            (Verdict::Reject, Verdict::Approve) => self.fp += 1,
            (Verdict::Approve, Verdict::Reject) => self.fn_ += 1,
        }
    }
}

pub fn build_confusion(outcomes: &[LabeledOutcome]) -> Result<ConfusionMatrix, EvalError> {
    let mut seen = BTreeSet::new();
    let mut m = ConfusionMatrix::default();
    for o in outcomes {
        if !seen.insert(o.report_id.as_str()) {
            return Err(EvalError::DuplicateReportId(o.report_id.clone()));
        }
        m.record(o.ground_truth, o.system_verdict);
    }
    Ok(m)
}

/// System rejections split by reason class, as (agreeing, disagreeing) with
/// the ground truth — i.e. each class's share of `tn` and `fn`.
pub fn rejections_by_class(outcomes: &[LabeledOutcome]) -> BTreeMap<RejectionClass, ClassCounts> {
    let mut out: BTreeMap<RejectionClass, ClassCounts> = BTreeMap::new();
    for o in outcomes.iter().filter(|o| o.system_verdict == Verdict::Reject) {
        let class = o.rejection_reason_class.unwrap_or(RejectionClass::Policy);
        let slot = out.entry(class).or_default();
        match o.ground_truth {
            Verdict::Reject => slot.tn += 1,
            Verdict::Approve => slot.fn_ += 1,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Number type the metrics are computed in.
pub trait MetricScalar:
    Copy
    + fmt::Debug
    + PartialEq
    + PartialOrd
    + Zero
    + One
    + Add<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
{
    fn from_count(n: u64) -> Self;
    fn to_f64(self) -> f64;
}

impl MetricScalar for f64 {
    fn from_count(n: u64) -> Self {
        n as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl MetricScalar for f32 {
    fn from_count(n: u64) -> Self {
        n as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl MetricScalar for Ratio<u64> {
    fn from_count(n: u64) -> Self {
        Ratio::from_integer(n)
    }
    fn to_f64(self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Metric<T> {
    Value(T),
    Absent { reason: String },
}

impl<T: MetricScalar> Metric<T> {
    pub fn value(&self) -> Option<T> {
        match self {
            Metric::Value(v) => Some(*v),
            Metric::Absent { .. } => None,
        }
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, Metric::Absent { .. })
    }

    pub fn reason(&self) -> Option<&str> {
        match self {
            Metric::Value(_) => None,
            Metric::Absent { reason } => Some(reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport<T> {
    pub matrix: ConfusionMatrix,
    pub accuracy: Metric<T>,
    pub precision: Metric<T>,
    pub recall: Metric<T>,
    pub f1: Metric<T>,
}

fn ratio<T: MetricScalar>(num: u64, den: u64, what: &str) -> Metric<T> {
    if den == 0 {
        Metric::Absent {
            reason: format!("zero denominator: {what} is 0"),
        }
    } else {
        Metric::Value(T::from_count(num) / T::from_count(den))
    }
}

pub fn compute_metrics<T: MetricScalar>(m: ConfusionMatrix) -> MetricsReport<T> {
    let accuracy = ratio(m.tp + m.tn, m.total(), "tn+fn+fp+tp");
    let precision = ratio(m.tp, m.tp + m.fp, "tp+fp");
    let recall = ratio(m.tp, m.tp + m.fn_, "tp+fn");
    let f1 = match (precision.value(), recall.value()) {
        (Some(p), Some(r)) if p + r != T::zero() => {
            let two = T::one() + T::one();
            Metric::Value(two * p * r / (p + r))
        }
        (Some(_), Some(_)) => Metric::Absent {
            reason: "zero denominator: precision+recall is 0".into(),
        },
        _ => Metric::Absent {
            reason: "precision or recall is absent".into(),
        },
    };
    MetricsReport {
        matrix: m,
        accuracy,
        precision,
        recall,
        f1,
    }
}

/// Wire form: absent metrics are `null` with a `<metric>_reason` sibling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub matrix: ConfusionMatrix,
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_reason: Option<String>,
    pub precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision_reason: Option<String>,
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_reason: Option<String>,
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1_reason: Option<String>,
}

impl<T: MetricScalar> MetricsReport<T> {
    pub fn to_document(&self) -> MetricsDocument {
        let v = |m: &Metric<T>| m.value().map(T::to_f64);
        let r = |m: &Metric<T>| m.reason().map(str::to_string);
        MetricsDocument {
            matrix: self.matrix,
            accuracy: v(&self.accuracy),
            accuracy_reason: r(&self.accuracy),
            precision: v(&self.precision),
            precision_reason: r(&self.precision),
            recall: v(&self.recall),
            recall_reason: r(&self.recall),
            f1: v(&self.f1),
            f1_reason: r(&self.f1),
        }
    }
}

impl From<MetricsDocument> for MetricsReport<f64> {
    fn from(d: MetricsDocument) -> Self {
        let m = |v: Option<f64>, r: Option<String>| match v {
            Some(v) => Metric::Value(v),
            None => Metric::Absent {
                reason: r.unwrap_or_else(|| "absent".into()),
            },
        };
        Self {
            matrix: d.matrix,
            accuracy: m(d.accuracy, d.accuracy_reason),
            precision: m(d.precision, d.precision_reason),
            recall: m(d.recall, d.recall_reason),
            f1: m(d.f1, d.f1_reason),
        }
    }
}

impl<T: MetricScalar> Serialize for MetricsReport<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_document().serialize(s)
    }
}

impl<'de> Deserialize<'de> for MetricsReport<f64> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        MetricsDocument::deserialize(d).map(Into::into)
    }
}

/// Metrics document plus the bookkeeping of the label/export join.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    #[serde(flatten)]
    pub metrics: MetricsDocument,
    pub rejections_by_class: BTreeMap<RejectionClass, ClassCounts>,
    /// Labeled reports with no export record yet.
    pub unexported_labels: Vec<String>,
    /// Exported reports with no label.
    pub unlabeled_exports: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Joined {
    pub outcomes: Vec<LabeledOutcome>,
    pub unexported_labels: Vec<String>,
    pub unlabeled_exports: Vec<String>,
}

pub fn join_outcomes(labels: &BTreeMap<String, Verdict>, exports: &[ExportRecord]) -> Joined {
    let mut joined = Joined::default();
    let mut exported = BTreeSet::new();
    for record in exports {
        let id = &record.decision.report_id;
        exported.insert(id.as_str());
        match labels.get(id) {
            Some(truth) => joined.outcomes.push(LabeledOutcome::from_decision(*truth, &record.decision)),
            None => joined.unlabeled_exports.push(id.clone()),
        }
    }
    joined.unexported_labels = labels
        .keys()
        .filter(|k| !exported.contains(k.as_str()))
        .cloned()
        .collect();
    joined
}

pub fn evaluate(labels: &BTreeMap<String, Verdict>, exports: &[ExportRecord]) -> Result<Evaluation, EvalError> {
    let joined = join_outcomes(labels, exports);
    let matrix = build_confusion(&joined.outcomes)?;
    Ok(Evaluation {
        metrics: compute_metrics::<f64>(matrix).to_document(),
        rejections_by_class: rejections_by_class(&joined.outcomes),
        unexported_labels: joined.unexported_labels,
        unlabeled_exports: joined.unlabeled_exports,
    })
}

fn parse_verdict(raw: &str) -> Option<Verdict> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "approve" => Some(Verdict::Approve),
        "reject" => Some(Verdict::Reject),
        _ => None,
    }
}

fn verdict_label(v: Verdict) -> &'static str {
    match v {
        Verdict::Approve => "approve",
        Verdict::Reject => "reject",
    }
}

/// Parses a labels CSV with header `report_id,ground_truth`.
pub fn parse_labels(reader: impl Read) -> Result<BTreeMap<String, Verdict>, EvalError> {
    let invalid = |line: Option<u64>, message: String| EvalError::InvalidLabels { line, message };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| invalid(Some(1), e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != LABELS_HEADER {
        return Err(invalid(Some(1), format!("header must be {}", LABELS_HEADER.join(","))));
    }
    let mut labels = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| invalid(e.position().map(|p| p.line()), e.to_string()))?;
        let line = record.position().map(|p| p.line());
        let id = record.get(0).unwrap_or_default();
        if id.is_empty() {
            return Err(invalid(line, "empty report_id".into()));
        }
        let raw = record.get(1).unwrap_or_default();
        let verdict =
            parse_verdict(raw).ok_or_else(|| invalid(line, format!("ground_truth {raw:?} is not approve|reject")))?;
        if labels.insert(id.to_string(), verdict).is_some() {
            return Err(invalid(line, format!("duplicate report_id {id:?}")));
        }
    }
    Ok(labels)
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, Verdict>, EvalError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_labels(file)
}

pub fn write_labels<'a>(
    writer: impl Write,
    labels: impl IntoIterator<Item = (&'a str, Verdict)>,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(LABELS_HEADER)?;
    for (id, v) in labels {
        w.write_record([id, verdict_label(v)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub count: usize,
    pub fraction_whitelisted: f64,
    pub fraction_blacklisted: f64,
    pub fraction_unknown: f64,
    pub fraction_defective: f64,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            count,
            fraction_whitelisted: 0.6,
            fraction_blacklisted: 0.05,
            fraction_unknown: 0.3,
            fraction_defective: 0.05,
            seed,
        }
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.count == 0 {
            return Err(EvalError::InvalidSpec("count must be at least 1".into()));
        }
        let fractions = [
            ("fraction_whitelisted", self.fraction_whitelisted),
            ("fraction_blacklisted", self.fraction_blacklisted),
            ("fraction_unknown", self.fraction_unknown),
            ("fraction_defective", self.fraction_defective),
        ];
        for (name, f) in fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(EvalError::InvalidSpec(format!("{name} {f} is outside [0, 1]")));
            }
        }
        let sum: f64 = fractions.iter().map(|(_, f)| f).sum();
        if sum > 1.0 + 1e-9 {
            return Err(EvalError::InvalidSpec(format!("fractions sum to {sum} > 1")));
        }
        Ok(())
    }

    /// Per-class counts: floor for every non-whitelisted class, remainder to
    /// whitelisted.
    pub fn class_counts(&self) -> BTreeMap<CaseClass, usize> {
        let floor = |f: f64| ((f * self.count as f64) + 1e-9).floor() as usize;
        let black = floor(self.fraction_blacklisted);
        let unknown = floor(self.fraction_unknown);
        let defective = floor(self.fraction_defective);
        let white = self.count.saturating_sub(black + unknown + defective);
        BTreeMap::from([
            (CaseClass::Whitelisted, white),
            (CaseClass::Blacklisted, black),
            (CaseClass::Unknown, unknown),
            (CaseClass::Defective, defective),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseClass {
    Whitelisted,
    Blacklisted,
    Unknown,
    Defective,
}

/// One generated report with what the generator knows about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusCase {
    pub submission: ExpenseSubmission,
    pub class: CaseClass,
    pub ground_truth: Verdict,
    /// Correct category for each item the store does not know.
    pub resolutions: BTreeMap<String, String>,
}

const MERCHANTS: &[&str] = &[
    "Starbucks Gangnam",
    "GS25 Seocho",
    "Paris Baguette",
    "Kyobo Office Mart",
    "CU Jamsil",
    "Olive Catering",
];
const DESCRIPTIONS: &[&str] = &[
    "team snacks for sprint review",
    "office supplies restock",
    "client meeting refreshments",
    "department workshop",
];
const SUFFIXES: &[&str] = &[" Large", " Mini", " 2+1", " Set", " Lite", " Zero"];

/// Produces a name close to `base` by a few character edits or a suffix.
fn mutate_name(base: &str, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = base.chars().collect();
    if rng.random_bool(0.3) {
        return format!("{base}{}", SUFFIXES[rng.random_range(0..SUFFIXES.len())]);
    }
    let edits = rng.random_range(1..=2);
    for _ in 0..edits {
        let letter = char::from(b'a' + rng.random_range(0..26u8));
        let pos = rng.random_range(0..chars.len().max(1));
        match rng.random_range(0..3) {
            0 => chars.insert(pos, letter),
            1 if chars.len() > 3 => {
                chars.remove(pos.min(chars.len() - 1));
            }
            _ => {
                if let Some(c) = chars.get_mut(pos) {
                    *c = letter;
                } else {
                    chars.push(letter);
                }
            }
        }
    }
    chars.into_iter().collect()
}

struct Pools<'a> {
    accounts: Vec<(&'a str, Vec<&'a PolicyEntry>)>,
    blacklist: Vec<&'a PolicyEntry>,
}

impl<'a> Pools<'a> {
    fn new(store: &'a PolicyStore) -> Self {
        let accounts = store
            .accounts()
            .iter()
            .filter(|a| a.routine)
            .map(|a| {
                let pool: Vec<&PolicyEntry> = store
                    .entries_on(ListKind::Whitelist)
                    .filter(|e| e.category.as_deref().is_some_and(|c| a.allows(c)))
                    .collect();
                (a.code.as_str(), pool)
            })
            .filter(|(_, pool)| !pool.is_empty())
            .collect();
        Self {
            accounts,
            blacklist: store.entries_on(ListKind::Blacklist).collect(),
        }
    }
}

fn random_item(name: String, rng: &mut ChaCha8Rng) -> LineItem {
    let qty = rng.random_range(1..=3u64);
    let unit = rng.random_range(10..=200i64) * 100;
    LineItem::new(name, qty, unit, qty as i64 * unit)
}

/// Generates a labeled corpus from the store's lists. Deterministic in
/// `spec.seed` and the store contents.
pub fn generate_corpus(spec: &CorpusSpec, store: &PolicyStore) -> Result<Vec<CorpusCase>, EvalError> {
    spec.validate()?;
    let pools = Pools::new(store);
    if pools.accounts.is_empty() {
        return Err(EvalError::InvalidSpec(
            "store has no routine account with whitelisted items".into(),
        ));
    }
    let counts = spec.class_counts();
    if counts[&CaseClass::Blacklisted] > 0 && pools.blacklist.is_empty() {
        return Err(EvalError::InvalidSpec("store has no blacklist entries".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut classes: Vec<CaseClass> = counts
        .iter()
        .flat_map(|(class, n)| std::iter::repeat_n(*class, *n))
        .collect();
    classes.shuffle(&mut rng);

    // Mutated names must mean the same category everywhere in the corpus so
    // the oracle's write-backs never conflict.
    let mut invented: HashMap<String, String> = HashMap::new();
    let base_date = NaiveDate::from_ymd_opt(2025, 1, 1).expect("valid date");

    let mut cases = Vec::with_capacity(spec.count);
    for (i, class) in classes.into_iter().enumerate() {
        let report_id = format!("C{}-{:05}", spec.seed, i + 1);
        let (account, pool) = &pools.accounts[rng.random_range(0..pools.accounts.len())];
        let n_items = rng.random_range(1..=3usize);
        let special = rng.random_range(0..n_items);
        let mut items = Vec::with_capacity(n_items);
        let mut resolutions = BTreeMap::new();
        for slot in 0..n_items {
            let name = match class {
                CaseClass::Blacklisted if slot == special => {
                    pools.blacklist[rng.random_range(0..pools.blacklist.len())].name.clone()
                }
                CaseClass::Unknown if slot == special => loop {
                    let base = pool[rng.random_range(0..pool.len())];
                    let category = base.category.clone().unwrap_or_default();
                    // Receipt item names are trimmed on parse.
                    let candidate = mutate_name(&base.name, &mut rng).trim().to_string();
                    let key = normalize_name(&candidate);
                    if key.is_empty() || store.lookup(&candidate).is_some() {
                        continue;
                    }
                    match invented.get(&key) {
                        Some(c) if *c != category => continue,
                        _ => {}
                    }
                    invented.insert(key, category.clone());
                    resolutions.insert(candidate.clone(), category);
                    break candidate;
                },
                _ => pool[rng.random_range(0..pool.len())].name.clone(),
            };
            items.push(random_item(name, &mut rng));
        }

        let total: i64 = items.iter().map(|i| i.amount).sum();
        let tax = (total + 5) / 11;
        let date = base_date + chrono::Days::new(rng.random_range(0..365));
        let defective_field = (class == CaseClass::Defective).then(|| {
            let mandatory: Vec<FieldName> = FieldName::default_mandatory().into_iter().collect();
            mandatory[rng.random_range(0..mandatory.len())]
        });
        let mut fields = Vec::new();
        let mut push = |rng: &mut ChaCha8Rng, name: FieldName, value: FieldValue| {
            let confidence = if Some(name) == defective_field {
                rng.random_range(0..50)
            } else if rng.random_bool(0.5) {
                100
            } else {
                rng.random_range(60..=100)
            };
            fields.push(FieldExtraction {
                field_name: name,
                value,
                confidence,
            });
        };
        let merchant = MERCHANTS[rng.random_range(0..MERCHANTS.len())];
        push(&mut rng, FieldName::Merchant, FieldValue::Text(merchant.into()));
        let biz_no = format!(
            "{:03}-{:02}-{:05}",
            rng.random_range(100..1000),
            rng.random_range(10..100),
            rng.random_range(0..100_000)
        );
        push(&mut rng, FieldName::BizNo, FieldValue::Text(biz_no));
        push(&mut rng, FieldName::Date, FieldValue::Text(date.format("%Y-%m-%d").to_string()));
        let approval = format!("{:08}", rng.random_range(0..100_000_000u32));
        push(&mut rng, FieldName::ApprovalNo, FieldValue::Text(approval));
        push(&mut rng, FieldName::Supply, FieldValue::Integer(total - tax));
        push(&mut rng, FieldName::Tax, FieldValue::Integer(tax));
        push(&mut rng, FieldName::Total, FieldValue::Integer(total));

        let receipt = ExtractionResult {
            fields,
            items,
            warnings: Vec::new(),
        };
        let ground_truth = match class {
            CaseClass::Whitelisted | CaseClass::Unknown => Verdict::Approve,
            CaseClass::Blacklisted | CaseClass::Defective => Verdict::Reject,
        };
        cases.push(CorpusCase {
            submission: ExpenseSubmission {
                report_id: report_id.clone(),
                user: format!("user{:03}", rng.random_range(1..=50)),
                account_code: account.to_string(),
                description: DESCRIPTIONS[rng.random_range(0..DESCRIPTIONS.len())].into(),
                declared_total: total,
                receipt: ReceiptDocument::new(report_id, receipt.to_canonical()),
            },
            class,
            ground_truth,
            resolutions,
        });
    }
    Ok(cases)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OracleLine {
    report_id: String,
    class: CaseClass,
    ground_truth: Verdict,
    resolutions: BTreeMap<String, String>,
}

pub const CORPUS_SUBMISSIONS: &str = "submissions.jsonl";
pub const CORPUS_LABELS: &str = "labels.csv";
pub const CORPUS_ORACLE: &str = "oracle.jsonl";
pub const CORPUS_RECEIPTS: &str = "receipts";

/// Writes `receipts/*.rcpt`, `submissions.jsonl`, `labels.csv` and
/// `oracle.jsonl` under `dir`.
pub fn write_corpus(dir: &Path, cases: &[CorpusCase]) -> Result<(), EvalError> {
    let receipts = dir.join(CORPUS_RECEIPTS);
    fs::create_dir_all(&receipts).map_err(io_err(&receipts))?;
    let mut submissions = String::new();
    let mut oracle = String::new();
    for case in cases {
        let s = &case.submission;
        let rel = PathBuf::from(CORPUS_RECEIPTS).join(format!("{}.{}", s.report_id, crate::receipt::RECEIPT_EXTENSION));
        let path = dir.join(&rel);
        fs::write(&path, &s.receipt.raw_text).map_err(io_err(&path))?;
        let line = SubmissionFile {
            report_id: s.report_id.clone(),
            user: s.user.clone(),
            account_code: s.account_code.clone(),
            description: s.description.clone(),
            declared_total: s.declared_total,
            receipt_text: None,
            receipt_path: Some(rel),
        };
        submissions.push_str(&serde_json::to_string(&line).expect("submission serializes"));
        submissions.push('\n');
        let line = OracleLine {
            report_id: s.report_id.clone(),
            class: case.class,
            ground_truth: case.ground_truth,
            resolutions: case.resolutions.clone(),
        };
        oracle.push_str(&serde_json::to_string(&line).expect("oracle line serializes"));
        oracle.push('\n');
    }
    let path = dir.join(CORPUS_SUBMISSIONS);
    fs::write(&path, submissions).map_err(io_err(&path))?;
    let path = dir.join(CORPUS_ORACLE);
    fs::write(&path, oracle).map_err(io_err(&path))?;

    let path = dir.join(CORPUS_LABELS);
    let mut buf = Vec::new();
    write_labels(
        &mut buf,
        cases.iter().map(|c| (c.submission.report_id.as_str(), c.ground_truth)),
    )
    .map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    fs::write(&path, buf).map_err(io_err(&path))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::CorpusFormat {
                path: path.display().to_string(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Reads submissions (and the oracle file, when present) written by
/// [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Vec<CorpusCase>, EvalError> {
    let files: Vec<SubmissionFile> = read_jsonl(&dir.join(CORPUS_SUBMISSIONS))?;
    let oracle_path = dir.join(CORPUS_ORACLE);
    let mut oracle: HashMap<String, OracleLine> = if oracle_path.exists() {
        read_jsonl::<OracleLine>(&oracle_path)?
            .into_iter()
            .map(|o| (o.report_id.clone(), o))
            .collect()
    } else {
        HashMap::new()
    };
    let labels_path = dir.join(CORPUS_LABELS);
    let labels = if labels_path.exists() {
        read_labels(&labels_path)?
    } else {
        BTreeMap::new()
    };
    files
        .into_iter()
        .map(|f| {
            let submission = f.resolve(dir)?;
            let id = submission.report_id.clone();
            let o = oracle.remove(&id);
            let ground_truth = labels
                .get(&id)
                .copied()
                .or(o.as_ref().map(|o| o.ground_truth))
                .ok_or_else(|| EvalError::CorpusFormat {
                    path: dir.display().to_string(),
                    message: format!("no ground truth for {id}"),
                })?;
            Ok(CorpusCase {
                submission,
                class: o.as_ref().map_or(CaseClass::Whitelisted, |o| o.class),
                ground_truth,
                resolutions: o.map(|o| o.resolutions).unwrap_or_default(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusRun {
    pub reports: usize,
    pub review_tasks: usize,
    pub evaluation: Evaluation,
}

/// Pushes every case through the pipeline, answering review tasks the way a
/// reviewer who knows the ground truth would: approve with the constructed
/// categories, or reject.
pub fn run_with_oracle(pipeline: &mut Pipeline, cases: &[CorpusCase]) -> Result<CorpusRun, EvalError> {
    let mut review_tasks = 0;
    for case in cases {
        let id = case.submission.report_id.clone();
        pipeline.submit(case.submission.clone())?;
        if pipeline.run_to_completion(&id)? != Stage::PendingReview {
            continue;
        }
        review_tasks += 1;
        let task = pipeline
            .list_tasks(&TaskFilter {
                state: Some(TaskState::Pending),
                report_id: Some(id.clone()),
            })
            .first()
            .map(|t| (*t).clone())
            .ok_or_else(|| PipelineError::CorruptLog(format!("{id} pending without a task")))?;
        let decision = oracle_decision(case, &task);
        pipeline.submit_decision(task.task_id, decision)?;
    }
    let labels: BTreeMap<String, Verdict> = cases
        .iter()
        .map(|c| (c.submission.report_id.clone(), c.ground_truth))
        .collect();
    Ok(CorpusRun {
        reports: cases.len(),
        review_tasks,
        evaluation: evaluate(&labels, pipeline.exports())?,
    })
}

fn oracle_decision(case: &CorpusCase, task: &crate::hitl::ReviewTask) -> ReviewDecision {
    let reject = |comment: &str| ReviewDecision {
        action: ReviewAction::Reject,
        item_resolutions: Vec::new(),
        reviewer: ORACLE_REVIEWER.into(),
        comment: Some(comment.into()),
        decided_at: Utc::now(),
    };
    if case.ground_truth == Verdict::Reject {
        return reject("ground truth is reject");
    }
    let mut resolutions = Vec::new();
    for escalated in &task.items {
        if escalated.verdict.status != ItemStatus::Unknown {
            continue;
        }
        let name = &escalated.item.name;
        let key = normalize_name(name);
        let known = case.resolutions.iter().find(|(n, _)| normalize_name(n) == key);
        let Some((_, category)) = known else {
            return reject("item outside the corpus oracle");
        };
        let rec = &escalated.recommendation;
        let agrees = rec.compliant == Compliance::Yes
            && rec.recommended_category.as_deref() == Some(category.as_str())
            && rec.matched_similar.is_some();
        if resolutions.iter().any(|r: &ItemResolution| r.original_name == *name) {
            continue;
        }
        resolutions.push(ItemResolution {
            original_name: name.clone(),
            category: category.clone(),
            save_synonyms: agrees,
            synonyms: BTreeSet::new(),
            description: None,
        });
    }
    ReviewDecision {
        action: ReviewAction::Approve,
        item_resolutions: resolutions,
        reviewer: ORACLE_REVIEWER.into(),
        comment: None,
        decided_at: Utc::now(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(id: &str, truth: Verdict, system: Verdict) -> LabeledOutcome {
        LabeledOutcome {
            report_id: id.into(),
            ground_truth: truth,
            system_verdict: system,
            rejection_reason_class: (system == Verdict::Reject).then_some(RejectionClass::Policy),
        }
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(build_confusion(&[]).unwrap(), ConfusionMatrix::default());
        let m = build_confusion(&[outcome("a", Verdict::Approve, Verdict::Approve)]).unwrap();
        assert_eq!(m, ConfusionMatrix::new(1, 0, 0, 0));
        let dup = [
            outcome("a", Verdict::Approve, Verdict::Approve),
            outcome("a", Verdict::Reject, Verdict::Reject),
        ];
        assert!(matches!(build_confusion(&dup), Err(EvalError::DuplicateReportId(id)) if id == "a"));
    }

    #[test]
    fn engineered_table_counts() {
        let mut outcomes = Vec::new();
        let mut push = |n: usize, t, s| {
            for _ in 0..n {
                let id = format!("r{}", outcomes.len());
                outcomes.push(outcome(&id, t, s));
            }
        };
        push(1073, Verdict::Approve, Verdict::Approve);
        push(133, Verdict::Reject, Verdict::Reject);
        push(242, Verdict::Approve, Verdict::Reject);
        assert_eq!(build_confusion(&outcomes).unwrap(), ConfusionMatrix::new(1073, 133, 0, 242));
    }

    #[test]
    fn metrics_match_published_table() {
        let r = compute_metrics::<f64>(ConfusionMatrix::new(1073, 133, 0, 242));
        let close = |m: &Metric<f64>, want: f64| (m.value().unwrap() - want).abs() < 5e-4;
        assert!(close(&r.accuracy, 0.8329));
        assert_eq!(r.precision.value(), Some(1.0));
        assert!(close(&r.recall, 0.8160));
        assert!(close(&r.f1, 0.8986));

        let exact = compute_metrics::<Ratio<u64>>(ConfusionMatrix::new(1073, 133, 0, 242));
        assert_eq!(exact.accuracy.value(), Some(Ratio::new(1206, 1448)));
        assert_eq!(exact.recall.value(), Some(Ratio::new(1073, 1315)));
        assert_eq!(exact.f1.value(), Some(Ratio::new(2146, 2388)));
    }

    #[test]
    fn uniform_matrix_gives_halves() {
        let r = compute_metrics::<Ratio<u64>>(ConfusionMatrix::new(1, 1, 1, 1));
        let half = Some(Ratio::new(1, 2));
        assert_eq!(
            [r.accuracy.value(), r.precision.value(), r.recall.value(), r.f1.value()],
            [half; 4]
        );
    }

    #[test]
    fn empty_matrix_is_all_absent() {
        let r = compute_metrics::<f32>(ConfusionMatrix::default());
        for m in [&r.accuracy, &r.precision, &r.recall, &r.f1] {
            assert!(m.is_absent());
        }
        let doc = serde_json::to_value(&r).unwrap();
        assert!(doc["accuracy"].is_null());
        assert!(doc["accuracy_reason"].as_str().unwrap().contains("zero denominator"));
        assert_eq!(doc["matrix"]["fn"], 0);
    }

    #[test]
    fn zero_tp_with_fp_and_fn_has_absent_f1() {
        let r = compute_metrics::<f64>(ConfusionMatrix::new(0, 0, 1, 1));
        assert_eq!(r.precision.value(), Some(0.0));
        assert_eq!(r.recall.value(), Some(0.0));
        assert!(r.f1.is_absent());
    }

    #[test]
    fn document_round_trip() {
        let r = compute_metrics::<f64>(ConfusionMatrix::new(3, 1, 0, 0));
        let back: MetricsReport<f64> = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn labels_csv() {
        let labels = parse_labels("report_id,ground_truth\nR1,approve\nR2, Reject\n".as_bytes()).unwrap();
        assert_eq!(labels["R1"], Verdict::Approve);
        assert_eq!(labels["R2"], Verdict::Reject);
        let mut buf = Vec::new();
        write_labels(&mut buf, labels.iter().map(|(k, v)| (k.as_str(), *v))).unwrap();
        assert_eq!(parse_labels(buf.as_slice()).unwrap(), labels);

        for bad in [
            "id,truth\nR1,approve\n",
            "report_id,ground_truth\nR1,maybe\n",
            "report_id,ground_truth\nR1,approve\nR1,reject\n",
            "report_id,ground_truth\n,approve\n",
        ] {
            assert!(
                matches!(parse_labels(bad.as_bytes()), Err(EvalError::InvalidLabels { .. })),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn class_counts_use_floor_with_remainder_to_whitelisted() {
        let mut spec = CorpusSpec::new(1000, 1);
        spec.fraction_defective = 0.1;
        spec.fraction_blacklisted = 0.033;
        spec.fraction_unknown = 0.2;
        let c = spec.class_counts();
        assert_eq!(c[&CaseClass::Defective], 100);
        assert_eq!(c[&CaseClass::Blacklisted], 33);
        assert_eq!(c[&CaseClass::Unknown], 200);
        assert_eq!(c[&CaseClass::Whitelisted], 667);
    }

    #[test]
    fn invalid_specs() {
        let store = PolicyStore::seed();
        let mut spec = CorpusSpec::new(0, 1);
        assert!(matches!(generate_corpus(&spec, &store), Err(EvalError::InvalidSpec(_))));
        spec.count = 10;
        spec.fraction_unknown = 0.9;
        assert!(matches!(generate_corpus(&spec, &store), Err(EvalError::InvalidSpec(_))));
        spec.fraction_unknown = -0.1;
        assert!(matches!(generate_corpus(&spec, &store), Err(EvalError::InvalidSpec(_))));
        let spec = CorpusSpec::new(10, 1);
        assert!(matches!(
            generate_corpus(&spec, &PolicyStore::new()),
            Err(EvalError::InvalidSpec(_))
        ));
    }

    #[test]
    fn generated_receipts_parse_and_agree_with_class() {
        let store = PolicyStore::seed();
        let cases = generate_corpus(&CorpusSpec::new(200, 3), &store).unwrap();
        assert_eq!(cases.len(), 200);
        for case in &cases {
            let x = crate::receipt::parse_receipt(&case.submission.receipt).unwrap();
            assert!(x.warnings.is_empty(), "{:?}", x.warnings);
            assert_eq!(x.total(), Some(case.submission.declared_total));
            let listed = x.items.iter().filter(|i| store.lookup(&i.name).is_some()).count();
            match case.class {
                CaseClass::Unknown => {
                    assert_eq!(listed + case.resolutions.len(), x.items.len());
                    assert_eq!(case.resolutions.len(), 1);
                }
                _ => assert_eq!(listed, x.items.len()),
            }
        }
    }
}
