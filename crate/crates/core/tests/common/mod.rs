//! Property definitions shared by the `properties` and `acceptance` targets.
//!
//! Each `check_*` takes one generated input and fails with a
//! `TestCaseError`, so it can run under `proptest!` or a hand-driven
//! `TestRunner`.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use chrono::{TimeZone, Utc};
use num_rational::Ratio;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use expenseflow::advisor::{similarity, StubAdvisor};
use expenseflow::classifier::{classify_item, ClassifierOptions};
use expenseflow::evaluation::{build_confusion, compute_metrics, ConfusionMatrix, LabeledOutcome, MetricsReport};
use expenseflow::hitl::TaskFilter;
use expenseflow::pipeline::{Ledger, PipelineSettings, RejectionClass};
use expenseflow::policy::{ListKind, PolicyEntry, Provenance, ProvenanceSource};
use expenseflow::receipt::LineItem;
use expenseflow::*;

pub const FOOD_ACCOUNT: &str = "53410198";

/// Plain dynamic-programming edit distance over chars.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn provenance() -> Provenance {
    Provenance {
        source: ProvenanceSource::Hitl,
        reviewer: Some("prop".into()),
        timestamp: Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap(),
    }
}

pub fn any_text() -> impl Strategy<Value = String> {
    prop_oneof![
        ".{0,24}",
        "[A-Za-z0-9 ,.()\\-]{0,24}",
        "[ａ-ｚＡ-Ｚ０-９　a-z]{0,12}",
    ]
}

const WORDS: &[&str] = &["cafe", "latte", "black", "simply", "ring", "gold", "paper", "pen", "chip", "tea"];
const CATEGORIES: &[&str] = &["Food", "consumables", "catering"];

/// Short names over a small vocabulary so collisions are common, with case
/// and punctuation noise that normalization should erase.
pub fn vocab_name() -> impl Strategy<Value = String> {
    (
        proptest::sample::subsequence(WORDS, 1..=2),
        any::<bool>(),
        prop_oneof![Just(""), Just("!"), Just(" "), Just(")")],
    )
        .prop_map(|(words, upper, punct)| {
            let name = words.join(" ");
            let name = if upper { name.to_uppercase() } else { name };
            format!("{name}{punct}")
        })
}

#[derive(Debug, Clone)]
pub struct EntrySpec {
    pub name: String,
    pub black: bool,
    pub category: &'static str,
    pub synonyms: Vec<String>,
}

pub fn entry_spec() -> impl Strategy<Value = EntrySpec> {
    (
        vocab_name(),
        proptest::bool::weighted(0.3),
        proptest::sample::select(CATEGORIES),
        proptest::collection::vec(vocab_name(), 0..=2),
    )
        .prop_map(|(name, black, category, synonyms)| EntrySpec {
            name,
            black,
            category,
            synonyms,
        })
}

/// A store holding the seed accounts and up to 20 random entries.
pub fn build_store(specs: &[EntrySpec]) -> PolicyStore {
    let seed = PolicyStore::seed();
    let mut store = PolicyStore::from_parts(1, seed.accounts().to_vec(), Vec::new()).unwrap();
    for s in specs {
        let (category, list, reason) = if s.black {
            (None, ListKind::Blacklist, Some("prohibited".to_string()))
        } else {
            (Some(s.category.to_string()), ListKind::Whitelist, None)
        };
        if let Ok(entry) = PolicyEntry::new(s.name.clone(), category, list, s.synonyms.clone(), provenance(), reason) {
            // Category conflicts are legitimate refusals; skip them.
            let _ = store.upsert_entry(entry);
        }
    }
    store
}

pub fn check_normalization_idempotent(s: &str) -> Result<(), TestCaseError> {
    let once = normalize_name(s);
    prop_assert_eq!(normalize_name(&once), once.clone());
    prop_assert!(!once.starts_with(' ') && !once.ends_with(' ') && !once.contains("  "));
    Ok(())
}

pub fn check_similarity(a: &str, b: &str) -> Result<(), TestCaseError> {
    let ab = similarity(a, b);
    prop_assert!((0.0..=1.0).contains(&ab));
    prop_assert_eq!(ab, similarity(b, a));
    prop_assert_eq!(similarity(a, a), 1.0);
    let (na, nb) = (normalize_name(a), normalize_name(b));
    let longest = na.chars().count().max(nb.chars().count());
    let expected = if longest == 0 {
        1.0
    } else {
        1.0 - edit_distance(&na, &nb) as f64 / longest as f64
    };
    prop_assert!((ab - expected).abs() < 1e-12, "{ab} vs {expected}");
    Ok(())
}

/// A name on both lists is always prohibited, whichever list it was added to
/// first and whether it matches by name or synonym.
pub fn check_blacklist_precedence(name: &str, via_synonym: bool, black_first: bool) -> Result<(), TestCaseError> {
    if normalize_name(name).is_empty() {
        return Ok(());
    }
    let white = PolicyEntry::whitelist(name, "Food", provenance()).unwrap();
    let black = if via_synonym {
        PolicyEntry::new(
            format!("{name} deluxe"),
            None,
            ListKind::Blacklist,
            [name.to_string()],
            provenance(),
            Some("no".into()),
        )
        .unwrap()
    } else {
        PolicyEntry::blacklist(name, "no", provenance()).unwrap()
    };
    let mut store = build_store(&[]);
    let order = if black_first { [black, white] } else { [white, black] };
    for e in order {
        store.upsert_entry(e).unwrap();
    }
    let hit = store.lookup(name).unwrap();
    prop_assert_eq!(hit.entry.list, ListKind::Blacklist);
    let account = store.account_policy(FOOD_ACCOUNT).unwrap();
    let v = classify_item(&LineItem::new(name, 1, 100, 100), account, &store, ClassifierOptions::default());
    prop_assert_eq!(v.status, ItemStatus::Prohibited);
    Ok(())
}

/// Reference classifier: linear scan over entries with the documented
/// precedence, no index.
fn brute_force(item: &str, account: &str, store: &PolicyStore, strict: bool) -> (ItemStatus, Option<String>) {
    let key = normalize_name(item);
    let names = |e: &PolicyEntry| normalize_name(&e.name) == key;
    let synonyms = |e: &PolicyEntry| e.synonyms.iter().any(|s| normalize_name(s) == key);
    if store
        .entries()
        .iter()
        .any(|e| e.list == ListKind::Blacklist && (names(e) || synonyms(e)))
    {
        return (ItemStatus::Prohibited, None);
    }
    let white: Vec<&PolicyEntry> = store.entries().iter().filter(|e| e.list == ListKind::Whitelist).collect();
    let hit = white.iter().find(|e| names(e)).or_else(|| white.iter().find(|e| synonyms(e)));
    match hit {
        None => (ItemStatus::Unknown, None),
        Some(e) => {
            let category = e.category.clone();
            let allowed = store
                .account_policy(account)
                .is_some_and(|a| category.as_deref().is_some_and(|c| a.allows(c)));
            if allowed {
                (ItemStatus::Allowed, category)
            } else if strict {
                (ItemStatus::Prohibited, category)
            } else {
                (ItemStatus::Unknown, None)
            }
        }
    }
}

pub fn check_classifier_matches_scan(
    specs: &[EntrySpec],
    items: &[String],
    account: &str,
    strict: bool,
) -> Result<(), TestCaseError> {
    let store = build_store(specs);
    prop_assert!(store.entries().len() <= 20);
    let policy = store.account_policy(account).unwrap();
    let options = ClassifierOptions { strict_category: strict };
    for item in items {
        let line = LineItem::new(item.as_str(), 1, 100, 100);
        let first = classify_item(&line, policy, &store, options);
        let again = classify_item(&line, policy, &store, options);
        prop_assert_eq!(&first, &again);
        let (status, category) = brute_force(item, account, &store, strict);
        prop_assert_eq!(first.status, status, "item {:?}", item);
        if status == ItemStatus::Allowed {
            prop_assert_eq!(first.category, category);
        }
    }
    Ok(())
}

pub fn stub_pipeline() -> Pipeline {
    Pipeline::in_memory(PolicyStore::seed(), PipelineSettings::default(), Box::new(StubAdvisor::default()))
}

pub fn submission(id: &str, items: &[&str], merchant_conf: u8, declared_delta: i64) -> ExpenseSubmission {
    let mut text = String::from("%RECEIPT 1\nmerchant=Mart\ndate=2025-03-14\n");
    let total = 1000 * items.len() as i64;
    text.push_str(&format!("total={total}\nconf merchant={merchant_conf}\n"));
    for item in items {
        text.push_str(&format!("item={item}|1|1000|1000\n"));
    }
    ExpenseSubmission {
        report_id: id.into(),
        user: "u".into(),
        account_code: FOOD_ACCOUNT.into(),
        description: String::new(),
        declared_total: total + declared_delta,
        receipt: ReceiptDocument::new(id, text),
    }
}

pub fn approval(name: &str, category: &str, save: bool) -> ReviewDecision {
    ReviewDecision {
        action: ReviewAction::Approve,
        item_resolutions: vec![ItemResolution {
            original_name: name.into(),
            category: category.into(),
            save_synonyms: save,
            synonyms: BTreeSet::new(),
            description: None,
        }],
        reviewer: "prop".into(),
        comment: None,
        decided_at: Utc::now(),
    }
}

/// Names the seed store does not know.
pub fn unknown_name() -> impl Strategy<Value = String> {
    "[a-z]{3,8}( [a-z]{2,8})?".prop_filter("must be unknown to the seed store", |n| {
        PolicyStore::seed().lookup(n).is_none()
    })
}

/// Approving X as C makes X Allowed under every account that allows C, and
/// an identical resubmission needs no review.
pub fn check_feedback_monotonic(name: &str, save: bool) -> Result<(), TestCaseError> {
    let mut p = stub_pipeline();
    p.submit(submission("R1", &[name], 100, 0)).unwrap();
    prop_assert_eq!(p.run_to_completion("R1").unwrap(), Stage::PendingReview);
    let task = p.list_tasks(&TaskFilter::default())[0].task_id;
    p.submit_decision(task, approval(name, "Food", save)).unwrap();
    let line = LineItem::new(name, 1, 1000, 1000);
    for account in p.store().accounts().iter().filter(|a| a.allows("Food")) {
        let v = classify_item(&line, account, p.store(), ClassifierOptions::default());
        prop_assert_eq!(v.status, ItemStatus::Allowed);
    }
    let tasks_before = p.list_tasks(&TaskFilter::default()).len();
    p.submit(submission("R2", &[name], 100, 0)).unwrap();
    prop_assert_eq!(p.run_to_completion("R2").unwrap(), Stage::Exported);
    prop_assert_eq!(p.list_tasks(&TaskFilter::default()).len(), tasks_before);
    // Every written key resolves.
    let decided = p.task(task).unwrap();
    for key in &decided.feedback.as_ref().unwrap().entries_written {
        prop_assert!(p.store().lookup(key).is_some());
    }
    Ok(())
}

/// Replaying a decision is refused and leaves the store as the first
/// application left it.
pub fn check_decision_idempotent(name: &str, replays: usize) -> Result<(), TestCaseError> {
    let mut p = stub_pipeline();
    p.submit(submission("R1", &[name], 100, 0)).unwrap();
    p.run_to_completion("R1").unwrap();
    let task = p.list_tasks(&TaskFilter::default())[0].task_id;
    let before = p.store().version();
    p.submit_decision(task, approval(name, "Food", true)).unwrap();
    let after = p.store().version();
    prop_assert_eq!(after, before + 1);
    let exports = p.exports().len();
    for _ in 0..replays {
        let err = p.submit_decision(task, approval(name, "Food", true)).unwrap_err();
        prop_assert_eq!(err.code(), "already_decided");
        prop_assert_eq!(p.store().version(), after);
    }
    prop_assert_eq!(p.exports().len(), exports);
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ReportOp {
    pub kind: u8,
    pub steps: u8,
    pub decide: Option<bool>,
}

pub fn report_ops() -> impl Strategy<Value = Vec<ReportOp>> {
    proptest::collection::vec(
        (0u8..5, 0u8..8, proptest::option::of(any::<bool>())).prop_map(|(kind, steps, decide)| ReportOp {
            kind,
            steps,
            decide,
        }),
        1..8,
    )
}

/// Drives a random mix of reports part-way through the pipeline and checks
/// that folding the event log rebuilds exactly the live state.
pub fn check_replay(ops: &[ReportOp]) -> Result<(), TestCaseError> {
    let mut p = stub_pipeline();
    for (i, op) in ops.iter().enumerate() {
        let id = format!("R{i}");
        let unknown = format!("mystery snack {}", i % 3);
        let s = match op.kind {
            0 => submission(&id, &["Americano", "Cafe latte"], 100, 0),
            1 => submission(&id, &["Americano", "gift certificate"], 100, 0),
            2 => submission(&id, &[unknown.as_str()], 100, 0),
            3 => submission(&id, &["Americano"], 20, 0),
            _ => submission(&id, &["Americano"], 100, 7),
        };
        p.submit(s).unwrap();
        for _ in 0..op.steps {
            if p.advance(&id).is_err() {
                break;
            }
        }
        if p.report(&id).unwrap().stage == Stage::PendingReview {
            if let Some(approve) = op.decide {
                let task = p.report(&id).unwrap().task_id.unwrap();
                let decision = if approve {
                    approval(&unknown, "Food", true)
                } else {
                    ReviewDecision {
                        action: ReviewAction::Reject,
                        item_resolutions: vec![],
                        reviewer: "prop".into(),
                        comment: None,
                        decided_at: Utc::now(),
                    }
                };
                p.submit_decision(task, decision).unwrap();
            }
        }
    }
    let replayed = Ledger::replay(p.events()).unwrap();
    prop_assert_eq!(&replayed, p.ledger());

    // The persisted form replays to the same stages.
    let text: String = p
        .events()
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect();
    let parsed: Vec<expenseflow::pipeline::Event> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let from_disk = Ledger::replay(&parsed).unwrap();
    let stages = |l: &Ledger| l.reports.iter().map(|(k, r)| (k.clone(), r.stage)).collect::<BTreeMap<_, _>>();
    prop_assert_eq!(stages(&from_disk), stages(p.ledger()));

    // Exported once at most, and approvals are sound.
    let mut exported = BTreeSet::new();
    for record in p.exports() {
        prop_assert!(exported.insert(record.decision.report_id.clone()));
        let d = &record.decision;
        if d.verdict == Verdict::Approve {
            prop_assert!(d.item_results.iter().all(|r| r.result == ItemStatus::Allowed));
            let report = p.report(&d.report_id).unwrap();
            prop_assert!(!report.gate.as_ref().unwrap().is_defective());
            prop_assert_eq!(report.amount_matches, Some(true));
        } else {
            prop_assert!(!d.reasons.is_empty());
        }
    }
    Ok(())
}

pub fn verdict() -> impl Strategy<Value = Verdict> {
    prop_oneof![Just(Verdict::Approve), Just(Verdict::Reject)]
}

pub fn outcomes() -> impl Strategy<Value = Vec<LabeledOutcome>> {
    proptest::collection::vec((verdict(), verdict()), 0..60).prop_map(|pairs| {
        pairs
            .into_iter()
            .enumerate()
            .map(|(i, (truth, system))| LabeledOutcome {
                report_id: format!("R{i}"),
                ground_truth: truth,
                system_verdict: system,
                rejection_reason_class: (system == Verdict::Reject).then_some(RejectionClass::Policy),
            })
            .collect()
    })
}

pub fn check_confusion_totals(outcomes: &[LabeledOutcome], rotate: usize) -> Result<(), TestCaseError> {
    let m = build_confusion(outcomes).unwrap();
    prop_assert_eq!(m.total(), outcomes.len() as u64);
    let mut shuffled = outcomes.to_vec();
    if !shuffled.is_empty() {
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
    }
    prop_assert_eq!(build_confusion(&shuffled).unwrap(), m);
    Ok(())
}

pub fn matrix() -> impl Strategy<Value = ConfusionMatrix> {
    (0u64..2000, 0u64..2000, 0u64..2000, 0u64..2000).prop_map(|(a, b, c, d)| ConfusionMatrix::new(a, b, c, d))
}

pub fn check_scale_invariance(m: ConfusionMatrix, k: u64) -> Result<(), TestCaseError> {
    let exact = compute_metrics::<Ratio<u64>>(m);
    prop_assert_eq!(compute_metrics::<Ratio<u64>>(m.scaled(k)).f1, exact.f1.clone());
    let base: MetricsReport<f64> = compute_metrics(m);
    let scaled: MetricsReport<f64> = compute_metrics(m.scaled(k));
    for (a, b) in [
        (&base.accuracy, &scaled.accuracy),
        (&base.precision, &scaled.precision),
        (&base.recall, &scaled.recall),
        (&base.f1, &scaled.f1),
    ] {
        match (a.value(), b.value()) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (None, None) => {}
            _ => prop_assert!(false, "absence changed under scaling"),
        }
    }
    let e = compute_metrics::<Ratio<u64>>(m.scaled(k));
    prop_assert_eq!(e.accuracy, exact.accuracy);
    prop_assert_eq!(e.precision, exact.precision);
    prop_assert_eq!(e.recall, exact.recall);
    Ok(())
}

pub fn check_absent_iff_zero_denominator(m: ConfusionMatrix) -> Result<(), TestCaseError> {
    let r: MetricsReport<f64> = compute_metrics(m);
    prop_assert_eq!(r.accuracy.is_absent(), m.total() == 0);
    prop_assert_eq!(r.precision.is_absent(), m.tp + m.fp == 0);
    prop_assert_eq!(r.recall.is_absent(), m.tp + m.fn_ == 0);
    prop_assert_eq!(r.f1.is_absent(), m.tp == 0);
    for metric in [&r.accuracy, &r.precision, &r.recall, &r.f1] {
        if let Some(v) = metric.value() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
    if let (Some(p), Some(rc), Some(f1)) = (r.precision.value(), r.recall.value(), r.f1.value()) {
        prop_assert!((f1 - 2.0 * p * rc / (p + rc)).abs() < 1e-12);
    }
    if m.fp == 0 && m.tp > 0 {
        prop_assert_eq!(r.precision.value(), Some(1.0));
    }
    let doc = serde_json::to_value(&r).unwrap();
    for (name, metric) in [("accuracy", &r.accuracy), ("f1", &r.f1)] {
        prop_assert_eq!(doc[name].is_null(), metric.is_absent());
        prop_assert_eq!(doc.get(format!("{name}_reason")).is_some(), metric.is_absent());
    }
    Ok(())
}
