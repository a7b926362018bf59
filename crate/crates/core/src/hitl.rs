//! Human review of escalated items and write-back of reviewer decisions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisor::AdvisorRecommendation;
use crate::classifier::{ItemStatus, ItemVerdict};
use crate::policy::{normalize_name, ListKind, PolicyEntry, PolicyError, PolicyStore, Provenance, ProvenanceSource};
use crate::receipt::LineItem;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("no escalated items to review")]
    EmptyEscalation,
    #[error("report {0:?} already has a pending review task")]
    DuplicateTaskForReport(String),
    #[error("task {0} not found")]
    TaskNotFound(TaskId),
    #[error("task {0} was already decided")]
    AlreadyDecided(TaskId),
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Review task identifier, rendered as `T<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

impl FromStr for TaskId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('T')
            .and_then(|n| n.parse().ok())
            .map(TaskId)
            .ok_or_else(|| format!("invalid task id {s:?}"))
    }
}

impl Serialize for TaskId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalatedItem {
    pub item: LineItem,
    pub verdict: ItemVerdict,
    pub recommendation: AdvisorRecommendation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskState {
    Pending,
    Decided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReviewAction {
    Approve,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemResolution {
    pub original_name: String,
    pub category: String,
    #[serde(default)]
    pub save_synonyms: bool,
    #[serde(default)]
    pub synonyms: BTreeSet<String>,
    #[serde(default)]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub action: ReviewAction,
    #[serde(default)]
    pub item_resolutions: Vec<ItemResolution>,
    pub reviewer: String,
    #[serde(default)]
    pub comment: Option<String>,
    pub decided_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub decision_ref: TaskId,
    pub store_version_before: u64,
    pub store_version_after: u64,
    pub entries_written: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_id: TaskId,
    pub report_id: String,
    pub created_at: DateTime<Utc>,
    pub items: Vec<EscalatedItem>,
    pub state: TaskState,
    pub decision: Option<ReviewDecision>,
    #[serde(default)]
    pub feedback: Option<FeedbackRecord>,
}

impl ReviewTask {
    /// The similar-word proposal shown to the reviewer for an item.
    pub fn proposed_synonyms(&self, name: &str) -> BTreeSet<String> {
        self.items
            .iter()
            .filter(|i| i.item.name == name)
            .filter_map(|i| i.recommendation.matched_similar.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFilter {
    #[serde(default)]
    pub state: Option<TaskState>,
    #[serde(default)]
    pub report_id: Option<String>,
}

/// Result of applying a decision: the decided task, the store after
/// write-back, the feedback record, and the entries that were upserted.
#[derive(Debug, Clone)]
pub struct DecisionOutcome {
    pub task: ReviewTask,
    pub store: PolicyStore,
    pub feedback: FeedbackRecord,
    pub entries: Vec<PolicyEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueue {
    tasks: BTreeMap<TaskId, ReviewTask>,
}

impl ReviewQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&self) -> TaskId {
        TaskId(self.tasks.keys().next_back().map_or(1, |t| t.0 + 1))
    }

    /// Builds a pending task without inserting it.
    pub fn prepare_task(
        &self,
        report_id: &str,
        escalated: Vec<EscalatedItem>,
        now: DateTime<Utc>,
    ) -> Result<ReviewTask, ReviewError> {
        if escalated.is_empty() {
            return Err(ReviewError::EmptyEscalation);
        }
        if self
            .tasks
            .values()
            .any(|t| t.report_id == report_id && t.state == TaskState::Pending)
        {
            return Err(ReviewError::DuplicateTaskForReport(report_id.to_string()));
        }
        Ok(ReviewTask {
            task_id: self.next_id(),
            report_id: report_id.to_string(),
            created_at: now,
            items: escalated,
            state: TaskState::Pending,
            decision: None,
            feedback: None,
        })
    }

    pub fn insert(&mut self, task: ReviewTask) {
        self.tasks.insert(task.task_id, task);
    }

    pub fn create_task(
        &mut self,
        report_id: &str,
        escalated: Vec<EscalatedItem>,
        now: DateTime<Utc>,
    ) -> Result<&ReviewTask, ReviewError> {
        let task = self.prepare_task(report_id, escalated, now)?;
        let id = task.task_id;
        self.insert(task);
        Ok(&self.tasks[&id])
    }

    pub fn get(&self, id: TaskId) -> Option<&ReviewTask> {
        self.tasks.get(&id)
    }

    /// Tasks matching `filter`, oldest first, ties broken by id.
    pub fn list_tasks(&self, filter: &TaskFilter) -> Vec<&ReviewTask> {
        let mut out: Vec<&ReviewTask> = self
            .tasks
            .values()
            .filter(|t| filter.state.is_none_or(|s| t.state == s))
            .filter(|t| filter.report_id.as_deref().is_none_or(|r| t.report_id == r))
            .collect();
        out.sort_by_key(|t| (t.created_at, t.task_id));
        out
    }

    /// Validates and applies a decision against a copy of `store`. Nothing in
    /// the queue changes until [`ReviewQueue::commit`] is called with the
    /// outcome, so the task transition and store write-back land together.
    pub fn evaluate_decision(
        &self,
        task_id: TaskId,
        decision: ReviewDecision,
        store: &PolicyStore,
    ) -> Result<DecisionOutcome, ReviewError> {
        let task = self.tasks.get(&task_id).ok_or(ReviewError::TaskNotFound(task_id))?;
        if task.state == TaskState::Decided {
            return Err(ReviewError::AlreadyDecided(task_id));
        }
        let decision = validate_decision(task, decision)?;

        let mut next = store.clone();
        let before = store.version();
        let mut entries = Vec::new();
        if decision.action == ReviewAction::Approve {
            for res in &decision.item_resolutions {
                let synonyms = if res.save_synonyms { res.synonyms.clone() } else { BTreeSet::new() };
                let entry = PolicyEntry::new(
                    res.original_name.clone(),
                    Some(res.category.clone()),
                    ListKind::Whitelist,
                    synonyms,
                    Provenance {
                        source: ProvenanceSource::Hitl,
                        reviewer: Some(decision.reviewer.clone()),
                        timestamp: decision.decided_at,
                    },
                    res.description.clone(),
                )?;
                let written = next.upsert_entry(entry)?.clone();
                entries.push(written);
            }
        }
        let feedback = FeedbackRecord {
            decision_ref: task_id,
            store_version_before: before,
            store_version_after: next.version(),
            entries_written: entries.iter().map(|e| e.normalized_key.clone()).collect(),
        };
        let mut task = task.clone();
        task.state = TaskState::Decided;
        task.decision = Some(decision);
        task.feedback = Some(feedback.clone());
        Ok(DecisionOutcome {
            task,
            store: next,
            feedback,
            entries,
        })
    }

    pub fn commit(&mut self, task: ReviewTask) {
        self.tasks.insert(task.task_id, task);
    }

    /// Applies a reviewer decision: on approval each resolution becomes a
    /// whitelist entry; on rejection the store is untouched.
    pub fn submit_decision(
        &mut self,
        task_id: TaskId,
        decision: ReviewDecision,
        store: &PolicyStore,
    ) -> Result<DecisionOutcome, ReviewError> {
        let outcome = self.evaluate_decision(task_id, decision, store)?;
        self.commit(outcome.task.clone());
        Ok(outcome)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &ReviewTask> {
        self.tasks.values()
    }
}

/// Enforces the decision invariants against the task. Empty synonym sets
/// with `save_synonyms` are filled from the task's proposal; names and
/// proposed synonyms cannot be edited by the reviewer.
fn validate_decision(task: &ReviewTask, mut decision: ReviewDecision) -> Result<ReviewDecision, ReviewError> {
    if decision.reviewer.trim().is_empty() {
        return Err(ReviewError::InvalidDecision("reviewer is required".into()));
    }
    let task_names: BTreeSet<String> = task.items.iter().map(|i| normalize_name(&i.item.name)).collect();
    for res in &mut decision.item_resolutions {
        if !task_names.contains(&normalize_name(&res.original_name)) {
            return Err(ReviewError::InvalidDecision(format!(
                "resolution for {:?} does not match any item in the task",
                res.original_name
            )));
        }
        if res.category.trim().is_empty() {
            return Err(ReviewError::InvalidDecision(format!(
                "resolution for {:?} has no category",
                res.original_name
            )));
        }
        let proposed = task.proposed_synonyms(&res.original_name);
        if res.save_synonyms {
            if res.synonyms.is_empty() {
                res.synonyms = proposed;
            } else if !res.synonyms.is_subset(&proposed) {
                return Err(ReviewError::InvalidDecision(format!(
                    "similar words for {:?} cannot be modified",
                    res.original_name
                )));
            }
        } else if !res.synonyms.is_empty() {
            return Err(ReviewError::InvalidDecision(format!(
                "synonyms given for {:?} without save_synonyms",
                res.original_name
            )));
        }
    }
    if decision.action == ReviewAction::Approve {
        for item in task.items.iter().filter(|i| i.verdict.status == ItemStatus::Unknown) {
            let key = normalize_name(&item.item.name);
            if !decision
                .item_resolutions
                .iter()
                .any(|r| normalize_name(&r.original_name) == key)
            {
                return Err(ReviewError::InvalidDecision(format!(
                    "approval needs a category for {:?}",
                    item.item.name
                )));
            }
        }
    }
    Ok(decision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advisor::{advise_stub, AdvisorQuery, Thresholds};
    use crate::classifier::{classify_item, ClassifierOptions};
    use chrono::TimeZone;

    fn at(min: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 3, 25, 10, min, 0).unwrap()
    }

    fn escalation(store: &PolicyStore, name: &str) -> EscalatedItem {
        let item = LineItem::new(name, 2, 1500, 3000);
        let account = store.account_policy("53410198").unwrap();
        let verdict = classify_item(&item, account, store, ClassifierOptions::default());
        let q = AdvisorQuery::new(name, "53410198", "snacks", store).unwrap();
        let recommendation = advise_stub(&q, store, Thresholds::default()).unwrap();
        EscalatedItem { item, verdict, recommendation }
    }

    fn approve(name: &str, save: bool) -> ReviewDecision {
        ReviewDecision {
            action: ReviewAction::Approve,
            item_resolutions: vec![ItemResolution {
                original_name: name.into(),
                category: "Food".into(),
                save_synonyms: save,
                synonyms: BTreeSet::new(),
                description: Some("It is a type of coffee".into()),
            }],
            reviewer: "finance".into(),
            comment: None,
            decided_at: at(30),
        }
    }

    #[test]
    fn create_and_duplicate() {
        let store = PolicyStore::seed();
        let mut q = ReviewQueue::new();
        let task = q.create_task("R1", vec![escalation(&store, "Simply Black")], at(0)).unwrap();
        assert_eq!(task.state, TaskState::Pending);
        assert_eq!(task.items.len(), 1);
        assert_eq!(task.task_id.to_string(), "T1");
        assert!(matches!(
            q.create_task("R1", vec![escalation(&store, "Simply Black")], at(1)),
            Err(ReviewError::DuplicateTaskForReport(_))
        ));
        assert!(matches!(q.create_task("R2", vec![], at(1)), Err(ReviewError::EmptyEscalation)));
    }

    #[test]
    fn list_ordering_and_filter() {
        let store = PolicyStore::seed();
        let mut q = ReviewQueue::new();
        assert!(q.list_tasks(&TaskFilter::default()).is_empty());
        q.create_task("R2", vec![escalation(&store, "a thing")], at(5)).unwrap();
        q.create_task("R1", vec![escalation(&store, "b thing")], at(1)).unwrap();
        let ids: Vec<_> = q.list_tasks(&TaskFilter::default()).iter().map(|t| t.report_id.clone()).collect();
        assert_eq!(ids, vec!["R1", "R2"]);

        let rej = ReviewDecision {
            action: ReviewAction::Reject,
            item_resolutions: vec![],
            reviewer: "f".into(),
            comment: Some("no".into()),
            decided_at: at(9),
        };
        q.submit_decision(TaskId(2), rej, &store).unwrap();
        let decided = q.list_tasks(&TaskFilter {
            state: Some(TaskState::Decided),
            report_id: None,
        });
        assert_eq!(decided.len(), 1);
        assert_eq!(decided[0].report_id, "R1");
    }

    #[test]
    fn approve_writes_back_and_replay_is_refused() {
        let store = PolicyStore::seed();
        let mut q = ReviewQueue::new();
        q.create_task("R1", vec![escalation(&store, "Simply Black")], at(0)).unwrap();
        let out = q.submit_decision(TaskId(1), approve("Simply Black", true), &store).unwrap();
        assert_eq!(out.feedback.store_version_before, store.version());
        assert_eq!(out.feedback.store_version_after, store.version() + 1);
        assert_eq!(out.feedback.entries_written, vec!["simply black".to_string()]);
        let hit = out.store.lookup("Simply Black").unwrap();
        assert!(hit.entry.synonyms.contains("Simply Smooth Black"));
        assert_eq!(hit.entry.reason.as_deref(), Some("It is a type of coffee"));

        let account = out.store.account_policy("53410198").unwrap();
        let v = classify_item(&LineItem::new("Simply Black", 1, 1, 1), account, &out.store, Default::default());
        assert_eq!(v.status, ItemStatus::Allowed);

        let again = q.submit_decision(TaskId(1), approve("Simply Black", true), &out.store);
        assert!(matches!(again, Err(ReviewError::AlreadyDecided(_))));
        assert!(matches!(
            q.submit_decision(TaskId(99), approve("x", false), &store),
            Err(ReviewError::TaskNotFound(_))
        ));
    }

    #[test]
    fn reject_leaves_store() {
        let store = PolicyStore::seed();
        let mut q = ReviewQueue::new();
        q.create_task("R1", vec![escalation(&store, "Simply Black")], at(0)).unwrap();
        let mut d = approve("Simply Black", false);
        d.action = ReviewAction::Reject;
        let out = q.submit_decision(TaskId(1), d, &store).unwrap();
        assert_eq!(out.store, store);
        assert!(out.feedback.entries_written.is_empty());
        assert_eq!(q.get(TaskId(1)).unwrap().state, TaskState::Decided);
    }

    #[test]
    fn approval_requires_every_unknown_resolved() {
        let store = PolicyStore::seed();
        let mut q = ReviewQueue::new();
        q.create_task("R1", vec![escalation(&store, "Simply Black")], at(0)).unwrap();
        let mut d = approve("Simply Black", false);
        d.item_resolutions.clear();
        assert!(matches!(
            q.submit_decision(TaskId(1), d, &store),
            Err(ReviewError::InvalidDecision(_))
        ));
        assert_eq!(q.get(TaskId(1)).unwrap().state, TaskState::Pending);
    }

    #[test]
    fn synonyms_cannot_be_edited() {
        let store = PolicyStore::seed();
        let mut q = ReviewQueue::new();
        q.create_task("R1", vec![escalation(&store, "Simply Black")], at(0)).unwrap();
        let mut d = approve("Simply Black", true);
        d.item_resolutions[0].synonyms.insert("Something Else".into());
        assert!(matches!(
            q.submit_decision(TaskId(1), d, &store),
            Err(ReviewError::InvalidDecision(_))
        ));
        let mut d = approve("Simply Black", false);
        d.item_resolutions[0].synonyms.insert("Simply Smooth Black".into());
        assert!(q.submit_decision(TaskId(1), d, &store).is_err());
    }

    #[test]
    fn conflicting_category_leaves_task_pending() {
        let mut store = PolicyStore::seed();
        store
            .upsert_entry(PolicyEntry::whitelist("Simply Black", "catering", Provenance {
                source: ProvenanceSource::Seed,
                reviewer: None,
                timestamp: at(0),
            }).unwrap())
            .unwrap();
        let mut q = ReviewQueue::new();
        let mut esc = escalation(&PolicyStore::seed(), "Simply Black");
        esc.verdict.status = ItemStatus::Unknown;
        q.create_task("R1", vec![esc], at(0)).unwrap();
        let err = q.submit_decision(TaskId(1), approve("Simply Black", false), &store).unwrap_err();
        assert!(matches!(err, ReviewError::Policy(PolicyError::ConflictingCategory { .. })));
        assert_eq!(q.get(TaskId(1)).unwrap().state, TaskState::Pending);
    }

    #[test]
    fn task_id_text_form() {
        assert_eq!("T12".parse::<TaskId>().unwrap(), TaskId(12));
        assert!("12".parse::<TaskId>().is_err());
        assert_eq!(serde_json::to_string(&TaskId(3)).unwrap(), "\"T3\"");
    }
}
