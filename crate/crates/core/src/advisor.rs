//! Exception handling for items the policy lists do not cover.
//!
//! An [`Advisor`] turns an [`AdvisorQuery`] into an [`AdvisorRecommendation`].
//! Two implementations ship: [`StubAdvisor`], a deterministic nearest-name
//! matcher over the policy store, and [`ExternalAdvisor`], a client for an
//! HTTP completion endpoint. Recommendations are advisory; nothing here
//! writes to the store.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use crate::policy::{normalize_name, ListKind, PolicyEntry, PolicyStore};

pub const DEFAULT_TAU_WHITE: f64 = 0.5;
pub const DEFAULT_TAU_BLACK: f64 = 0.5;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_PROMPT_TEMPLATE: &str = include_str!("../assets/advisor_prompt.txt");

pub const RATIONALE_UNAVAILABLE: &str = "advisor unavailable";
pub const RATIONALE_UNPARSEABLE: &str = "unparseable advisor reply";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AdvisorError {
    #[error("unknown account {0:?}")]
    UnknownAccount(String),
}

/// Normalized Levenshtein similarity in `[0, 1]`, computed on
/// [`normalize_name`] forms. Two empty names are identical.
pub fn similarity(a: &str, b: &str) -> f64 {
    let a = normalize_name(a);
    let b = normalize_name(b);
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(&a, &b) as f64 / longest as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigestEntry {
    pub name: String,
    pub category: Option<String>,
    pub synonyms: BTreeSet<String>,
}

impl From<&PolicyEntry> for DigestEntry {
    fn from(e: &PolicyEntry) -> Self {
        Self {
            name: e.name.clone(),
            category: e.category.clone(),
            synonyms: e.synonyms.clone(),
        }
    }
}

/// The slice of policy an advisor gets to see for one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDigest {
    pub allowed_categories: BTreeSet<String>,
    pub whitelist: Vec<DigestEntry>,
    pub blacklist: Vec<DigestEntry>,
}

impl PolicyDigest {
    pub fn for_account(store: &PolicyStore, account_code: &str) -> Option<Self> {
        let account = store.account_policy(account_code)?;
        Some(Self {
            allowed_categories: account.allowed_categories.clone(),
            whitelist: store.entries_on(ListKind::Whitelist).map(Into::into).collect(),
            blacklist: store.entries_on(ListKind::Blacklist).map(Into::into).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvisorQuery {
    pub item_name: String,
    pub account_code: String,
    pub description: String,
    pub policy_digest: PolicyDigest,
}

impl AdvisorQuery {
    pub fn new(
        item_name: &str,
        account_code: &str,
        description: &str,
        store: &PolicyStore,
    ) -> Result<Self, AdvisorError> {
        let policy_digest = PolicyDigest::for_account(store, account_code)
            .ok_or_else(|| AdvisorError::UnknownAccount(account_code.to_string()))?;
        Ok(Self {
            item_name: item_name.to_string(),
            account_code: account_code.to_string(),
            description: description.to_string(),
            policy_digest,
        })
    }

    /// Stable identifier for the query; identical queries share an id.
    pub fn query_id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("query serializes");
        hex::encode(&Sha256::digest(bytes)[..16])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Compliance {
    Yes,
    No,
    Unsure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisorRecommendation {
    pub item_name: String,
    pub recommended_category: Option<String>,
    pub recommended_account: Option<String>,
    pub compliant: Compliance,
    pub matched_similar: Option<String>,
    pub similarity: Option<f64>,
    pub rationale: String,
}

impl AdvisorRecommendation {
    pub fn unsure(item_name: &str, rationale: impl Into<String>) -> Self {
        Self {
            item_name: item_name.to_string(),
            recommended_category: None,
            recommended_account: None,
            compliant: Compliance::Unsure,
            matched_similar: None,
            similarity: None,
            rationale: rationale.into(),
        }
    }
}

pub trait Advisor: Send + Sync {
    fn name(&self) -> &str;

    /// Whether identical queries always produce identical recommendations.
    fn deterministic(&self) -> bool;

    /// Never fails: problems degrade to an `Unsure` recommendation.
    fn advise(&self, query: &AdvisorQuery, store: &PolicyStore) -> AdvisorRecommendation;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_white: f64,
    pub tau_black: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau_white: DEFAULT_TAU_WHITE,
            tau_black: DEFAULT_TAU_BLACK,
        }
    }
}

/// One comparable name: an entry's own name or one of its synonyms.
#[derive(Debug, Clone)]
pub struct Candidate<'a> {
    pub entry: &'a PolicyEntry,
    pub text: &'a str,
    pub normalized: String,
    pub score: f64,
}

/// Candidate order: higher similarity, then shorter normalized text, then
/// lexicographically smaller normalized text.
pub fn candidate_order(a: &Candidate<'_>, b: &Candidate<'_>) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.normalized.chars().count().cmp(&b.normalized.chars().count()))
        .then_with(|| a.normalized.cmp(&b.normalized))
}

fn best_candidate<'a>(store: &'a PolicyStore, list: ListKind, item: &str) -> Option<Candidate<'a>> {
    let item = normalize_name(item);
    store
        .entries_on(list)
        .flat_map(|entry| {
            entry.match_keys().map(move |(_, text, normalized)| (entry, text, normalized))
        })
        .map(|(entry, text, normalized)| Candidate {
            score: similarity(&item, &normalized),
            entry,
            text,
            normalized,
        })
        .min_by(candidate_order)
}

/// Nearest-name recommendation against the store's lists.
pub fn advise_stub(
    query: &AdvisorQuery,
    store: &PolicyStore,
    thresholds: Thresholds,
) -> Result<AdvisorRecommendation, AdvisorError> {
    let account = store
        .account_policy(&query.account_code)
        .ok_or_else(|| AdvisorError::UnknownAccount(query.account_code.clone()))?;
    let item = query.item_name.as_str();

    if let Some(black) = best_candidate(store, ListKind::Blacklist, item) {
        if black.score >= thresholds.tau_black {
            let reason = black
                .entry
                .reason
                .as_deref()
                .map(|r| format!(": {r}"))
                .unwrap_or_default();
            return Ok(AdvisorRecommendation {
                item_name: item.to_string(),
                recommended_category: None,
                recommended_account: None,
                compliant: Compliance::No,
                matched_similar: Some(black.text.to_string()),
                similarity: Some(black.score),
                rationale: format!(
                    "'{item}' resembles prohibited item '{}' (similarity {:.3}){reason}",
                    black.text, black.score
                ),
            });
        }
    }

    if let Some(white) = best_candidate(store, ListKind::Whitelist, item) {
        let category = white.entry.category.clone().unwrap_or_default();
        if white.score >= thresholds.tau_white {
            if account.allows(&category) {
                return Ok(AdvisorRecommendation {
                    item_name: item.to_string(),
                    recommended_category: Some(category.clone()),
                    recommended_account: Some(account.code.clone()),
                    compliant: Compliance::Yes,
                    matched_similar: Some(white.text.to_string()),
                    similarity: Some(white.score),
                    rationale: format!(
                        "'{item}' resembles allowed item '{}' (similarity {:.3}) in category {category}, \
                         which account {} ({}) allows",
                        white.text, white.score, account.code, account.name
                    ),
                });
            }
            return Ok(AdvisorRecommendation::unsure(
                item,
                format!(
                    "closest allowed item '{}' is in category {category}, which account {} does not allow",
                    white.text, account.code
                ),
            ));
        }
    }

    Ok(AdvisorRecommendation::unsure(
        item,
        "no sufficiently similar item in the policy lists",
    ))
}

#[derive(Debug, Clone, Default)]
pub struct StubAdvisor {
    pub thresholds: Thresholds,
}

impl StubAdvisor {
    pub fn new(thresholds: Thresholds) -> Self {
        Self { thresholds }
    }
}

impl Advisor for StubAdvisor {
    fn name(&self) -> &str {
        "stub"
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn advise(&self, query: &AdvisorQuery, store: &PolicyStore) -> AdvisorRecommendation {
        advise_stub(query, store, self.thresholds)
            .unwrap_or_else(|e| AdvisorRecommendation::unsure(&query.item_name, e.to_string()))
    }
}

/// Fills `{item}`, `{account}`, `{categories}`, `{whitelist}` and
/// `{blacklist}`. Lines starting with `#` are template comments and dropped.
pub fn render_prompt(template: &str, query: &AdvisorQuery) -> String {
    let digest = &query.policy_digest;
    let list = |entries: &[DigestEntry]| -> String {
        if entries.is_empty() {
            return "(none)".to_string();
        }
        entries
            .iter()
            .map(|e| {
                let mut line = format!("- {}", e.name);
                if let Some(c) = &e.category {
                    line.push_str(&format!(" [{c}]"));
                }
                if !e.synonyms.is_empty() {
                    let syn: Vec<&str> = e.synonyms.iter().map(String::as_str).collect();
                    line.push_str(&format!(" (similar: {})", syn.join(", ")));
                }
                line
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let categories = if digest.allowed_categories.is_empty() {
        "(none)".to_string()
    } else {
        digest.allowed_categories.iter().cloned().collect::<Vec<_>>().join(", ")
    };
    template
        .lines()
        .filter(|l| !l.starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n")
        .replace("{item}", &query.item_name)
        .replace("{account}", &query.account_code)
        .replace("{categories}", &categories)
        .replace("{whitelist}", &list(&digest.whitelist))
        .replace("{blacklist}", &list(&digest.blacklist))
}

#[derive(Debug, Serialize)]
struct ExternalRequest<'a> {
    query_id: String,
    prompt: String,
    policy_digest: &'a PolicyDigest,
}

#[derive(Debug, Deserialize)]
struct ExternalReply {
    #[serde(default)]
    recommend: Option<String>,
    #[serde(default)]
    account: Option<String>,
    #[serde(default)]
    compliant: Option<String>,
    #[serde(default)]
    reason: Option<String>,
}

/// Maps a structured reply body onto a recommendation.
pub fn parse_external_reply(item_name: &str, body: &str) -> AdvisorRecommendation {
    let reply: ExternalReply = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => {
            warn!(item = item_name, error = %e, "advisor reply did not match schema");
            return AdvisorRecommendation::unsure(item_name, RATIONALE_UNPARSEABLE);
        }
    };
    let recommend = reply.recommend.filter(|r| !r.trim().is_empty());
    let compliant = match reply.compliant.as_deref().map(str::to_ascii_lowercase).as_deref() {
        Some("yes") => Compliance::Yes,
        Some("no") => Compliance::No,
        Some("unsure") => Compliance::Unsure,
        None if recommend.is_some() => Compliance::Yes,
        None => Compliance::Unsure,
        Some(other) => {
            warn!(item = item_name, compliant = other, "advisor reply has unknown compliance value");
            return AdvisorRecommendation::unsure(item_name, RATIONALE_UNPARSEABLE);
        }
    };
    let rationale = reply.reason.unwrap_or_default();
    match (compliant, recommend) {
        (Compliance::Yes, Some(category)) => AdvisorRecommendation {
            item_name: item_name.to_string(),
            recommended_category: Some(category),
            recommended_account: reply.account,
            compliant,
            matched_similar: None,
            similarity: None,
            rationale,
        },
        (Compliance::Yes, None) => AdvisorRecommendation::unsure(
            item_name,
            format!("advisor said compliant but recommended no category: {rationale}"),
        ),
        (other, _) => AdvisorRecommendation {
            item_name: item_name.to_string(),
            recommended_category: None,
            recommended_account: reply.account,
            compliant: other,
            matched_similar: None,
            similarity: None,
            rationale,
        },
    }
}

/// Client for an HTTP completion endpoint speaking the JSON reply contract.
pub struct ExternalAdvisor {
    url: String,
    template: String,
    agent: ureq::Agent,
}

impl ExternalAdvisor {
    pub fn new(url: impl Into<String>, timeout: Duration, template: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            template: template.into(),
            agent,
        }
    }

    fn request(&self, query: &AdvisorQuery) -> Result<String, ureq::Error> {
        let body = ExternalRequest {
            query_id: query.query_id(),
            prompt: render_prompt(&self.template, query),
            policy_digest: &query.policy_digest,
        };
        let mut response = self.agent.post(&self.url).send_json(&body)?;
        response.body_mut().read_to_string()
    }
}

impl Advisor for ExternalAdvisor {
    fn name(&self) -> &str {
        "external"
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn advise(&self, query: &AdvisorQuery, _store: &PolicyStore) -> AdvisorRecommendation {
        match self.request(query) {
            Ok(body) => parse_external_reply(&query.item_name, &body),
            Err(e) => {
                warn!(url = %self.url, error = %e, "advisor request failed");
                AdvisorRecommendation::unsure(&query.item_name, RATIONALE_UNAVAILABLE)
            }
        }
    }
}

/// [`advise_external`] entry point for one-off calls.
pub fn advise_external(query: &AdvisorQuery, url: &str, timeout: Duration, template: &str) -> AdvisorRecommendation {
    ExternalAdvisor::new(url, timeout, template).advise(query, &PolicyStore::new())
}
