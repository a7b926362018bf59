//! Account policies and the whitelist/blacklist knowledge base.
//!
//! Entries are matched by normalized name or by any of their synonyms
//! ("similar words"). Matching here is exact on normalized text; fuzzy
//! matching is left to the advisor.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const STORE_EXTENSION: &str = "policy.json";

/// Seed knowledge base shipped with the crate.
pub const SEED_STORE_JSON: &str = include_str!("../assets/seed.policy.json");

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("conflicting category for {key:?}: stored {existing:?}, proposed {proposed:?}")]
    ConflictingCategory {
        key: String,
        existing: Option<String>,
        proposed: Option<String>,
    },
    #[error("invalid policy entry: {0}")]
    InvalidEntry(String),
    #[error("invalid account policy: {0}")]
    InvalidAccount(String),
    #[error("store corrupt: {0}")]
    StoreCorrupt(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Compatibility-normalizes, case-folds, replaces non-alphanumerics with
/// spaces, and collapses whitespace.
pub fn normalize_name(raw: &str) -> String {
    let folded: String = raw.nfkc().collect::<String>().to_lowercase();
    let spaced: String = folded
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    spaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ListKind {
    Whitelist,
    Blacklist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProvenanceSource {
    Seed,
    Hitl,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: ProvenanceSource,
    #[serde(default)]
    pub reviewer: Option<String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountPolicy {
    pub code: String,
    pub name: String,
    pub allowed_categories: BTreeSet<String>,
    pub routine: bool,
}

impl AccountPolicy {
    pub fn allows(&self, category: &str) -> bool {
        self.allowed_categories.contains(category)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub name: String,
    pub normalized_key: String,
    #[serde(default)]
    pub category: Option<String>,
    pub list: ListKind,
    #[serde(default)]
    pub synonyms: BTreeSet<String>,
    pub provenance: Provenance,
    #[serde(default)]
    pub reason: Option<String>,
}

impl PolicyEntry {
    /// Builds an entry, deriving the normalized key and dropping synonyms that
    /// normalize to the key itself or to nothing.
    pub fn new(
        name: impl Into<String>,
        category: Option<String>,
        list: ListKind,
        synonyms: impl IntoIterator<Item = String>,
        provenance: Provenance,
        reason: Option<String>,
    ) -> Result<Self, PolicyError> {
        let mut entry = Self {
            name: name.into(),
            normalized_key: String::new(),
            category,
            list,
            synonyms: synonyms.into_iter().collect(),
            provenance,
            reason,
        };
        entry.sanitize();
        entry.validate()?;
        Ok(entry)
    }

    pub fn whitelist(name: &str, category: &str, provenance: Provenance) -> Result<Self, PolicyError> {
        Self::new(name, Some(category.to_string()), ListKind::Whitelist, [], provenance, None)
    }

    pub fn blacklist(name: &str, reason: &str, provenance: Provenance) -> Result<Self, PolicyError> {
        Self::new(name, None, ListKind::Blacklist, [], provenance, Some(reason.to_string()))
    }

    fn sanitize(&mut self) {
        self.normalized_key = normalize_name(&self.name);
        let key = self.normalized_key.clone();
        self.synonyms.retain(|s| {
            let n = normalize_name(s);
            !n.is_empty() && n != key
        });
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if self.normalized_key.is_empty() {
            return Err(PolicyError::InvalidEntry(format!(
                "name {:?} normalizes to nothing",
                self.name
            )));
        }
        if self.normalized_key != normalize_name(&self.name) {
            return Err(PolicyError::InvalidEntry(format!(
                "normalized_key {:?} does not match name {:?}",
                self.normalized_key, self.name
            )));
        }
        if self.list == ListKind::Whitelist && self.category.as_deref().map_or(true, str::is_empty) {
            return Err(PolicyError::InvalidEntry(format!(
                "whitelist entry {:?} has no category",
                self.name
            )));
        }
        if let Some(s) = self
            .synonyms
            .iter()
            .find(|s| normalize_name(s) == self.normalized_key)
        {
            return Err(PolicyError::InvalidEntry(format!(
                "synonym {s:?} repeats the entry key"
            )));
        }
        Ok(())
    }

    /// Normalized forms this entry answers to: its key first, then synonyms.
    pub fn match_keys(&self) -> impl Iterator<Item = (MatchedVia, &str, String)> + '_ {
        std::iter::once((MatchedVia::EntryName, self.name.as_str(), self.normalized_key.clone())).chain(
            self.synonyms
                .iter()
                .map(|s| (MatchedVia::Synonym, s.as_str(), normalize_name(s))),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatchedVia {
    EntryName,
    Synonym,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupResult {
    pub entry: PolicyEntry,
    pub matched_via: MatchedVia,
    pub matched_text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreFile {
    version: u64,
    accounts: Vec<AccountPolicy>,
    entries: Vec<PolicyEntry>,
}

#[derive(Debug, Clone, Copy)]
struct IndexHit {
    entry: usize,
    via: MatchedVia,
    text_pos: usize,
}

/// The policy knowledge base. Every mutation bumps `version` by one.
#[derive(Debug, Clone, Default)]
pub struct PolicyStore {
    version: u64,
    accounts: Vec<AccountPolicy>,
    entries: Vec<PolicyEntry>,
    index: HashMap<String, Vec<IndexHit>>,
}

impl PartialEq for PolicyStore {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version && self.accounts == other.accounts && self.entries == other.entries
    }
}

impl Eq for PolicyStore {}

impl Serialize for PolicyStore {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        StoreFile {
            version: self.version,
            accounts: self.accounts.clone(),
            entries: self.entries.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PolicyStore {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let file = StoreFile::deserialize(deserializer)?;
        Self::from_parts(file.version, file.accounts, file.entries).map_err(serde::de::Error::custom)
    }
}

impl PolicyStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Assembles a store from persisted parts, rejecting schema violations.
    pub fn from_parts(
        version: u64,
        accounts: Vec<AccountPolicy>,
        entries: Vec<PolicyEntry>,
    ) -> Result<Self, PolicyError> {
        let mut codes = BTreeSet::new();
        for account in &accounts {
            if account.code.trim().is_empty() {
                return Err(PolicyError::StoreCorrupt("account with empty code".into()));
            }
            if !codes.insert(account.code.as_str()) {
                return Err(PolicyError::StoreCorrupt(format!(
                    "duplicate account code {:?}",
                    account.code
                )));
            }
        }
        let mut keys = BTreeSet::new();
        for entry in &entries {
            entry
                .validate()
                .map_err(|e| PolicyError::StoreCorrupt(e.to_string()))?;
            if !keys.insert((entry.list, entry.normalized_key.as_str())) {
                return Err(PolicyError::StoreCorrupt(format!(
                    "duplicate {:?} key {:?}",
                    entry.list, entry.normalized_key
                )));
            }
        }
        let mut store = Self {
            version,
            accounts,
            entries,
            index: HashMap::new(),
        };
        store.reindex();
        Ok(store)
    }

    pub fn from_json(json: &str) -> Result<Self, PolicyError> {
        let file: StoreFile =
            serde_json::from_str(json).map_err(|e| PolicyError::StoreCorrupt(e.to_string()))?;
        Self::from_parts(file.version, file.accounts, file.entries)
    }

    pub fn seed() -> Self {
        Self::from_json(SEED_STORE_JSON).expect("shipped seed store is valid")
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn accounts(&self) -> &[AccountPolicy] {
        &self.accounts
    }

    pub fn entries(&self) -> &[PolicyEntry] {
        &self.entries
    }

    pub fn entries_on(&self, list: ListKind) -> impl Iterator<Item = &PolicyEntry> {
        self.entries.iter().filter(move |e| e.list == list)
    }

    fn reindex(&mut self) {
        self.index.clear();
        for (i, entry) in self.entries.iter().enumerate() {
            for (pos, (via, _, key)) in entry.match_keys().enumerate() {
                self.index.entry(key).or_default().push(IndexHit {
                    entry: i,
                    via,
                    text_pos: pos,
                });
            }
        }
    }

    /// Finds the entry answering to `raw_name`. Blacklist wins over whitelist;
    /// within one list a name match wins over a synonym match.
    pub fn lookup(&self, raw_name: &str) -> Option<LookupResult> {
        let key = normalize_name(raw_name);
        let hits = self.index.get(&key)?;
        let best = hits.iter().min_by_key(|h| {
            let list_rank = match self.entries[h.entry].list {
                ListKind::Blacklist => 0,
                ListKind::Whitelist => 1,
            };
            (list_rank, h.via, h.entry)
        })?;
        let entry = &self.entries[best.entry];
        let matched_text = if best.text_pos == 0 {
            entry.name.clone()
        } else {
            entry
                .synonyms
                .iter()
                .nth(best.text_pos - 1)
                .cloned()
                .unwrap_or_default()
        };
        Some(LookupResult {
            entry: entry.clone(),
            matched_via: best.via,
            matched_text,
        })
    }

    pub fn account_policy(&self, code: &str) -> Option<&AccountPolicy> {
        self.accounts.iter().find(|a| a.code == code)
    }

    /// Inserts or merges an entry. Merging unions synonyms and takes the newer
    /// provenance; a category change on the same key and list is refused.
    pub fn upsert_entry(&mut self, mut entry: PolicyEntry) -> Result<&PolicyEntry, PolicyError> {
        entry.sanitize();
        entry.validate()?;
        let existing = self
            .entries
            .iter()
            .position(|e| e.list == entry.list && e.normalized_key == entry.normalized_key);
        let idx = match existing {
            Some(i) => {
                let current = &mut self.entries[i];
                if current.category != entry.category {
                    return Err(PolicyError::ConflictingCategory {
                        key: entry.normalized_key,
                        existing: current.category.clone(),
                        proposed: entry.category,
                    });
                }
                current.synonyms.extend(entry.synonyms);
                current.provenance = entry.provenance;
                if entry.reason.is_some() {
                    current.reason = entry.reason;
                }
                i
            }
            None => {
                self.entries.push(entry);
                self.entries.len() - 1
            }
        };
        self.version += 1;
        self.reindex();
        Ok(&self.entries[idx])
    }

    pub fn upsert_account(&mut self, account: AccountPolicy) -> Result<(), PolicyError> {
        if account.code.trim().is_empty() {
            return Err(PolicyError::InvalidAccount("empty account code".into()));
        }
        match self.accounts.iter_mut().find(|a| a.code == account.code) {
            Some(slot) => *slot = account,
            None => self.accounts.push(account),
        }
        self.version += 1;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("store serializes")
    }
}

pub fn load_store(path: &Path) -> Result<PolicyStore, PolicyError> {
    let text = fs::read_to_string(path).map_err(|source| PolicyError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    PolicyStore::from_json(&text)
}

/// Writes the store next to `path` and renames it into place.
pub fn save_store(store: &PolicyStore, path: &Path) -> Result<(), PolicyError> {
    let io = |source| PolicyError::IoFailure {
        path: path.display().to_string(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io)?;
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(store.to_json().as_bytes()).map_err(io)?;
        f.write_all(b"\n").map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}
