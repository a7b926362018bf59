//! Policy-based classification of receipt line items.
//!
//! Rule order: blacklist, then whitelist checked against the account's
//! allowed categories, then unknown (escalated to review).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{AccountPolicy, ListKind, PolicyEntry, PolicyStore};
use crate::receipt::{ExtractionResult, LineItem};

pub const BASIS_CATEGORY_NOT_ALLOWED: &str = "category not allowed for account";
pub const BASIS_NOT_LISTED: &str = "not listed in whitelist or blacklist";
pub const BASIS_NON_ROUTINE: &str = "account is not routine; human review required";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClassifyError {
    #[error("unknown account {0:?}")]
    UnknownAccount(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ItemStatus {
    Allowed,
    Prohibited,
    Unknown,
}

/// The entry a verdict was decided by.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryRef {
    pub name: String,
    pub normalized_key: String,
    pub list: ListKind,
}

impl From<&PolicyEntry> for EntryRef {
    fn from(e: &PolicyEntry) -> Self {
        Self {
            name: e.name.clone(),
            normalized_key: e.normalized_key.clone(),
            list: e.list,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemVerdict {
    pub item: LineItem,
    pub status: ItemStatus,
    pub category: Option<String>,
    pub basis: String,
    pub matched_entry: Option<EntryRef>,
}

impl ItemVerdict {
    fn unknown(item: &LineItem, basis: &str) -> Self {
        Self {
            item: item.clone(),
            status: ItemStatus::Unknown,
            category: None,
            basis: basis.to_string(),
            matched_entry: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationOutcome {
    pub account_code: String,
    pub verdicts: Vec<ItemVerdict>,
    pub escalations: Vec<usize>,
}

impl ClassificationOutcome {
    pub fn all_allowed(&self) -> bool {
        self.verdicts.iter().all(|v| v.status == ItemStatus::Allowed)
    }

    pub fn prohibited(&self) -> impl Iterator<Item = &ItemVerdict> {
        self.verdicts.iter().filter(|v| v.status == ItemStatus::Prohibited)
    }
}

/// Classifier settings. `strict_category` turns a whitelist hit whose
/// category the account does not allow into a prohibition; when false such
/// items are escalated instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierOptions {
    pub strict_category: bool,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        Self { strict_category: true }
    }
}

pub fn classify_item(
    item: &LineItem,
    account: &AccountPolicy,
    store: &PolicyStore,
    options: ClassifierOptions,
) -> ItemVerdict {
    let Some(hit) = store.lookup(&item.name) else {
        return ItemVerdict::unknown(item, BASIS_NOT_LISTED);
    };
    let entry = &hit.entry;
    match entry.list {
        ListKind::Blacklist => {
            let mut basis = format!("blacklist: {}", entry.name);
            if let Some(reason) = &entry.reason {
                basis.push_str(&format!(" ({reason})"));
            }
            ItemVerdict {
                item: item.clone(),
                status: ItemStatus::Prohibited,
                category: entry.category.clone(),
                basis,
                matched_entry: Some(entry.into()),
            }
        }
        ListKind::Whitelist => {
            let category = entry.category.clone();
            let allowed = category.as_deref().is_some_and(|c| account.allows(c));
            if allowed {
                ItemVerdict {
                    item: item.clone(),
                    status: ItemStatus::Allowed,
                    category,
                    basis: format!("whitelist: {}", entry.name),
                    matched_entry: Some(entry.into()),
                }
            } else if options.strict_category {
                ItemVerdict {
                    item: item.clone(),
                    status: ItemStatus::Prohibited,
                    category,
                    basis: BASIS_CATEGORY_NOT_ALLOWED.to_string(),
                    matched_entry: Some(entry.into()),
                }
            } else {
                ItemVerdict::unknown(item, BASIS_CATEGORY_NOT_ALLOWED)
            }
        }
    }
}

pub fn classify_report(
    extraction: &ExtractionResult,
    account_code: &str,
    store: &PolicyStore,
    options: ClassifierOptions,
) -> Result<ClassificationOutcome, ClassifyError> {
    let account = store
        .account_policy(account_code)
        .ok_or_else(|| ClassifyError::UnknownAccount(account_code.to_string()))?;
    let verdicts: Vec<ItemVerdict> = extraction
        .items
        .iter()
        .map(|item| {
            if account.routine {
                classify_item(item, account, store, options)
            } else {
                ItemVerdict::unknown(item, BASIS_NON_ROUTINE)
            }
        })
        .collect();
    let escalations = verdicts
        .iter()
        .enumerate()
        .filter(|(_, v)| v.status == ItemStatus::Unknown)
        .map(|(i, _)| i)
        .collect();
    Ok(ClassificationOutcome {
        account_code: account_code.to_string(),
        verdicts,
        escalations,
    })
}
