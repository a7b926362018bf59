//! Canonical receipt documents, field extraction, and the confidence gate.
//!
//! Receipts arrive as line-oriented UTF-8 text standing in for OCR output:
//!
//! ```text
//! %RECEIPT 1
//! merchant=팝스토어잠실향군타워점
//! date=2025-03-25
//! total=9000
//! item=Simply Black|2|1500|3000
//! conf total=87
//! ```
//!
//! Header fields carry a confidence score in `0..=100`; fields without a
//! `conf` directive are taken at full confidence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RECEIPT_HEADER: &str = "%RECEIPT 1";
pub const RECEIPT_EXTENSION: &str = "rcpt";
pub const FULL_CONFIDENCE: u8 = 100;

/// Additive identities (supply + tax, item sums) may drift by this much from VAT rounding.
pub const AMOUNT_TOLERANCE_KRW: i64 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReceiptError {
    #[error("malformed receipt at line {line}: {message}")]
    MalformedReceipt { line: usize, message: String },
    #[error("invalid number at line {line}: {value:?}")]
    InvalidNumber { line: usize, value: String },
    #[error("invalid date at line {line}: {value:?}")]
    InvalidDate { line: usize, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiptDocument {
    pub source_id: String,
    pub raw_text: String,
}

impl ReceiptDocument {
    pub fn new(source_id: impl Into<String>, raw_text: impl Into<String>) -> Self {
        Self {
            source_id: source_id.into(),
            raw_text: raw_text.into(),
        }
    }
}

/// Header fields recognized on a receipt, in canonical output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldName {
    Merchant,
    BizNo,
    Date,
    ApprovalNo,
    Supply,
    Tax,
    Total,
}

impl FieldName {
    pub const ALL: [FieldName; 7] = [
        FieldName::Merchant,
        FieldName::BizNo,
        FieldName::Date,
        FieldName::ApprovalNo,
        FieldName::Supply,
        FieldName::Tax,
        FieldName::Total,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FieldName::Merchant => "merchant",
            FieldName::BizNo => "biz_no",
            FieldName::Date => "date",
            FieldName::ApprovalNo => "approval_no",
            FieldName::Supply => "supply",
            FieldName::Tax => "tax",
            FieldName::Total => "total",
        }
    }

    fn is_amount(self) -> bool {
        matches!(self, FieldName::Supply | FieldName::Tax | FieldName::Total)
    }

    /// Default mandatory set for the confidence gate.
    pub fn default_mandatory() -> BTreeSet<FieldName> {
        [FieldName::Merchant, FieldName::Date, FieldName::Total]
            .into_iter()
            .collect()
    }
}

impl fmt::Display for FieldName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FieldName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FieldName::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown receipt field {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Integer(i64),
    Text(String),
}

impl FieldValue {
    pub fn as_integer(&self) -> Option<i64> {
        match self {
            FieldValue::Integer(v) => Some(*v),
            FieldValue::Text(_) => None,
        }
    }
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Integer(v) => write!(f, "{v}"),
            FieldValue::Text(t) => f.write_str(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldExtraction {
    pub field_name: FieldName,
    pub value: FieldValue,
    pub confidence: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineItem {
    pub name: String,
    pub quantity: Option<u64>,
    pub unit_price: Option<i64>,
    pub amount: i64,
}

impl LineItem {
    pub fn new(name: impl Into<String>, quantity: u64, unit_price: i64, amount: i64) -> Self {
        Self {
            name: name.into(),
            quantity: Some(quantity),
            unit_price: Some(unit_price),
            amount,
        }
    }

    /// `quantity × unit_price` when both are known.
    pub fn expected_amount(&self) -> Option<i64> {
        let qty = i64::try_from(self.quantity?).ok()?;
        qty.checked_mul(self.unit_price?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub fields: Vec<FieldExtraction>,
    pub items: Vec<LineItem>,
    pub warnings: Vec<String>,
}

impl ExtractionResult {
    pub fn field(&self, name: FieldName) -> Option<&FieldExtraction> {
        self.fields.iter().find(|f| f.field_name == name)
    }

    pub fn amount(&self, name: FieldName) -> Option<i64> {
        self.field(name).and_then(|f| f.value.as_integer())
    }

    pub fn total(&self) -> Option<i64> {
        self.amount(FieldName::Total)
    }

    /// Renders the result back into the canonical text format.
    ///
    /// Warnings are not serialized; parsing the output reproduces the same
    /// fields and items.
    pub fn to_canonical(&self) -> String {
        let mut out = String::from(RECEIPT_HEADER);
        out.push('\n');
        let mut fields: Vec<&FieldExtraction> = self.fields.iter().collect();
        fields.sort_by_key(|f| f.field_name);
        for f in &fields {
            out.push_str(&format!("{}={}\n", f.field_name, f.value));
        }
        for f in &fields {
            if f.confidence != FULL_CONFIDENCE {
                out.push_str(&format!("conf {}={}\n", f.field_name, f.confidence));
            }
        }
        for item in &self.items {
            let qty = item.quantity.map(|q| q.to_string()).unwrap_or_default();
            let unit = item.unit_price.map(|u| u.to_string()).unwrap_or_default();
            out.push_str(&format!("item={}|{}|{}|{}\n", item.name, qty, unit, item.amount));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateStatus {
    Ok,
    Defective,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfidenceVerdict {
    pub status: GateStatus,
    pub defective_fields: Vec<FieldName>,
}

impl ConfidenceVerdict {
    pub fn is_defective(&self) -> bool {
        self.status == GateStatus::Defective
    }
}

/// Parses a canonical receipt. Unknown keys become warnings; arithmetic
/// inconsistencies are appended as warnings too.
pub fn parse_receipt(doc: &ReceiptDocument) -> Result<ExtractionResult, ReceiptError> {
    let mut lines = doc.raw_text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, first)) if first.trim_end_matches('\r') == RECEIPT_HEADER => {}
        _ => {
            return Err(ReceiptError::MalformedReceipt {
                line: 1,
                message: format!("expected {RECEIPT_HEADER:?} header"),
            })
        }
    }

    let mut values: BTreeMap<FieldName, FieldValue> = BTreeMap::new();
    let mut confidences: BTreeMap<FieldName, (usize, u8)> = BTreeMap::new();
    let mut result = ExtractionResult::default();

    for (line_no, raw) in lines {
        let line = raw.trim_end_matches('\r');
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }

        if let Some(directive) = trimmed.strip_prefix("conf ") {
            let (key, value) = split_key_value(directive, line_no)?;
            let confidence = parse_confidence(value, line_no)?;
            match key.parse::<FieldName>() {
                Ok(field) => {
                    confidences.insert(field, (line_no, confidence));
                }
                Err(_) => result
                    .warnings
                    .push(format!("line {line_no}: confidence for unknown field {key:?} ignored")),
            }
            continue;
        }

        let (key, value) = split_key_value(trimmed, line_no)?;
        if key == "item" {
            result.items.push(parse_item(value, line_no)?);
            continue;
        }
        let Ok(field) = key.parse::<FieldName>() else {
            result
                .warnings
                .push(format!("line {line_no}: unknown key {key:?} ignored"));
            continue;
        };
        let parsed = parse_field_value(field, value, line_no)?;
        if values.contains_key(&field) {
            result
                .warnings
                .push(format!("line {line_no}: duplicate field {field}; first value kept"));
        } else {
            values.insert(field, parsed);
        }
    }

    for (field, (line_no, _)) in &confidences {
        if !values.contains_key(field) {
            result.warnings.push(format!(
                "line {line_no}: confidence for absent field {field} ignored"
            ));
        }
    }

    result.fields = values
        .into_iter()
        .map(|(field_name, value)| FieldExtraction {
            field_name,
            value,
            confidence: confidences
                .get(&field_name)
                .map(|(_, c)| *c)
                .unwrap_or(FULL_CONFIDENCE),
        })
        .collect();

    let arithmetic = validate_arithmetic(&result);
    result.warnings.extend(arithmetic);
    Ok(result)
}

fn split_key_value(line: &str, line_no: usize) -> Result<(&str, &str), ReceiptError> {
    line.split_once('=')
        .map(|(k, v)| (k.trim(), v))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| ReceiptError::MalformedReceipt {
            line: line_no,
            message: format!("expected key=value, got {line:?}"),
        })
}

fn parse_confidence(value: &str, line_no: usize) -> Result<u8, ReceiptError> {
    value
        .trim()
        .parse::<u8>()
        .ok()
        .filter(|c| *c <= FULL_CONFIDENCE)
        .ok_or_else(|| ReceiptError::InvalidNumber {
            line: line_no,
            value: value.to_string(),
        })
}

fn parse_integer<T: FromStr>(value: &str, line_no: usize) -> Result<T, ReceiptError> {
    value.trim().parse::<T>().map_err(|_| ReceiptError::InvalidNumber {
        line: line_no,
        value: value.to_string(),
    })
}

fn parse_field_value(field: FieldName, value: &str, line_no: usize) -> Result<FieldValue, ReceiptError> {
    if field.is_amount() {
        return parse_integer::<i64>(value, line_no).map(FieldValue::Integer);
    }
    let value = value.trim();
    if field == FieldName::Date {
        let valid = NaiveDate::parse_from_str(value, "%Y-%m-%d").is_ok() && value.len() == 10
            || NaiveDateTime::parse_from_str(value, "%Y-%m-%dT%H:%M:%S").is_ok() && value.len() == 19;
        if !valid {
            return Err(ReceiptError::InvalidDate {
                line: line_no,
                value: value.to_string(),
            });
        }
    }
    Ok(FieldValue::Text(value.to_string()))
}

fn parse_item(value: &str, line_no: usize) -> Result<LineItem, ReceiptError> {
    let parts: Vec<&str> = value.split('|').collect();
    let [name, qty, unit, amount] = parts[..] else {
        return Err(ReceiptError::MalformedReceipt {
            line: line_no,
            message: format!("item needs 4 '|'-separated parts, got {}", parts.len()),
        });
    };
    let name = name.trim();
    if name.is_empty() {
        return Err(ReceiptError::MalformedReceipt {
            line: line_no,
            message: "item name is empty".into(),
        });
    }
    fn optional(s: &str) -> Option<&str> {
        Some(s.trim()).filter(|s| !s.is_empty())
    }
    Ok(LineItem {
        name: name.to_string(),
        quantity: optional(qty).map(|q| parse_integer(q, line_no)).transpose()?,
        unit_price: optional(unit).map(|u| parse_integer(u, line_no)).transpose()?,
        amount: parse_integer(amount, line_no)?,
    })
}

/// Checks the additive identities of a receipt and reports every violation.
pub fn validate_arithmetic(result: &ExtractionResult) -> Vec<String> {
    let mut warnings = Vec::new();
    let total = result.total();

    if let (Some(supply), Some(tax), Some(total)) = (
        result.amount(FieldName::Supply),
        result.amount(FieldName::Tax),
        total,
    ) {
        if (supply + tax - total).abs() > AMOUNT_TOLERANCE_KRW {
            warnings.push(format!("supply {supply} + tax {tax} ≠ total {total}"));
        }
    }

    for item in &result.items {
        if let (Some(expected), Some(qty), Some(unit)) =
            (item.expected_amount(), item.quantity, item.unit_price)
        {
            if expected != item.amount {
                warnings.push(format!(
                    "item {:?} amount {} ≠ {qty} × {unit}",
                    item.name, item.amount
                ));
            }
        }
    }

    if let Some(total) = total {
        if !result.items.is_empty() {
            let sum: i64 = result.items.iter().map(|i| i.amount).sum();
            if (sum - total).abs() > AMOUNT_TOLERANCE_KRW {
                warnings.push(format!("item sum {sum} ≠ total {total}"));
            }
        }
    }
    warnings
}

/// A receipt is defective when a mandatory field is missing or was read with
/// confidence strictly below `threshold`.
pub fn gate_confidence(
    result: &ExtractionResult,
    mandatory: &BTreeSet<FieldName>,
    threshold: u8,
) -> ConfidenceVerdict {
    let defective_fields: Vec<FieldName> = mandatory
        .iter()
        .copied()
        .filter(|name| match result.field(*name) {
            Some(f) => f.confidence < threshold,
            None => true,
        })
        .collect();
    ConfidenceVerdict {
        status: if defective_fields.is_empty() {
            GateStatus::Ok
        } else {
            GateStatus::Defective
        },
        defective_fields,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> ReceiptDocument {
        ReceiptDocument::new("t", text)
    }

    fn parse(text: &str) -> ExtractionResult {
        parse_receipt(&doc(text)).unwrap()
    }

    #[test]
    fn parses_popstore_receipt() {
        let r = parse("%RECEIPT 1\nmerchant=팝스토어잠실향군타워점\ndate=2025-03-25\ntotal=9000\n");
        assert_eq!(r.fields.len(), 3);
        assert!(r.fields.iter().all(|f| f.confidence == 100));
        assert_eq!(
            r.field(FieldName::Merchant).unwrap().value,
            FieldValue::Text("팝스토어잠실향군타워점".into())
        );
        assert_eq!(r.total(), Some(9000));
        assert!(r.items.is_empty());
    }

    #[test]
    fn header_only_is_empty() {
        let r = parse("%RECEIPT 1");
        assert_eq!(r, ExtractionResult::default());
    }

    #[test]
    fn item_line() {
        let r = parse("%RECEIPT 1\nitem=Simply Black|2|1500|3000\n");
        assert_eq!(r.items, vec![LineItem::new("Simply Black", 2, 1500, 3000)]);
        assert_eq!(2 * 1500, 3000);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn missing_header_is_malformed() {
        let err = parse_receipt(&doc("merchant=x\n")).unwrap_err();
        assert!(matches!(err, ReceiptError::MalformedReceipt { line: 1, .. }));
        assert!(matches!(
            parse_receipt(&doc("")).unwrap_err(),
            ReceiptError::MalformedReceipt { .. }
        ));
    }

    #[test]
    fn stray_line_is_malformed() {
        let err = parse_receipt(&doc("%RECEIPT 1\nthis is not a field\n")).unwrap_err();
        assert!(matches!(err, ReceiptError::MalformedReceipt { line: 2, .. }));
    }

    #[test]
    fn number_errors() {
        assert!(matches!(
            parse_receipt(&doc("%RECEIPT 1\ntotal=9,000\n")).unwrap_err(),
            ReceiptError::InvalidNumber { line: 2, .. }
        ));
        assert!(matches!(
            parse_receipt(&doc("%RECEIPT 1\nitem=x|-1|100|100\n")).unwrap_err(),
            ReceiptError::InvalidNumber { .. }
        ));
        assert!(matches!(
            parse_receipt(&doc("%RECEIPT 1\ntotal=1\nconf total=101\n")).unwrap_err(),
            ReceiptError::InvalidNumber { .. }
        ));
    }

    #[test]
    fn date_errors() {
        assert!(matches!(
            parse_receipt(&doc("%RECEIPT 1\ndate=25/03/2025\n")).unwrap_err(),
            ReceiptError::InvalidDate { .. }
        ));
        assert!(matches!(
            parse_receipt(&doc("%RECEIPT 1\ndate=2025-02-30\n")).unwrap_err(),
            ReceiptError::InvalidDate { .. }
        ));
        let r = parse("%RECEIPT 1\ndate=2025-03-25T12:41:07\n");
        assert_eq!(r.fields.len(), 1);
    }

    #[test]
    fn unknown_keys_warn() {
        let r = parse("%RECEIPT 1\n# comment\n\ncashier=kim\nconf cashier=10\ntotal=1\n");
        assert_eq!(r.total(), Some(1));
        assert_eq!(r.warnings.len(), 2);
    }

    #[test]
    fn confidence_directive_applies() {
        let r = parse("%RECEIPT 1\nconf total=49\ntotal=9000\n");
        assert_eq!(r.field(FieldName::Total).unwrap().confidence, 49);
    }

    #[test]
    fn gate_boundary() {
        let mandatory: BTreeSet<_> = [FieldName::Total].into_iter().collect();
        let low = parse("%RECEIPT 1\ntotal=9000\nconf total=49\n");
        let v = gate_confidence(&low, &mandatory, 50);
        assert_eq!(v.status, GateStatus::Defective);
        assert_eq!(v.defective_fields, vec![FieldName::Total]);

        let edge = parse("%RECEIPT 1\ntotal=9000\nconf total=50\n");
        assert_eq!(gate_confidence(&edge, &mandatory, 50).status, GateStatus::Ok);
    }

    #[test]
    fn gate_missing_field() {
        let r = parse("%RECEIPT 1\nmerchant=a\ntotal=1\n");
        let v = gate_confidence(&r, &FieldName::default_mandatory(), 50);
        assert_eq!(v.status, GateStatus::Defective);
        assert_eq!(v.defective_fields, vec![FieldName::Date]);
    }

    #[test]
    fn arithmetic_checks() {
        let ok = parse("%RECEIPT 1\nsupply=8182\ntax=818\ntotal=9000\n");
        assert_eq!(8182 + 818, 9000);
        assert!(validate_arithmetic(&ok).is_empty());

        let zero = parse("%RECEIPT 1\nsupply=0\ntax=0\ntotal=0\n");
        assert!(validate_arithmetic(&zero).is_empty());

        let short = parse("%RECEIPT 1\ntotal=9000\nitem=Simply Black|2|1500|3000\n");
        assert_eq!(validate_arithmetic(&short), vec!["item sum 3000 ≠ total 9000".to_string()]);
        assert_eq!(short.warnings, validate_arithmetic(&short));

        let bad_item = parse("%RECEIPT 1\nitem=x|2|1500|3001\n");
        assert_eq!(validate_arithmetic(&bad_item).len(), 1);

        let rounding = parse("%RECEIPT 1\nsupply=8181\ntax=818\ntotal=9000\n");
        assert!(validate_arithmetic(&rounding).is_empty());
    }

    #[test]
    fn optional_quantity_and_price() {
        let r = parse("%RECEIPT 1\nitem=Delivery fee|||3000\n");
        assert_eq!(r.items[0].quantity, None);
        assert_eq!(r.items[0].unit_price, None);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn canonical_round_trip() {
        let text = "%RECEIPT 1\ntotal=9000\nmerchant=m\nconf merchant=70\nitem=a|1|9000|9000\nitem=b|||0\n";
        let first = parse(text);
        let again = parse(&first.to_canonical());
        assert_eq!(first.fields, again.fields);
        assert_eq!(first.items, again.items);
        assert_eq!(first.to_canonical(), again.to_canonical());
    }
}
