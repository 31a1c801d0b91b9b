//! Non-parametric memory: exact cosine search over unit vectors, restricted
//! by symbolic predicates over each record's metadata payload.

mod filter;
mod index;
mod persist;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::embedding::EmbeddingVector;

pub use filter::{parse_filter, print_filter, FilterError, FilterExpr, GroupOp, Predicate, PredicateOp};
pub use index::VectorIndex;
pub use persist::MAGIC;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, vector has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("index is read-only")]
    ReadOnly,
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PayloadValue {
    Bool(bool),
    Int(i64),
    Text(String),
    TextList(Vec<String>),
}

impl From<&str> for PayloadValue {
    fn from(s: &str) -> Self {
        Self::Text(s.to_string())
    }
}

impl From<String> for PayloadValue {
    fn from(s: String) -> Self {
        Self::Text(s)
    }
}

impl From<i64> for PayloadValue {
    fn from(v: i64) -> Self {
        Self::Int(v)
    }
}

impl From<bool> for PayloadValue {
    fn from(v: bool) -> Self {
        Self::Bool(v)
    }
}

pub type Payload = BTreeMap<String, PayloadValue>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Text,
    Integer,
    Boolean,
    TextList,
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Text => "text",
            Self::Integer => "integer",
            Self::Boolean => "boolean",
            Self::TextList => "text list",
        })
    }
}

/// Field names a filter may reference, and their value kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadSchema {
    pub fields: BTreeMap<String, FieldKind>,
}

impl Default for PayloadSchema {
    fn default() -> Self {
        let fields = [
            ("source", FieldKind::Text),
            ("year", FieldKind::Integer),
            ("doi_present", FieldKind::Boolean),
            ("has_fulltext", FieldKind::Boolean),
            ("language", FieldKind::Text),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self { fields }
    }
}

impl PayloadSchema {
    pub fn kind(&self, field: &str) -> Option<FieldKind> {
        self.fields.get(field).copied()
    }

    /// Every present value must be of its declared kind; unknown keys are rejected.
    pub fn check(&self, payload: &Payload) -> Result<(), IndexError> {
        for (key, value) in payload {
            let kind = self
                .kind(key)
                .ok_or_else(|| IndexError::InvalidRecord(format!("payload field `{key}` is not in the schema")))?;
            let ok = matches!(
                (kind, value),
                (FieldKind::Text, PayloadValue::Text(_))
                    | (FieldKind::Integer, PayloadValue::Int(_))
                    | (FieldKind::Boolean, PayloadValue::Bool(_))
                    | (FieldKind::TextList, PayloadValue::TextList(_))
            );
            if !ok {
                return Err(IndexError::InvalidRecord(format!("payload field `{key}` is not {kind}")));
            }
        }
        Ok(())
    }
}

/// Payload derived from a curated document under the default schema.
pub fn payload_for_document(doc: &Document) -> Payload {
    let mut p = Payload::new();
    p.insert("source".into(), doc.source.clone().into());
    if let Some(year) = doc.year {
        p.insert("year".into(), i64::from(year).into());
    }
    p.insert("doi_present".into(), doc.doi.is_some().into());
    p.insert("has_fulltext".into(), doc.has_fulltext().into());
    if let Some(lang) = &doc.language {
        p.insert("language".into(), lang.clone().into());
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedRecord {
    pub doc_id: String,
    pub vector: EmbeddingVector,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f32,
}

pub const MAX_PAGE_LIMIT: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPage")]
pub struct Page {
    pub offset: usize,
    pub limit: usize,
}

#[derive(Deserialize)]
struct RawPage {
    #[serde(default)]
    offset: usize,
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    10
}

impl TryFrom<RawPage> for Page {
    type Error = String;

    fn try_from(raw: RawPage) -> Result<Self, Self::Error> {
        Page::new(raw.offset, raw.limit)
    }
}

impl Default for Page {
    fn default() -> Self {
        Self { offset: 0, limit: 10 }
    }
}

impl Page {
    pub fn new(offset: usize, limit: usize) -> Result<Self, String> {
        if !(1..=MAX_PAGE_LIMIT).contains(&limit) {
            return Err(format!("page limit must be in [1, {MAX_PAGE_LIMIT}], got {limit}"));
        }
        Ok(Self { offset, limit })
    }

    pub fn next(&self) -> Self {
        Self {
            offset: self.offset + self.limit,
            limit: self.limit,
        }
    }
}
