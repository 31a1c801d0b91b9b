use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use super::{FilterExpr, IndexError, IndexedRecord, Page, Payload, PayloadSchema, SearchHit};
use crate::embedding::{dot, EmbeddingVector, UNIT_NORM_TOLERANCE};

/// Contiguous storage: record `i` owns `vectors[i * dim..(i + 1) * dim]`.
#[derive(Debug, Clone, Default)]
pub(super) struct IndexData {
    pub(super) ids: Vec<String>,
    pub(super) vectors: Vec<f32>,
    pub(super) payloads: Vec<Payload>,
    pub(super) positions: HashMap<String, usize>,
}

/// Exact brute-force cosine index. Searches run on an immutable snapshot;
/// upserts are serialized and published atomically.
#[derive(Debug)]
pub struct VectorIndex {
    dim: usize,
    schema: PayloadSchema,
    read_only: bool,
    data: RwLock<Arc<IndexData>>,
    writer: Mutex<()>,
}

/// Hits ranked by score descending, then doc id ascending.
pub(super) fn rank_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id))
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self::with_schema(dim, PayloadSchema::default())
    }

    pub fn with_schema(dim: usize, schema: PayloadSchema) -> Self {
        Self::from_parts(dim, schema, IndexData::default(), false)
    }

    pub(super) fn from_parts(dim: usize, schema: PayloadSchema, data: IndexData, read_only: bool) -> Self {
        Self {
            dim,
            schema,
            read_only,
            data: RwLock::new(Arc::new(data)),
            writer: Mutex::new(()),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn schema(&self) -> &PayloadSchema {
        &self.schema
    }

    pub fn is_read_only(&self) -> bool {
        self.read_only
    }

    pub fn len(&self) -> usize {
        self.snapshot().ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(super) fn snapshot(&self) -> Arc<IndexData> {
        self.data.read().expect("index lock").clone()
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.snapshot().positions.contains_key(doc_id)
    }

    pub fn get(&self, doc_id: &str) -> Option<IndexedRecord> {
        let snap = self.snapshot();
        let &i = snap.positions.get(doc_id)?;
        Some(IndexedRecord {
            doc_id: snap.ids[i].clone(),
            vector: EmbeddingVector::from_unit(snap.vectors[i * self.dim..(i + 1) * self.dim].to_vec()).ok()?,
            payload: snap.payloads[i].clone(),
        })
    }

    fn check(&self, record: &IndexedRecord) -> Result<(), IndexError> {
        if record.vector.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: record.vector.dim(),
            });
        }
        if record.doc_id.is_empty() {
            return Err(IndexError::InvalidRecord("empty doc_id".into()));
        }
        if (record.vector.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(IndexError::InvalidRecord(format!("vector for `{}` is not unit-norm", record.doc_id)));
        }
        self.schema.check(&record.payload)
    }

    pub fn upsert(&self, record: IndexedRecord) -> Result<(), IndexError> {
        self.upsert_batch(vec![record])
    }

    /// Validates every record first; either all are applied or none.
    pub fn upsert_batch(&self, records: Vec<IndexedRecord>) -> Result<(), IndexError> {
        if self.read_only {
            return Err(IndexError::ReadOnly);
        }
        for r in &records {
            self.check(r)?;
        }
        let _writer = self.writer.lock().expect("index writer lock");
        let mut next = (*self.snapshot()).clone();
        for record in records {
            let values = record.vector.as_slice();
            match next.positions.get(&record.doc_id) {
                Some(&i) => {
                    next.vectors[i * self.dim..(i + 1) * self.dim].copy_from_slice(values);
                    next.payloads[i] = record.payload;
                }
                None => {
                    next.positions.insert(record.doc_id.clone(), next.ids.len());
                    next.ids.push(record.doc_id);
                    next.vectors.extend_from_slice(values);
                    next.payloads.push(record.payload);
                }
            }
        }
        *self.data.write().expect("index lock") = Arc::new(next);
        Ok(())
    }

    /// Filtered, ranked and paginated search. The filter is validated
    /// against the schema before any record is scanned.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        filter: Option<&FilterExpr>,
        page: Page,
    ) -> Result<Vec<SearchHit>, IndexError> {
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        if let Some(f) = filter {
            f.validate(&self.schema)?;
        }
        let snap = self.snapshot();
        let q = query.as_slice();
        let mut hits = Vec::new();
        for (i, id) in snap.ids.iter().enumerate() {
            if let Some(f) = filter {
                if !f.evaluate(&snap.payloads[i], &self.schema)? {
                    continue;
                }
            }
            let score = dot(&snap.vectors[i * self.dim..(i + 1) * self.dim], q);
            hits.push(SearchHit {
                doc_id: id.clone(),
                score,
            });
        }

        let end = page.offset.saturating_add(page.limit);
        if page.offset >= hits.len() {
            return Ok(Vec::new());
        }
        if end < hits.len() {
            hits.select_nth_unstable_by(end, rank_order);
            hits.truncate(end);
        }
        hits.sort_unstable_by(rank_order);
        Ok(hits.split_off(page.offset))
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        super::persist::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        super::persist::load(path, false)
    }

    /// Loads an index that rejects upserts.
    pub fn load_read_only(path: &Path) -> Result<Self, IndexError> {
        super::persist::load(path, true)
    }
}
