//! Question → retrieval → per-document extraction table → cited synthesis,
//! with a reproducibility record for every generated artifact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusError, CorpusStore, CurationPolicy, Document, IngestReport, RawRecord};
use crate::embedding::{EmbedError, Embedder};
use crate::ragchain::template::{ANSWER_TEMPLATE_ID, COLUMN_TEMPLATE_ID, SYNTHESIS_TEMPLATE_ID};
use crate::ragchain::{
    self, budget, invoke_chain, select_context, CachedGeneration, CellCache, CellKey, CellKeyParts, ChainError,
    ChainOutput, ContextKind, GenerationParams, GenerationRecord, ModelProvider, PromptTemplate, Provenance,
    ReplayOutcome, ReplayStatus, TemplateRegistry,
};
use crate::vectorstore::{payload_for_document, FilterExpr, IndexError, IndexedRecord, Page, VectorIndex};

pub const ANSWER_COLUMN_ID: &str = "answer";
pub const SYNTHESIS_COLUMN_ID: &str = "__synthesis__";
pub const DEFAULT_SYNTHESIS_N: usize = 5;
pub const DEFAULT_PARALLELISM: usize = 4;
pub const WARNING_TEXT: &str = "Automatically generated content — verify against the cited sources.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Request,
    Embedding,
    Filter,
    Retrieval,
    Corpus,
    Context,
    Generation,
    Synthesis,
    Indexing,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().expect("stage is a string"))
    }
}

/// A failure labelled with the pipeline stage it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[error("{stage} failed ({code}): {message}")]
pub struct StageError {
    pub stage: Stage,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub retryable: bool,
}

impl StageError {
    pub fn new(stage: Stage, code: &str, message: impl Into<String>) -> Self {
        Self {
            stage,
            code: code.to_string(),
            message: message.into(),
            retryable: false,
        }
    }

    fn from_chain(stage: Stage, e: &ChainError) -> Self {
        Self {
            stage,
            code: e.code().to_string(),
            message: e.to_string(),
            retryable: e.is_retryable(),
        }
    }

    fn from_index(e: &IndexError) -> Self {
        match e {
            IndexError::Filter(f) => Self::new(Stage::Filter, "filter_error", f.to_string()),
            IndexError::DimensionMismatch { .. } => Self::new(Stage::Retrieval, "dimension_mismatch", e.to_string()),
            _ => Self::new(Stage::Retrieval, "index_error", e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionColumn {
    pub column_id: String,
    pub name: String,
    pub instruction: String,
}

impl ExtractionColumn {
    pub fn new(column_id: &str, name: &str, instruction: &str) -> Self {
        Self {
            column_id: column_id.into(),
            name: name.into(),
            instruction: instruction.into(),
        }
    }

    /// The built-in column holding each document's answer to the question.
    pub fn answer() -> Self {
        Self::new(
            ANSWER_COLUMN_ID,
            "Answer",
            "Answer the research question using only the article text.",
        )
    }

    fn is_answer(&self) -> bool {
        self.column_id == ANSWER_COLUMN_ID
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchRequest {
    pub question: String,
    pub filter: Option<FilterExpr>,
    pub page: Page,
    pub columns: Vec<ExtractionColumn>,
    pub synthesis_n: usize,
}

impl SearchRequest {
    pub fn new(question: &str) -> Self {
        Self {
            question: question.to_string(),
            filter: None,
            page: Page::default(),
            columns: vec![ExtractionColumn::answer()],
            synthesis_n: DEFAULT_SYNTHESIS_N,
        }
    }

    pub fn with_filter(mut self, filter: FilterExpr) -> Self {
        self.filter = Some(filter);
        self
    }

    pub fn with_page(mut self, page: Page) -> Self {
        self.page = page;
        self
    }

    /// Sets the extra columns; the answer column is kept in front.
    pub fn with_columns(mut self, columns: Vec<ExtractionColumn>) -> Self {
        self.columns = columns;
        self
    }

    /// Puts the built-in answer column at position 0 and checks ids and
    /// instructions.
    pub fn normalized(mut self) -> Result<Self, StageError> {
        let invalid = |m: String| StageError::new(Stage::Request, "validation_error", m);
        self.question = self.question.trim().to_string();
        if self.question.is_empty() {
            return Err(invalid("question is empty".into()));
        }
        if self.synthesis_n == 0 {
            return Err(invalid("synthesis_n must be at least 1".into()));
        }
        let answer = match self.columns.iter().position(ExtractionColumn::is_answer) {
            Some(i) => self.columns.remove(i),
            None => ExtractionColumn::answer(),
        };
        self.columns.insert(0, answer);
        let mut ids = BTreeSet::new();
        for c in &self.columns {
            if c.column_id.trim().is_empty() {
                return Err(invalid("column_id is empty".into()));
            }
            if c.column_id == SYNTHESIS_COLUMN_ID {
                return Err(invalid(format!("column id `{SYNTHESIS_COLUMN_ID}` is reserved")));
            }
            if !ids.insert(c.column_id.as_str()) {
                return Err(invalid(format!("duplicate column id `{}`", c.column_id)));
            }
            if c.instruction.trim().is_empty() {
                return Err(invalid(format!("column `{}` has an empty instruction", c.column_id)));
            }
        }
        if let Some(f) = &self.filter {
            f.validate_structure()
                .map_err(|e| StageError::new(Stage::Filter, "filter_error", e.to_string()))?;
        }
        Ok(self)
    }

    /// Stable id of the query, independent of the page.
    pub fn question_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.question.as_bytes());
        h.update([0]);
        if let Some(f) = &self.filter {
            h.update(crate::vectorstore::print_filter(f).as_bytes());
        }
        h.update([0]);
        for c in &self.columns {
            for part in [&c.column_id, &c.name, &c.instruction] {
                h.update((part.len() as u64).to_le_bytes());
                h.update(part.as_bytes());
            }
        }
        h.update((self.synthesis_n as u64).to_le_bytes());
        hex::encode(&h.finalize()[..12])
    }
}

/// A ranked hit joined with document metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultHit {
    /// 1-based position in the full ranking.
    pub rank: usize,
    pub doc_id: String,
    pub score: f32,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doi: Option<String>,
    pub authors: Vec<crate::corpus::Author>,
    pub urls: Vec<String>,
    pub has_fulltext: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub doc_id: String,
    pub column_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<ChainOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StageError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedAnswer {
    pub text: String,
    pub cited_indices: BTreeSet<usize>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub doc_id: String,
    pub column_id: String,
    pub record: GenerationRecord,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReproducibilityRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<GenerationRecord>,
    pub cells: Vec<CellRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub question_id: String,
    pub question: String,
    pub hits: Vec<ResultHit>,
    pub cells: Vec<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthesizedAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis_error: Option<StageError>,
    pub repro: ReproducibilityRecord,
    pub warning: String,
}

/// Result of [`Engine::load_more`]: new hits and their cells only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchFragment {
    pub question_id: String,
    pub page: Page,
    pub hits: Vec<ResultHit>,
    pub cells: Vec<Cell>,
    pub repro: ReproducibilityRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexFailure {
    pub doc_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineIngestReport {
    #[serde(flatten)]
    pub report: IngestReport,
    pub indexed: usize,
    pub unindexed: Vec<IndexFailure>,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("engine configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub doc_id: Option<String>,
    pub column_id: String,
    #[serde(flatten)]
    pub outcome: ReplayOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub entries: Vec<ReplayEntry>,
    pub all_reproduced: bool,
}

/// Strips `[n]` markers outside `1..=max_index` (and malformed ones such as
/// `[0]` or `[01]`). Returns the cleaned text, the cited set, and the
/// removed markers.
pub fn validate_citations(text: &str, max_index: usize) -> (String, BTreeSet<usize>, Vec<String>) {
    let mut out = String::with_capacity(text.len());
    let mut cited = BTreeSet::new();
    let mut stripped = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('[') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let digits = after.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 && after.as_bytes().get(digits) == Some(&b']') {
            let marker = &rest[open..open + digits + 2];
            let number = &after[..digits];
            match number.parse::<usize>() {
                Ok(n) if (1..=max_index).contains(&n) && !number.starts_with('0') => {
                    cited.insert(n);
                    out.push_str(marker);
                }
                _ => stripped.push(marker.to_string()),
            }
            rest = &after[digits + 1..];
        } else {
            out.push('[');
            rest = after;
        }
    }
    out.push_str(rest);
    (out, cited, stripped)
}

pub struct Engine {
    corpus: CorpusStore,
    index: VectorIndex,
    embedder: Arc<dyn Embedder>,
    model: Arc<dyn ModelProvider>,
    cache: CellCache,
    templates: TemplateRegistry,
    params: GenerationParams,
    parallelism: usize,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("corpus", &self.corpus)
            .field("index_len", &self.index.len())
            .field("params", &self.params)
            .finish()
    }
}

struct Templates<'a> {
    answer: &'a PromptTemplate,
    column: &'a PromptTemplate,
    synthesis: &'a PromptTemplate,
}

impl Engine {
    pub fn new(
        corpus: CorpusStore,
        index: VectorIndex,
        embedder: Arc<dyn Embedder>,
        model: Arc<dyn ModelProvider>,
        cache: CellCache,
        templates: TemplateRegistry,
        params: GenerationParams,
    ) -> Result<Self, EngineError> {
        if index.dimension() != embedder.dimension() {
            return Err(EngineError::Config(format!(
                "index dimension {} does not match embedder dimension {}",
                index.dimension(),
                embedder.dimension()
            )));
        }
        for id in [ANSWER_TEMPLATE_ID, COLUMN_TEMPLATE_ID, SYNTHESIS_TEMPLATE_ID] {
            if templates.latest(id).is_none() {
                return Err(EngineError::Config(format!("template `{id}` is not registered")));
            }
        }
        params.validate().map_err(|e| EngineError::Config(e.to_string()))?;
        Ok(Self {
            corpus,
            index,
            embedder,
            model,
            cache,
            templates,
            params,
            parallelism: DEFAULT_PARALLELISM,
        })
    }

    /// Everything in memory, default templates and parameters.
    pub fn in_memory(embedder: Arc<dyn Embedder>, model: Arc<dyn ModelProvider>) -> Self {
        let index = VectorIndex::new(embedder.dimension());
        Self::new(
            CorpusStore::in_memory(),
            index,
            embedder,
            model,
            CellCache::in_memory(ragchain::cache::DEFAULT_MAX_ENTRIES),
            ragchain::default_templates(),
            GenerationParams::default(),
        )
        .expect("default engine configuration is valid")
    }

    pub fn with_parallelism(mut self, workers: usize) -> Self {
        self.parallelism = workers.max(1);
        self
    }

    pub fn with_params(mut self, params: GenerationParams) -> Result<Self, EngineError> {
        params.validate().map_err(|e| EngineError::Config(e.to_string()))?;
        self.params = params;
        Ok(self)
    }

    pub fn corpus(&self) -> &CorpusStore {
        &self.corpus
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn cache(&self) -> &CellCache {
        &self.cache
    }

    pub fn model(&self) -> &dyn ModelProvider {
        self.model.as_ref()
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn templates(&self) -> &TemplateRegistry {
        &self.templates
    }

    pub fn params(&self) -> &GenerationParams {
        &self.params
    }

    fn current_templates(&self) -> Templates<'_> {
        let get = |id| self.templates.latest(id).expect("checked at construction");
        Templates {
            answer: get(ANSWER_TEMPLATE_ID),
            column: get(COLUMN_TEMPLATE_ID),
            synthesis: get(SYNTHESIS_TEMPLATE_ID),
        }
    }

    /// Curates and stores a batch, then embeds and indexes the accepted
    /// documents. Documents that cannot be embedded stay in the corpus and are
    /// listed in `unindexed`.
    pub fn ingest(
        &self,
        records: impl IntoIterator<Item = RawRecord>,
        policy: &CurationPolicy,
    ) -> Result<EngineIngestReport, EngineError> {
        let outcome = self.corpus.ingest_batch(records, policy)?;
        let (indexed, unindexed) = self.index_documents(&outcome.accepted)?;
        Ok(EngineIngestReport {
            report: outcome.report,
            indexed,
            unindexed,
        })
    }

    /// Re-embeds every stored document into the index.
    pub fn reindex(&self) -> Result<EngineIngestReport, EngineError> {
        let docs = self.corpus.documents();
        let (indexed, unindexed) = self.index_documents(&docs)?;
        Ok(EngineIngestReport {
            report: IngestReport {
                total_seen: docs.len(),
                accepted: docs.len(),
                ..Default::default()
            },
            indexed,
            unindexed,
        })
    }

    fn index_documents(&self, docs: &[Document]) -> Result<(usize, Vec<IndexFailure>), EngineError> {
        const CHUNK: usize = 64;
        let mut records = Vec::with_capacity(docs.len());
        let mut failures = Vec::new();
        for chunk in docs.chunks(CHUNK) {
            let texts: Vec<String> = chunk.iter().map(Document::embedding_text).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let vectors = match self.embedder.embed_batch(&refs) {
                Ok(v) => v.into_iter().map(Ok).collect::<Vec<_>>(),
                Err(_) => refs.iter().map(|t| self.embedder.embed_text(t)).collect(),
            };
            for (doc, vector) in chunk.iter().zip(vectors) {
                match vector {
                    Ok(vector) => records.push(IndexedRecord {
                        doc_id: doc.doc_id.clone(),
                        vector,
                        payload: payload_for_document(doc),
                    }),
                    Err(e) => {
                        tracing::warn!(doc_id = %doc.doc_id, error = %e, "document not indexed");
                        failures.push(IndexFailure {
                            doc_id: doc.doc_id.clone(),
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
        let indexed = records.len();
        self.index.upsert_batch(records)?;
        Ok((indexed, failures))
    }

    pub fn ask(&self, request: SearchRequest) -> Result<SearchResponse, StageError> {
        let request = request.normalized()?;
        let (hits, docs) = self.retrieve(&request, request.page)?;
        let (cells, mut repro) = self.fill_cells(&request, &docs);

        let top: Vec<Document> = if request.page.offset == 0 {
            docs.iter().take(request.synthesis_n).cloned().collect()
        } else {
            let first = Page::new(0, request.synthesis_n.min(crate::vectorstore::MAX_PAGE_LIMIT))
                .map_err(|m| StageError::new(Stage::Request, "validation_error", m))?;
            self.retrieve(&request, first)?.1
        };
        let (synthesis, synthesis_error) = if top.is_empty() {
            (None, Some(StageError::new(Stage::Synthesis, "no_results", "no documents to summarize")))
        } else {
            match self.synthesize_answer(&request.question, &top) {
                Ok((answer, record)) => {
                    repro.synthesis = Some(record);
                    (Some(answer), None)
                }
                Err(e) => (None, Some(e)),
            }
        };

        Ok(SearchResponse {
            question_id: request.question_id(),
            question: request.question,
            hits,
            cells,
            synthesis,
            synthesis_error,
            repro,
            warning: WARNING_TEXT.to_string(),
        })
    }

    /// Next page of hits with cells for those hits only; no synthesis.
    pub fn load_more(&self, request: SearchRequest, next_page: Page) -> Result<SearchFragment, StageError> {
        let request = request.with_page(next_page).normalized()?;
        let (hits, docs) = self.retrieve(&request, next_page)?;
        let (cells, repro) = self.fill_cells(&request, &docs);
        Ok(SearchFragment {
            question_id: request.question_id(),
            page: next_page,
            hits,
            cells,
            repro,
        })
    }

    fn retrieve(&self, request: &SearchRequest, page: Page) -> Result<(Vec<ResultHit>, Vec<Document>), StageError> {
        let query = self
            .embedder
            .embed_text(&request.question)
            .map_err(|e| {
                let code = match e {
                    EmbedError::InvalidInput(_) => "invalid_input",
                    EmbedError::Provider { .. } => "provider_error",
                    _ => "embedding_error",
                };
                StageError {
                    retryable: e.is_retryable(),
                    ..StageError::new(Stage::Embedding, code, e.to_string())
                }
            })?;
        let hits = self
            .index
            .search(&query, request.filter.as_ref(), page)
            .map_err(|e| StageError::from_index(&e))?;
        let mut out = Vec::with_capacity(hits.len());
        let mut docs = Vec::with_capacity(hits.len());
        for (i, hit) in hits.into_iter().enumerate() {
            let doc = self
                .corpus
                .get_document(&hit.doc_id)
                .map_err(|e| StageError::new(Stage::Corpus, "not_found", e.to_string()))?;
            out.push(ResultHit {
                rank: page.offset + i + 1,
                doc_id: hit.doc_id,
                score: hit.score,
                title: doc.title.clone(),
                abstract_text: doc.abstract_text.clone(),
                source: doc.source.clone(),
                year: doc.year,
                doi: doc.doi.clone(),
                authors: doc.authors.clone(),
                urls: doc.urls.clone(),
                has_fulltext: doc.has_fulltext(),
            });
            docs.push(doc);
        }
        Ok((out, docs))
    }

    fn fill_cells(&self, request: &SearchRequest, docs: &[Document]) -> (Vec<Cell>, ReproducibilityRecord) {
        let tasks: Vec<(&Document, &ExtractionColumn)> = docs
            .iter()
            .flat_map(|d| request.columns.iter().map(move |c| (d, c)))
            .collect();
        let next = AtomicUsize::new(0);
        let workers = self.parallelism.min(tasks.len()).max(1);
        let mut results: Vec<Option<Result<CachedGeneration, StageError>>> = vec![None; tasks.len()];
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    s.spawn(|| {
                        let mut done = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            let Some(&(doc, column)) = tasks.get(i) else { break };
                            done.push((i, self.generate_cell(&request.question, doc, column)));
                        }
                        done
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("cell worker panicked") {
                    results[i] = Some(r);
                }
            }
        });

        let mut cells = Vec::with_capacity(tasks.len());
        let mut repro = ReproducibilityRecord::default();
        for ((doc, column), result) in tasks.iter().zip(results) {
            let (output, error) = match result.expect("every task ran") {
                Ok(gen) => {
                    repro.cells.push(CellRecord {
                        doc_id: doc.doc_id.clone(),
                        column_id: column.column_id.clone(),
                        record: gen.record,
                    });
                    (Some(gen.output), None)
                }
                Err(e) => (None, Some(e)),
            };
            cells.push(Cell {
                doc_id: doc.doc_id.clone(),
                column_id: column.column_id.clone(),
                output,
                error,
            });
        }
        (cells, repro)
    }

    fn generate_cell(
        &self,
        question: &str,
        doc: &Document,
        column: &ExtractionColumn,
    ) -> Result<CachedGeneration, StageError> {
        let t = self.current_templates();
        let (template, instruction) = if column.is_answer() {
            (t.answer, "")
        } else {
            (t.column, column.instruction.as_str())
        };
        let mut bindings = BTreeMap::new();
        bindings.insert("question".to_string(), question.to_string());
        if !column.is_answer() {
            bindings.insert("instruction".to_string(), instruction.to_string());
        }
        let ctx = select_context(doc, template, &bindings, &self.params)
            .map_err(|e| StageError::from_chain(Stage::Context, &e))?;
        let key = CellKey::new(CellKeyParts {
            doc_id: &doc.doc_id,
            column_id: &column.column_id,
            question,
            instruction,
            template_id: &template.template_id,
            template_version: template.version,
            params: &self.params,
            context_kind: ctx.kind,
            context: &ctx.text,
        });
        self.cache
            .get_or_generate(&key, || {
                bindings.insert(ragchain::CONTEXT_PLACEHOLDER.to_string(), ctx.text.clone());
                invoke_chain(template, &bindings, &self.params, ctx.kind, self.model.as_ref())
            })
            .map_err(|e| StageError::from_chain(Stage::Generation, &e))
    }

    /// Summarizes `top_docs` into one answer citing them as `[1]..[n]` in the
    /// given order. The prompt lists `[i] title — abstract` per document;
    /// abstracts are shortened evenly when the list would exceed the budget.
    pub fn synthesize_answer(
        &self,
        question: &str,
        top_docs: &[Document],
    ) -> Result<(SynthesizedAnswer, GenerationRecord), StageError> {
        if top_docs.is_empty() {
            return Err(StageError::new(Stage::Synthesis, "no_results", "no documents to summarize"));
        }
        let template = self.current_templates().synthesis;
        let sources = self.synthesis_sources(question, top_docs, template)?;
        let mut bindings = BTreeMap::new();
        bindings.insert("question".to_string(), question.to_string());
        bindings.insert("sources".to_string(), sources.clone());

        let ids: Vec<&str> = top_docs.iter().map(|d| d.doc_id.as_str()).collect();
        let joined = ids.join("\n");
        let key = CellKey::new(CellKeyParts {
            doc_id: &joined,
            column_id: SYNTHESIS_COLUMN_ID,
            question,
            instruction: "",
            template_id: &template.template_id,
            template_version: template.version,
            params: &self.params,
            context_kind: ContextKind::Abstract,
            context: &sources,
        });
        let gen = self
            .cache
            .get_or_generate(&key, || {
                invoke_chain(template, &bindings, &self.params, ContextKind::Abstract, self.model.as_ref())
            })
            .map_err(|e| StageError::from_chain(Stage::Synthesis, &e))?;

        let (text, cited_indices, stripped) = validate_citations(&gen.output.parsed_text, top_docs.len());
        if !stripped.is_empty() {
            tracing::warn!(?stripped, valid = top_docs.len(), "removed out-of-range citation markers");
        }
        Ok((
            SynthesizedAnswer {
                text,
                cited_indices,
                provenance: gen.output.provenance,
            },
            gen.record,
        ))
    }

    fn synthesis_sources(
        &self,
        question: &str,
        docs: &[Document],
        template: &PromptTemplate,
    ) -> Result<String, StageError> {
        let build = |cap: Option<usize>| -> String {
            docs.iter()
                .enumerate()
                .map(|(i, d)| {
                    let abs = match cap {
                        Some(c) => budget::truncate_to_tokens(&d.abstract_text, c),
                        None => d.abstract_text.as_str(),
                    };
                    format!("[{}] {} — {}", i + 1, d.title, abs)
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        let allowance = (self.params.context_window_tokens - self.params.max_new_tokens) as usize;
        let fits = |sources: &str| -> Result<bool, StageError> {
            let mut b = BTreeMap::new();
            b.insert("question".to_string(), question.to_string());
            b.insert("sources".to_string(), sources.to_string());
            let prompt = template
                .render(&b)
                .map_err(|e| StageError::new(Stage::Synthesis, "template_error", e.to_string()))?;
            Ok(prompt.estimate_tokens() <= allowance)
        };
        let full = build(None);
        if fits(&full)? {
            return Ok(full);
        }
        if !fits(&build(Some(0)))? {
            return Err(StageError::new(
                Stage::Synthesis,
                "budget_impossible",
                "source titles alone exceed the context window",
            ));
        }
        // Largest per-abstract cap that fits; the estimate grows with the cap.
        let (mut lo, mut hi) = (0usize, allowance);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if fits(&build(Some(mid)))? {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        Ok(build(Some(lo)))
    }

    /// Replays every generation in `record` against this engine's templates
    /// and model.
    pub fn replay(&self, record: &ReproducibilityRecord) -> ReplayReport {
        let mut entries: Vec<ReplayEntry> = record
            .cells
            .iter()
            .map(|c| ReplayEntry {
                doc_id: Some(c.doc_id.clone()),
                column_id: c.column_id.clone(),
                outcome: ragchain::replay(&c.record, &self.templates, self.model.as_ref()),
            })
            .collect();
        if let Some(s) = &record.synthesis {
            entries.push(ReplayEntry {
                doc_id: None,
                column_id: SYNTHESIS_COLUMN_ID.to_string(),
                outcome: ragchain::replay(s, &self.templates, self.model.as_ref()),
            });
        }
        let all_reproduced = entries.iter().all(|e| e.outcome.status == ReplayStatus::Reproduced);
        ReplayReport {
            entries,
            all_reproduced,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn citations_in_range_kept() {
        let (text, cited, stripped) = validate_citations("Cars [1] and trucks [3][2].", 3);
        assert_eq!(text, "Cars [1] and trucks [3][2].");
        assert_eq!(cited, BTreeSet::from([1, 2, 3]));
        assert!(stripped.is_empty());
    }

    #[test]
    fn out_of_range_and_malformed_stripped() {
        let (text, cited, stripped) = validate_citations("See [7], [0], [01] and [2]; [x] [ 3] [", 5);
        assert_eq!(text, "See , ,  and [2]; [x] [ 3] [");
        assert_eq!(cited, BTreeSet::from([2]));
        assert_eq!(stripped, ["[7]", "[0]", "[01]"]);
    }

    #[test]
    fn huge_marker_number_stripped() {
        let (text, cited, _) = validate_citations("x [99999999999999999999999] y", 5);
        assert_eq!(text, "x  y");
        assert!(cited.is_empty());
    }

    #[test]
    fn request_normalization() {
        let r = SearchRequest::new("  q  ")
            .with_columns(vec![ExtractionColumn::new("methods", "Methods", "List the methods.")])
            .normalized()
            .unwrap();
        assert_eq!(r.question, "q");
        assert_eq!(r.columns[0].column_id, ANSWER_COLUMN_ID);
        assert_eq!(r.columns.len(), 2);

        assert!(SearchRequest::new(" ").normalized().is_err());
        let dup = SearchRequest::new("q").with_columns(vec![
            ExtractionColumn::new("m", "M", "x"),
            ExtractionColumn::new("m", "M2", "y"),
        ]);
        assert!(dup.normalized().is_err());
        let empty = SearchRequest::new("q").with_columns(vec![ExtractionColumn::new("m", "M", " ")]);
        assert!(empty.normalized().is_err());
    }

    #[test]
    fn question_id_ignores_page() {
        let a = SearchRequest::new("q");
        let b = SearchRequest::new("q").with_page(Page::new(10, 10).unwrap());
        assert_eq!(a.question_id(), b.question_id());
        assert_ne!(a.question_id(), SearchRequest::new("q2").question_id());
    }
}
