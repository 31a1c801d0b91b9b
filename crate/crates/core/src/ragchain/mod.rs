//! Parametric memory: a chain is a prompt template, a model provider and an
//! output parser, run under a context-token budget.

pub mod budget;
pub mod cache;
pub mod model;
pub mod parser;
pub mod template;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Document;

pub use budget::{estimate_tokens, truncate_to_tokens};
pub use cache::CellCache;
pub use model::{ModelProvider, ProviderError, RemoteModel, StubModel};
pub use parser::{parse_output, sanitize};
pub use template::{default_templates, PromptTemplate, RenderedPrompt, TemplateError, TemplateRegistry};

/// Placeholder that receives document text in extraction templates.
pub const CONTEXT_PLACEHOLDER: &str = "context";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("model returned empty output after parsing")]
    EmptyOutput,
    #[error("prompt needs {estimated} tokens plus {max_new_tokens} new tokens, window is {window}")]
    BudgetExceeded {
        estimated: usize,
        max_new_tokens: usize,
        window: usize,
    },
    #[error("prompt without any context already exceeds the {window}-token window")]
    BudgetImpossible { window: usize },
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
}

impl ChainError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Template(_) => "template_error",
            Self::Provider(_) => "provider_error",
            Self::EmptyOutput => "parse_error",
            Self::BudgetExceeded { .. } => "budget_exceeded",
            Self::BudgetImpossible { .. } => "budget_impossible",
            Self::InvalidParams(_) => "invalid_params",
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Provider(p) if p.retryable)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model_id: String,
    pub temperature: f64,
    pub seed: u64,
    pub max_new_tokens: u32,
    pub context_window_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            model_id: "stub-model".into(),
            temperature: 0.0,
            seed: 42,
            max_new_tokens: 512,
            context_window_tokens: 32_768,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), ChainError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ChainError::InvalidParams("temperature must be a finite value >= 0".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(ChainError::InvalidParams("max_new_tokens must be at least 1".into()));
        }
        if self.max_new_tokens >= self.context_window_tokens {
            return Err(ChainError::InvalidParams("max_new_tokens must be below the context window".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(ChainError::InvalidParams("model_id is empty".into()));
        }
        Ok(())
    }

    fn prompt_allowance(&self) -> usize {
        (self.context_window_tokens - self.max_new_tokens) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    Abstract,
    Fulltext,
}

impl fmt::Display for ContextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Abstract => "abstract",
            Self::Fulltext => "fulltext",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub raw_text: String,
    pub parsed_text: String,
    pub model_calls: u32,
    pub provenance: Provenance,
    pub context_kind: ContextKind,
}

/// Everything needed to re-render a prompt and re-run its generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub template_id: String,
    pub template_version: u32,
    pub bindings: BTreeMap<String, String>,
    pub prompt_system: String,
    pub prompt_user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primer: Option<String>,
    pub model_id: String,
    pub temperature: f64,
    pub seed: u64,
    pub max_new_tokens: u32,
    pub context_window_tokens: u32,
    pub context_kind: ContextKind,
    pub parsed_text: String,
}

impl GenerationRecord {
    pub fn params(&self) -> GenerationParams {
        GenerationParams {
            model_id: self.model_id.clone(),
            temperature: self.temperature,
            seed: self.seed,
            max_new_tokens: self.max_new_tokens,
            context_window_tokens: self.context_window_tokens,
        }
    }

    pub fn prompt(&self) -> RenderedPrompt {
        RenderedPrompt {
            system: self.prompt_system.clone(),
            user: self.prompt_user.clone(),
            primer: self.primer.clone(),
        }
    }
}

/// What the cell cache stores: the output together with its record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedGeneration {
    pub output: ChainOutput,
    pub record: GenerationRecord,
}

/// Content address of one generated cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellKey(String);

/// Inputs hashed into a [`CellKey`].
#[derive(Debug, Clone, Copy)]
pub struct CellKeyParts<'a> {
    pub doc_id: &'a str,
    pub column_id: &'a str,
    pub question: &'a str,
    pub instruction: &'a str,
    pub template_id: &'a str,
    pub template_version: u32,
    pub params: &'a GenerationParams,
    pub context_kind: ContextKind,
    pub context: &'a str,
}

impl CellKey {
    pub fn new(parts: CellKeyParts<'_>) -> Self {
        let mut h = Sha256::new();
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(b"cell-v1");
        field(parts.doc_id.as_bytes());
        field(parts.column_id.as_bytes());
        field(parts.question.as_bytes());
        field(parts.instruction.as_bytes());
        field(parts.template_id.as_bytes());
        field(&parts.template_version.to_le_bytes());
        field(parts.params.model_id.as_bytes());
        field(&parts.params.temperature.to_bits().to_le_bytes());
        field(&parts.params.seed.to_le_bytes());
        field(&parts.params.max_new_tokens.to_le_bytes());
        field(parts.context_kind.to_string().as_bytes());
        field(&Sha256::digest(parts.context.as_bytes()));
        Self(hex::encode(h.finalize()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn check_budget(prompt: &RenderedPrompt, params: &GenerationParams) -> Result<(), ChainError> {
    let estimated = prompt.estimate_tokens();
    if estimated > params.prompt_allowance() {
        return Err(ChainError::BudgetExceeded {
            estimated,
            max_new_tokens: params.max_new_tokens as usize,
            window: params.context_window_tokens as usize,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectedContext {
    pub text: String,
    pub kind: ContextKind,
    pub truncated: bool,
}

/// Picks full text when present, otherwise the abstract, and truncates it so
/// the rendered prompt plus `max_new_tokens` fits the context window.
/// `bindings` holds every placeholder except [`CONTEXT_PLACEHOLDER`].
pub fn select_context(
    doc: &Document,
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
    params: &GenerationParams,
) -> Result<SelectedContext, ChainError> {
    params.validate()?;
    let (source, kind) = match doc.full_text.as_deref().filter(|t| !t.is_empty()) {
        Some(full) => (full, ContextKind::Fulltext),
        None => (doc.abstract_text.as_str(), ContextKind::Abstract),
    };
    let allowance = params.prompt_allowance();
    let mut bindings = bindings.clone();
    let mut fits = |ctx: &str| -> Result<bool, TemplateError> {
        bindings.insert(CONTEXT_PLACEHOLDER.to_string(), ctx.to_string());
        Ok(template.render(&bindings)?.estimate_tokens() <= allowance)
    };
    if fits(source)? {
        return Ok(SelectedContext {
            text: source.to_string(),
            kind,
            truncated: false,
        });
    }
    if !fits("")? {
        return Err(ChainError::BudgetImpossible {
            window: params.context_window_tokens as usize,
        });
    }
    let cut = budget::longest_prefix_within(source, |prefix| fits(prefix).unwrap_or(false));
    Ok(SelectedContext {
        text: source[..cut].to_string(),
        kind,
        truncated: true,
    })
}

/// Renders, checks the budget, calls the model once and parses the output.
pub fn invoke_chain(
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
    params: &GenerationParams,
    context_kind: ContextKind,
    model: &dyn ModelProvider,
) -> Result<CachedGeneration, ChainError> {
    params.validate()?;
    let prompt = template.render(bindings)?;
    check_budget(&prompt, params)?;
    let raw_text = model.generate(&prompt, params)?;
    let parsed_text = parse_output(&raw_text, prompt.primer.as_deref()).ok_or(ChainError::EmptyOutput)?;
    let record = GenerationRecord {
        template_id: template.template_id.clone(),
        template_version: template.version,
        bindings: bindings.clone(),
        prompt_system: prompt.system,
        prompt_user: prompt.user,
        primer: prompt.primer,
        model_id: params.model_id.clone(),
        temperature: params.temperature,
        seed: params.seed,
        max_new_tokens: params.max_new_tokens,
        context_window_tokens: params.context_window_tokens,
        context_kind,
        parsed_text: parsed_text.clone(),
    };
    Ok(CachedGeneration {
        output: ChainOutput {
            raw_text,
            parsed_text,
            model_calls: 1,
            provenance: Provenance::Generated,
            context_kind,
        },
        record,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayStatus {
    /// Prompt bytes and parsed text both reproduced.
    Reproduced,
    /// Prompt bytes reproduced, model output differs.
    PromptOnly,
    /// Re-rendering did not give the recorded prompt.
    PromptMismatch,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub status: ReplayStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Re-renders a recorded generation from its template and bindings, checks
/// the prompt bytes, and re-runs it against `model`.
pub fn replay(record: &GenerationRecord, templates: &TemplateRegistry, model: &dyn ModelProvider) -> ReplayOutcome {
    let failed = |e: String| ReplayOutcome {
        status: ReplayStatus::Failed,
        parsed_text: None,
        error: Some(e),
    };
    let template = match templates.get(&record.template_id, record.template_version) {
        Ok(t) => t,
        Err(e) => return failed(e.to_string()),
    };
    let prompt = match template.render(&record.bindings) {
        Ok(p) => p,
        Err(e) => return failed(e.to_string()),
    };
    if prompt != record.prompt() {
        return ReplayOutcome {
            status: ReplayStatus::PromptMismatch,
            parsed_text: None,
            error: None,
        };
    }
    match invoke_chain(template, &record.bindings, &record.params(), record.context_kind, model) {
        Ok(gen) => ReplayOutcome {
            status: if gen.output.parsed_text == record.parsed_text {
                ReplayStatus::Reproduced
            } else {
                ReplayStatus::PromptOnly
            },
            parsed_text: Some(gen.output.parsed_text),
            error: None,
        },
        Err(e) => failed(e.to_string()),
    }
}
