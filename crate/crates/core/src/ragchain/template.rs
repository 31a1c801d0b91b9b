//! Versioned prompt templates with `{placeholder}` slots.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::budget::estimate_tokens;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("invalid placeholder name `{0}` (expected [a-z_]+)")]
    InvalidName(String),
    #[error("placeholder `{0}` is used but not declared")]
    Undeclared(String),
    #[error("missing binding for placeholder `{0}`")]
    MissingPlaceholder(String),
    #[error("binding `{0}` does not match any placeholder")]
    UnknownPlaceholder(String),
    #[error("template file: {0}")]
    Format(String),
    #[error("template `{id}` version {version} not found")]
    NotFound { id: String, version: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub version: u32,
    pub placeholders: BTreeSet<String>,
    pub system_text: String,
    pub user_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primer: Option<String>,
}

/// A piece of template text: literal or slot.
#[derive(Debug, PartialEq)]
enum Part<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

/// Splits on `{name}` where name matches `[a-z_]+`; any other brace is literal.
fn parts(text: &str) -> Vec<Part<'_>> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut literal_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let name_len = bytes[i + 1..].iter().take_while(|b| b.is_ascii_lowercase() || **b == b'_').count();
            let close = i + 1 + name_len;
            if name_len > 0 && bytes.get(close) == Some(&b'}') {
                if literal_start < i {
                    out.push(Part::Literal(&text[literal_start..i]));
                }
                out.push(Part::Slot(&text[i + 1..close]));
                i = close + 1;
                literal_start = i;
                continue;
            }
        }
        i += 1;
    }
    if literal_start < text.len() {
        out.push(Part::Literal(&text[literal_start..]));
    }
    out
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
}

/// Prompt sections after substitution. Sections stay separate all the way to
/// the provider, so bound values cannot open or close a section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primer: Option<String>,
}

impl RenderedPrompt {
    /// The single text the token budget is measured on.
    pub fn assembled(&self) -> String {
        let mut s = String::with_capacity(self.system.len() + self.user.len() + 4);
        s.push_str(&self.system);
        s.push_str("\n\n");
        s.push_str(&self.user);
        if let Some(p) = &self.primer {
            s.push_str("\n\n");
            s.push_str(p);
        }
        s
    }

    pub fn estimate_tokens(&self) -> usize {
        estimate_tokens(&self.assembled())
    }
}

impl PromptTemplate {
    pub fn new<'a>(
        template_id: &str,
        version: u32,
        placeholders: impl IntoIterator<Item = &'a str>,
        system_text: &str,
        user_text: &str,
        primer: Option<&str>,
    ) -> Result<Self, TemplateError> {
        let t = Self {
            template_id: template_id.to_string(),
            version,
            placeholders: placeholders.into_iter().map(str::to_string).collect(),
            system_text: system_text.to_string(),
            user_text: user_text.to_string(),
            primer: primer.map(str::to_string),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.template_id.trim().is_empty() {
            return Err(TemplateError::Format("template_id is empty".into()));
        }
        if let Some(bad) = self.placeholders.iter().find(|p| !valid_name(p)) {
            return Err(TemplateError::InvalidName(bad.clone()));
        }
        for text in self.texts() {
            for part in parts(text) {
                if let Part::Slot(name) = part {
                    if !self.placeholders.contains(name) {
                        return Err(TemplateError::Undeclared(name.to_string()));
                    }
                }
            }
        }
        Ok(())
    }

    fn texts(&self) -> impl Iterator<Item = &str> {
        [Some(self.system_text.as_str()), Some(self.user_text.as_str()), self.primer.as_deref()]
            .into_iter()
            .flatten()
    }

    /// Single-pass substitution: bound values are copied verbatim and never
    /// re-scanned for slots.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<RenderedPrompt, TemplateError> {
        if let Some(extra) = bindings.keys().find(|k| !self.placeholders.contains(*k)) {
            return Err(TemplateError::UnknownPlaceholder(extra.clone()));
        }
        if let Some(missing) = self.placeholders.iter().find(|p| !bindings.contains_key(*p)) {
            return Err(TemplateError::MissingPlaceholder(missing.clone()));
        }
        let fill = |text: &str| {
            let mut out = String::with_capacity(text.len());
            for part in parts(text) {
                match part {
                    Part::Literal(l) => out.push_str(l),
                    Part::Slot(name) => out.push_str(&bindings[name]),
                }
            }
            out
        };
        Ok(RenderedPrompt {
            system: fill(&self.system_text),
            user: fill(&self.user_text),
            primer: self.primer.as_deref().map(fill),
        })
    }

    /// New texts under the next version; unchanged texts keep the version.
    pub fn revise(&self, system_text: &str, user_text: &str, primer: Option<&str>) -> Result<Self, TemplateError> {
        if self.system_text == system_text && self.user_text == user_text && self.primer.as_deref() == primer {
            return Ok(self.clone());
        }
        let mut next = self.clone();
        next.version += 1;
        next.system_text = system_text.to_string();
        next.user_text = user_text.to_string();
        next.primer = primer.map(str::to_string);
        next.validate()?;
        Ok(next)
    }

    /// Parses a template file: a TOML header between `+++` lines followed by
    /// `@@system`, `@@user` and optional `@@primer` sections.
    pub fn parse_file(text: &str) -> Result<Self, TemplateError> {
        #[derive(Deserialize)]
        struct Header {
            template_id: String,
            version: u32,
            placeholders: Vec<String>,
        }

        let text = text.replace("\r\n", "\n");
        let rest = text
            .strip_prefix("+++\n")
            .ok_or_else(|| TemplateError::Format("missing `+++` header".into()))?;
        let end = rest
            .find("\n+++\n")
            .ok_or_else(|| TemplateError::Format("unterminated `+++` header".into()))?;
        let header: Header = toml::from_str(&rest[..end]).map_err(|e| TemplateError::Format(e.to_string()))?;
        let body = &rest[end + "\n+++\n".len()..];

        let mut sections: HashMap<&str, Vec<&str>> = HashMap::new();
        let mut current: Option<&str> = None;
        for line in body.split('\n') {
            if let Some(name) = line.strip_prefix("@@") {
                let name = name.trim();
                if !matches!(name, "system" | "user" | "primer") {
                    return Err(TemplateError::Format(format!("unknown section `@@{name}`")));
                }
                if sections.insert(name, Vec::new()).is_some() {
                    return Err(TemplateError::Format(format!("duplicate section `@@{name}`")));
                }
                current = Some(name);
            } else if let Some(name) = current {
                sections.get_mut(name).expect("section exists").push(line);
            } else if !line.trim().is_empty() {
                return Err(TemplateError::Format("text before the first section".into()));
            }
        }
        let take = |name: &str| {
            sections
                .get(name)
                .map(|lines| lines.join("\n").trim_end_matches('\n').to_string())
        };
        let system = take("system").ok_or_else(|| TemplateError::Format("missing @@system".into()))?;
        let user = take("user").ok_or_else(|| TemplateError::Format("missing @@user".into()))?;
        let primer = take("primer");
        Self::new(
            &header.template_id,
            header.version,
            header.placeholders.iter().map(String::as_str),
            &system,
            &user,
            primer.as_deref(),
        )
    }

    pub fn to_file_string(&self) -> String {
        let placeholders: Vec<String> = self.placeholders.iter().map(|p| format!("{p:?}")).collect();
        let mut s = format!(
            "+++\ntemplate_id = {:?}\nversion = {}\nplaceholders = [{}]\n+++\n@@system\n{}\n@@user\n{}\n",
            self.template_id,
            self.version,
            placeholders.join(", "),
            self.system_text,
            self.user_text
        );
        if let Some(p) = &self.primer {
            s.push_str("@@primer\n");
            s.push_str(p);
            s.push('\n');
        }
        s
    }
}

/// Templates addressable by `(template_id, version)`, so that recorded
/// generations can be re-rendered after templates are revised.
#[derive(Debug, Clone, Default)]
pub struct TemplateRegistry {
    templates: BTreeMap<(String, u32), PromptTemplate>,
}

impl TemplateRegistry {
    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates
            .insert((template.template_id.clone(), template.version), template);
    }

    pub fn get(&self, id: &str, version: u32) -> Result<&PromptTemplate, TemplateError> {
        self.templates
            .get(&(id.to_string(), version))
            .ok_or_else(|| TemplateError::NotFound {
                id: id.to_string(),
                version,
            })
    }

    pub fn latest(&self, id: &str) -> Option<&PromptTemplate> {
        self.templates
            .range((id.to_string(), 0)..=(id.to_string(), u32::MAX))
            .next_back()
            .map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Loads every `*.tmpl` file in `dir`.
    pub fn load_dir(&mut self, dir: &std::path::Path) -> Result<usize, TemplateError> {
        let mut n = 0;
        let entries = std::fs::read_dir(dir).map_err(|e| TemplateError::Format(e.to_string()))?;
        for entry in entries {
            let path = entry.map_err(|e| TemplateError::Format(e.to_string()))?.path();
            if path.extension().is_some_and(|e| e == "tmpl") {
                let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Format(e.to_string()))?;
                self.insert(PromptTemplate::parse_file(&text)?);
                n += 1;
            }
        }
        Ok(n)
    }
}

pub const ANSWER_TEMPLATE_ID: &str = "answer_extraction";
pub const COLUMN_TEMPLATE_ID: &str = "column_extraction";
pub const SYNTHESIS_TEMPLATE_ID: &str = "synthesis";

const ANSWER_FILE: &str = include_str!("../../templates/answer_extraction.tmpl");
const COLUMN_FILE: &str = include_str!("../../templates/column_extraction.tmpl");
const SYNTHESIS_FILE: &str = include_str!("../../templates/synthesis.tmpl");

/// The three shipped templates.
pub fn default_templates() -> TemplateRegistry {
    let mut reg = TemplateRegistry::default();
    for file in [ANSWER_FILE, COLUMN_FILE, SYNTHESIS_FILE] {
        reg.insert(PromptTemplate::parse_file(file).expect("bundled template parses"));
    }
    reg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn no_placeholders_is_identity() {
        let t = PromptTemplate::new("t", 1, [], "System {not a slot} {X}", "User text {}", Some("Primer")).unwrap();
        let r = t.render(&BTreeMap::new()).unwrap();
        assert_eq!(r.system, "System {not a slot} {X}");
        assert_eq!(r.user, "User text {}");
        assert_eq!(r.primer.as_deref(), Some("Primer"));
    }

    #[test]
    fn substitutes_all_slots() {
        let t = PromptTemplate::new("t", 1, ["question", "context"], "sys", "Answer {question} using {context}", None)
            .unwrap();
        let r = t
            .render(&bind(&[("question", "why?"), ("context", "because")]))
            .unwrap();
        assert_eq!(r.user, "Answer why? using because");
        assert!(!r.user.contains('{'));
    }

    #[test]
    fn values_are_not_reexpanded() {
        let t = PromptTemplate::new("t", 1, ["question", "context"], "sys", "Q: {question}\nC: {context}", None)
            .unwrap();
        let r = t
            .render(&bind(&[("question", "literal {context} here"), ("context", "CTX")]))
            .unwrap();
        assert_eq!(r.user, "Q: literal {context} here\nC: CTX");
        // Only the two template slots were expanded: one CTX, and the
        // literal slot text survives exactly once.
        assert_eq!(r.user.matches("CTX").count(), 1);
        assert_eq!(r.user.matches("{context}").count(), 1);
    }

    #[test]
    fn binding_errors() {
        let t = PromptTemplate::new("t", 1, ["question"], "sys", "{question}", None).unwrap();
        assert_eq!(
            t.render(&BTreeMap::new()),
            Err(TemplateError::MissingPlaceholder("question".into()))
        );
        assert_eq!(
            t.render(&bind(&[("question", "q"), ("extra", "x")])),
            Err(TemplateError::UnknownPlaceholder("extra".into()))
        );
    }

    #[test]
    fn declaration_rules() {
        assert_eq!(
            PromptTemplate::new("t", 1, ["a"], "{b}", "", None),
            Err(TemplateError::Undeclared("b".into()))
        );
        assert_eq!(
            PromptTemplate::new("t", 1, ["Bad"], "", "", None),
            Err(TemplateError::InvalidName("Bad".into()))
        );
    }

    #[test]
    fn revise_bumps_version_only_on_change() {
        let t = PromptTemplate::new("t", 3, [], "a", "b", None).unwrap();
        assert_eq!(t.revise("a", "b", None).unwrap().version, 3);
        assert_eq!(t.revise("a", "c", None).unwrap().version, 4);
        assert_eq!(t.revise("a", "b", Some("p")).unwrap().version, 4);
    }

    #[test]
    fn file_round_trip() {
        let t = PromptTemplate::new(
            "demo",
            2,
            ["question", "context"],
            "Line one\n\nLine {question}",
            "Ctx:\n{context}",
            Some("Answer:"),
        )
        .unwrap();
        let parsed = PromptTemplate::parse_file(&t.to_file_string()).unwrap();
        assert_eq!(parsed, t);
    }

    #[test]
    fn bundled_templates_load() {
        let reg = default_templates();
        assert_eq!(reg.len(), 3);
        for id in [ANSWER_TEMPLATE_ID, COLUMN_TEMPLATE_ID, SYNTHESIS_TEMPLATE_ID] {
            assert!(reg.latest(id).unwrap().placeholders.contains("question"), "{id}");
        }
        assert!(reg.latest(COLUMN_TEMPLATE_ID).unwrap().placeholders.contains("instruction"));
        assert!(reg.latest(SYNTHESIS_TEMPLATE_ID).unwrap().placeholders.contains("sources"));
        assert!(reg.latest(SYNTHESIS_TEMPLATE_ID).unwrap().primer.is_some());
        assert!(reg.get(ANSWER_TEMPLATE_ID, 99).is_err());
    }

    #[test]
    fn malformed_files() {
        assert!(PromptTemplate::parse_file("no header").is_err());
        assert!(PromptTemplate::parse_file("+++\ntemplate_id = \"x\"\nversion = 1\nplaceholders = []\n+++\n@@user\nhi\n").is_err());
        assert!(PromptTemplate::parse_file(
            "+++\ntemplate_id = \"x\"\nversion = 1\nplaceholders = []\n+++\n@@system\na\n@@bogus\nb\n"
        )
        .is_err());
    }
}
