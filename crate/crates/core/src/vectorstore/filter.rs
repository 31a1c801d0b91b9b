//! Filter expressions and their URL grammar.
//!
//! An encoded filter is a list of `key=value` pairs joined by `&`:
//!
//! ```text
//! key   := GROUP '[' index ']' ( '[' GROUP ']' '[' index ']' )* '[' field ']' '[' op ']' '[' index ']'
//! GROUP := 'AND' | 'OR'
//! op    := 'eq' | 'inList' | 'gte' | 'lte'
//! ```
//!
//! Pairs sharing a group path and `(field, op)` accumulate arguments ordered
//! by the trailing index, so `AND[0][source][inList][0]=X&AND[0][source][inList][1]=Y`
//! is one `inList` predicate. Top-level groups combine conjunctively. Values
//! are percent-encoded. Children keep the order of their first appearance.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FieldKind, Payload, PayloadSchema, PayloadValue};

/// Everything except unreserved URL characters is escaped in values.
const VALUE_ESCAPE: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'.').remove(b'_').remove(b'~');

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("empty filter")]
    Empty,
    #[error("syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown operator `{op}` at position {position}")]
    UnknownOp { position: usize, op: String },
    #[error("unknown filter field `{0}`")]
    UnknownField(String),
    #[error("operator `{op}` cannot be applied to {kind} field `{field}`")]
    TypeMismatch { field: String, op: PredicateOp, kind: FieldKind },
    #[error("invalid filter: {0}")]
    Invalid(String),
}

impl FilterError {
    pub fn position(&self) -> Option<usize> {
        match self {
            Self::Syntax { position, .. } | Self::UnknownOp { position, .. } => Some(*position),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupOp {
    #[serde(rename = "AND")]
    And,
    #[serde(rename = "OR")]
    Or,
}

impl GroupOp {
    fn keyword(self) -> &'static str {
        match self {
            Self::And => "AND",
            Self::Or => "OR",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "AND" => Some(Self::And),
            "OR" => Some(Self::Or),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PredicateOp {
    #[serde(rename = "eq")]
    Eq,
    #[serde(rename = "inList")]
    InList,
    #[serde(rename = "gte")]
    Gte,
    #[serde(rename = "lte")]
    Lte,
}

impl PredicateOp {
    pub fn name(self) -> &'static str {
        match self {
            Self::Eq => "eq",
            Self::InList => "inList",
            Self::Gte => "gte",
            Self::Lte => "lte",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "eq" => Some(Self::Eq),
            "inList" => Some(Self::InList),
            "gte" => Some(Self::Gte),
            "lte" => Some(Self::Lte),
            _ => None,
        }
    }
}

impl fmt::Display for PredicateOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub field: String,
    pub op: PredicateOp,
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FilterExpr {
    Group { op: GroupOp, children: Vec<FilterExpr> },
    Predicate(Predicate),
}

impl FilterExpr {
    pub fn and(children: Vec<FilterExpr>) -> Self {
        Self::Group {
            op: GroupOp::And,
            children,
        }
    }

    pub fn or(children: Vec<FilterExpr>) -> Self {
        Self::Group {
            op: GroupOp::Or,
            children,
        }
    }

    pub fn pred(field: &str, op: PredicateOp, args: &[&str]) -> Self {
        Self::Predicate(Predicate {
            field: field.to_string(),
            op,
            args: args.iter().map(|s| s.to_string()).collect(),
        })
    }

    /// Schema-independent well-formedness: non-empty groups, valid field
    /// names, argument counts, numeric bounds, and at most one predicate per
    /// `(field, op)` within a group.
    pub fn validate_structure(&self) -> Result<(), FilterError> {
        match self {
            Self::Group { children, .. } => {
                if children.is_empty() {
                    return Err(FilterError::Invalid("group has no children".into()));
                }
                let mut seen = std::collections::HashSet::new();
                for child in children {
                    if let Self::Predicate(p) = child {
                        if !seen.insert((p.field.as_str(), p.op)) {
                            return Err(FilterError::Invalid(format!(
                                "group repeats predicate `{}` `{}`",
                                p.field, p.op
                            )));
                        }
                    }
                    child.validate_structure()?;
                }
                Ok(())
            }
            Self::Predicate(p) => check_predicate(p),
        }
    }

    /// Structure plus schema: every field known and every operator applicable.
    pub fn validate(&self, schema: &PayloadSchema) -> Result<(), FilterError> {
        self.validate_structure()?;
        self.check_schema(schema)
    }

    fn check_schema(&self, schema: &PayloadSchema) -> Result<(), FilterError> {
        match self {
            Self::Group { children, .. } => children.iter().try_for_each(|c| c.check_schema(schema)),
            Self::Predicate(p) => {
                let kind = schema
                    .kind(&p.field)
                    .ok_or_else(|| FilterError::UnknownField(p.field.clone()))?;
                for arg in &p.args {
                    parse_arg(p, kind, arg)?;
                }
                Ok(())
            }
        }
    }

    /// Evaluates against one payload. Missing payload values never match.
    pub fn evaluate(&self, payload: &Payload, schema: &PayloadSchema) -> Result<bool, FilterError> {
        match self {
            Self::Group { op: GroupOp::And, children } => {
                for c in children {
                    if !c.evaluate(payload, schema)? {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
            Self::Group { op: GroupOp::Or, children } => {
                for c in children {
                    if c.evaluate(payload, schema)? {
                        return Ok(true);
                    }
                }
                Ok(false)
            }
            Self::Predicate(p) => evaluate_predicate(p, payload, schema),
        }
    }
}

fn valid_field_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && GroupOp::parse(name).is_none()
}

fn check_predicate(p: &Predicate) -> Result<(), FilterError> {
    if !valid_field_name(&p.field) {
        return Err(FilterError::Invalid(format!("invalid field name `{}`", p.field)));
    }
    match p.op {
        PredicateOp::InList if p.args.is_empty() => {
            Err(FilterError::Invalid(format!("inList on `{}` has no values", p.field)))
        }
        PredicateOp::InList => Ok(()),
        op if p.args.len() != 1 => Err(FilterError::Invalid(format!(
            "`{op}` on `{}` takes exactly one value, got {}",
            p.field,
            p.args.len()
        ))),
        PredicateOp::Gte | PredicateOp::Lte if p.args[0].trim().parse::<f64>().is_err() => Err(FilterError::Invalid(
            format!("`{}` on `{}` needs a numeric value, got {:?}", p.op, p.field, p.args[0]),
        )),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TypedArg {
    Text(String),
    Number(f64),
    Bool(bool),
}

fn parse_arg(p: &Predicate, kind: FieldKind, arg: &str) -> Result<TypedArg, FilterError> {
    let mismatch = || FilterError::TypeMismatch {
        field: p.field.clone(),
        op: p.op,
        kind,
    };
    match (p.op, kind) {
        (PredicateOp::Gte | PredicateOp::Lte, FieldKind::Integer) => {
            arg.trim().parse().map(TypedArg::Number).map_err(|_| mismatch())
        }
        (PredicateOp::Gte | PredicateOp::Lte, _) => Err(mismatch()),
        (_, FieldKind::Text | FieldKind::TextList) => Ok(TypedArg::Text(arg.to_string())),
        (_, FieldKind::Integer) => arg.trim().parse().map(TypedArg::Number).map_err(|_| mismatch()),
        (_, FieldKind::Boolean) => match arg {
            "true" => Ok(TypedArg::Bool(true)),
            "false" => Ok(TypedArg::Bool(false)),
            _ => Err(mismatch()),
        },
    }
}

fn evaluate_predicate(p: &Predicate, payload: &Payload, schema: &PayloadSchema) -> Result<bool, FilterError> {
    let kind = schema
        .kind(&p.field)
        .ok_or_else(|| FilterError::UnknownField(p.field.clone()))?;
    let args = p
        .args
        .iter()
        .map(|a| parse_arg(p, kind, a))
        .collect::<Result<Vec<_>, _>>()?;
    let Some(value) = payload.get(&p.field) else {
        return Ok(false);
    };
    let equals = |arg: &TypedArg| match (value, arg) {
        (PayloadValue::Text(v), TypedArg::Text(a)) => v == a,
        (PayloadValue::TextList(vs), TypedArg::Text(a)) => vs.iter().any(|v| v == a),
        (PayloadValue::Int(v), TypedArg::Number(a)) => (*v as f64) == *a,
        (PayloadValue::Bool(v), TypedArg::Bool(a)) => v == a,
        _ => false,
    };
    Ok(match p.op {
        PredicateOp::Eq | PredicateOp::InList => args.iter().any(equals),
        PredicateOp::Gte | PredicateOp::Lte => {
            let (PayloadValue::Int(v), TypedArg::Number(bound)) = (value, &args[0]) else {
                return Ok(false);
            };
            let v = *v as f64;
            if p.op == PredicateOp::Gte {
                v >= *bound
            } else {
                v <= *bound
            }
        }
    })
}

/// Canonical encoding. A bare predicate is printed inside an `AND` group.
pub fn print_filter(expr: &FilterExpr) -> String {
    let mut pairs = Vec::new();
    match expr {
        FilterExpr::Group { op, children } => print_children(&format!("{}[0]", op.keyword()), children, &mut pairs),
        FilterExpr::Predicate(_) => print_children("AND[0]", std::slice::from_ref(expr), &mut pairs),
    }
    pairs.join("&")
}

fn print_children(prefix: &str, children: &[FilterExpr], out: &mut Vec<String>) {
    let mut nested = 0usize;
    for child in children {
        match child {
            FilterExpr::Group { op, children } => {
                let path = format!("{prefix}[{}][{nested}]", op.keyword());
                nested += 1;
                print_children(&path, children, out);
            }
            FilterExpr::Predicate(p) => {
                for (i, arg) in p.args.iter().enumerate() {
                    out.push(format!(
                        "{prefix}[{}][{}][{i}]={}",
                        p.field,
                        p.op.name(),
                        utf8_percent_encode(arg, VALUE_ESCAPE)
                    ));
                }
            }
        }
    }
}

#[derive(Debug)]
struct GroupBuilder {
    op: GroupOp,
    children: Vec<ChildBuilder>,
    nested: HashMap<usize, usize>,
    predicates: HashMap<(String, PredicateOp), usize>,
}

#[derive(Debug)]
enum ChildBuilder {
    Group(GroupBuilder),
    Predicate {
        field: String,
        op: PredicateOp,
        args: BTreeMap<usize, String>,
        position: usize,
    },
}

impl GroupBuilder {
    fn new(op: GroupOp) -> Self {
        Self {
            op,
            children: Vec::new(),
            nested: HashMap::new(),
            predicates: HashMap::new(),
        }
    }

    fn finish(self) -> Result<FilterExpr, FilterError> {
        let children = self
            .children
            .into_iter()
            .map(|c| match c {
                ChildBuilder::Group(g) => g.finish(),
                ChildBuilder::Predicate {
                    field,
                    op,
                    args,
                    position,
                } => {
                    let p = Predicate {
                        field,
                        op,
                        args: args.into_values().collect(),
                    };
                    check_predicate(&p).map_err(|e| FilterError::Syntax {
                        position,
                        message: e.to_string(),
                    })?;
                    Ok(FilterExpr::Predicate(p))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FilterExpr::Group { op: self.op, children })
    }
}

/// One bracketed or leading segment of a key, with its byte offset in the
/// whole input.
struct Segment<'a> {
    text: &'a str,
    position: usize,
}

fn split_key(key: &str, base: usize) -> Result<Vec<Segment<'_>>, FilterError> {
    let head_end = key.find('[').unwrap_or(key.len());
    let mut segments = vec![Segment {
        text: &key[..head_end],
        position: base,
    }];
    let mut rest = head_end;
    while rest < key.len() {
        if !key[rest..].starts_with('[') {
            return Err(FilterError::Syntax {
                position: base + rest,
                message: "expected `[`".into(),
            });
        }
        let close = key[rest..].find(']').ok_or_else(|| FilterError::Syntax {
            position: base + rest,
            message: "unclosed `[`".into(),
        })?;
        let inner = &key[rest + 1..rest + close];
        if inner.contains('[') {
            return Err(FilterError::Syntax {
                position: base + rest + 1 + inner.find('[').unwrap_or(0),
                message: "unexpected `[` inside brackets".into(),
            });
        }
        segments.push(Segment {
            text: inner,
            position: base + rest + 1,
        });
        rest += close + 1;
    }
    Ok(segments)
}

fn parse_index(seg: &Segment<'_>) -> Result<usize, FilterError> {
    if seg.text.is_empty() || !seg.text.bytes().all(|b| b.is_ascii_digit()) {
        return Err(FilterError::Syntax {
            position: seg.position,
            message: format!("expected an index, found `{}`", seg.text),
        });
    }
    seg.text.parse().map_err(|_| FilterError::Syntax {
        position: seg.position,
        message: format!("index `{}` out of range", seg.text),
    })
}

fn decode<'a>(raw: &'a str, position: usize) -> Result<std::borrow::Cow<'a, str>, FilterError> {
    percent_decode_str(raw).decode_utf8().map_err(|_| FilterError::Syntax {
        position,
        message: "percent-encoding does not decode to UTF-8".into(),
    })
}

/// Parses the encoded grammar. The result is always a group.
pub fn parse_filter(encoded: &str) -> Result<FilterExpr, FilterError> {
    if encoded.trim().is_empty() {
        return Err(FilterError::Empty);
    }
    let mut top: Vec<GroupBuilder> = Vec::new();
    let mut top_index: HashMap<usize, usize> = HashMap::new();

    let mut offset = 0usize;
    for pair in encoded.split('&') {
        let pair_start = offset;
        offset += pair.len() + 1;
        if pair.is_empty() {
            return Err(FilterError::Syntax {
                position: pair_start,
                message: "empty pair".into(),
            });
        }
        let eq = pair.find('=').ok_or_else(|| FilterError::Syntax {
            position: pair_start + pair.len(),
            message: "expected `=`".into(),
        })?;
        let key = decode(&pair[..eq], pair_start)?;
        let value = decode(&pair[eq + 1..], pair_start + eq + 1)?.into_owned();
        // Positions are exact for unencoded keys, which is the common case.
        let segments = split_key(&key, pair_start)?;

        let head = &segments[0];
        let group_op = GroupOp::parse(head.text).ok_or_else(|| FilterError::Syntax {
            position: head.position,
            message: format!("expected AND or OR, found `{}`", head.text),
        })?;
        let Some(gi_seg) = segments.get(1) else {
            return Err(FilterError::Syntax {
                position: pair_start + eq,
                message: "expected group index".into(),
            });
        };
        let gi = parse_index(gi_seg)?;
        let slot = *top_index.entry(gi).or_insert_with(|| {
            top.push(GroupBuilder::new(group_op));
            top.len() - 1
        });
        let mut group = &mut top[slot];
        if group.op != group_op {
            return Err(FilterError::Syntax {
                position: head.position,
                message: format!("group {gi} used with both AND and OR"),
            });
        }

        let mut i = 2;
        loop {
            let Some(seg) = segments.get(i) else {
                return Err(FilterError::Syntax {
                    position: pair_start + eq,
                    message: "expected field, operator and value index".into(),
                });
            };
            if let Some(op) = GroupOp::parse(seg.text) {
                let idx_seg = segments.get(i + 1).ok_or_else(|| FilterError::Syntax {
                    position: pair_start + eq,
                    message: "expected nested group index".into(),
                })?;
                let ci = parse_index(idx_seg)?;
                let pos = match group.nested.get(&ci) {
                    Some(&pos) => pos,
                    None => {
                        group.children.push(ChildBuilder::Group(GroupBuilder::new(op)));
                        group.nested.insert(ci, group.children.len() - 1);
                        group.children.len() - 1
                    }
                };
                let ChildBuilder::Group(child) = &mut group.children[pos] else {
                    unreachable!("nested index always points at a group")
                };
                if child.op != op {
                    return Err(FilterError::Syntax {
                        position: seg.position,
                        message: format!("nested group {ci} used with both AND and OR"),
                    });
                }
                group = child;
                i += 2;
                continue;
            }

            if segments.len() < i + 3 {
                return Err(FilterError::Syntax {
                    position: pair_start + eq,
                    message: "expected [field][op][index] after the group path".into(),
                });
            }
            if let Some(extra) = segments.get(i + 3) {
                return Err(FilterError::Syntax {
                    position: extra.position,
                    message: "unexpected segment after value index".into(),
                });
            }
            let field = seg.text;
            if !valid_field_name(field) {
                return Err(FilterError::Syntax {
                    position: seg.position,
                    message: format!("invalid field name `{field}`"),
                });
            }
            let op_seg = &segments[i + 1];
            let op = PredicateOp::parse(op_seg.text).ok_or_else(|| FilterError::UnknownOp {
                position: op_seg.position,
                op: op_seg.text.to_string(),
            })?;
            let ai_seg = &segments[i + 2];
            let ai = parse_index(ai_seg)?;
            let key = (field.to_string(), op);
            let pos = match group.predicates.get(&key) {
                Some(&pos) => pos,
                None => {
                    group.children.push(ChildBuilder::Predicate {
                        field: field.to_string(),
                        op,
                        args: BTreeMap::new(),
                        position: pair_start,
                    });
                    group.predicates.insert(key, group.children.len() - 1);
                    group.children.len() - 1
                }
            };
            let ChildBuilder::Predicate { args, .. } = &mut group.children[pos] else {
                unreachable!("predicate index always points at a predicate")
            };
            if args.insert(ai, value).is_some() {
                return Err(FilterError::Syntax {
                    position: ai_seg.position,
                    message: format!("duplicate value index {ai} for `{field}` `{op}`"),
                });
            }
            break;
        }
    }

    let mut groups = top.into_iter().map(GroupBuilder::finish).collect::<Result<Vec<_>, _>>()?;
    Ok(if groups.len() == 1 {
        groups.remove(0)
    } else {
        FilterExpr::and(groups)
    })
}
