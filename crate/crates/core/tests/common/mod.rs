//! Generators and reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ask_core::bibliography::{CitationItem, CslDate, CslName, DatePart};
use ask_core::corpus::{Author, RawRecord, RejectReason};
use ask_core::vectorstore::{FilterExpr, GroupOp, Payload, PayloadValue, Predicate, PredicateOp};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

pub const SPECIAL_SOURCE: &str = "TIB Forschungsberichte Autonomes Fahren";
pub const SOURCES: [&str; 4] = ["CORE", "arXiv", "PubMed", SPECIAL_SOURCE];
pub const LANGUAGES: [&str; 3] = ["en", "de", "fr"];

const VOCAB: [&str; 48] = [
    "autonomous", "vehicle", "driving", "safety", "sensor", "lidar", "camera", "fusion", "neural", "network",
    "training", "dataset", "benchmark", "traffic", "pedestrian", "detection", "tracking", "planning", "control",
    "simulation", "urban", "highway", "weather", "robust", "learning", "policy", "reward", "graph", "knowledge",
    "retrieval", "language", "model", "survey", "review", "evaluation", "energy", "battery", "charging", "route",
    "map", "localization", "uncertainty", "risk", "ethics", "regulation", "testing", "scenario", "annotation",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn words(rng: &mut impl Rng, n: usize) -> String {
    (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Title of at least 10 chars and abstract of at least 200, so the default
/// curation policy accepts it.
pub fn valid_record(rng: &mut impl Rng, id: &str) -> RawRecord {
    RawRecord {
        id: id.to_string(),
        title: Some(format!("Study of {}", words(rng, 4))),
        abstract_text: Some(format!("{} {}", words(rng, 40), id)),
        full_text: rng.gen_bool(0.3).then(|| words(rng, 120)),
        doi: rng.gen_bool(0.4).then(|| format!("10.1000/{id}")),
        source: SOURCES.choose(rng).unwrap().to_string(),
        year: rng.gen_bool(0.9).then(|| rng.gen_range(1990..=2024)),
        authors: vec![Author {
            family: "Doe".into(),
            given: "J.".into(),
        }],
        urls: vec![format!("https://example.org/{id}")],
        language: rng.gen_bool(0.8).then(|| LANGUAGES.choose(rng).unwrap().to_string()),
        extra: BTreeMap::new(),
    }
}

pub fn synthetic_records(seed: u64, n: usize) -> Vec<RawRecord> {
    let mut r = rng(seed);
    (0..n).map(|i| valid_record(&mut r, &format!("doc{i:05}"))).collect()
}

/// A corpus where every record carries one known defect (or none). Returns
/// the records and the expected outcome per record, `None` for accepted.
pub fn labeled_corpus(seed: u64, n: usize) -> (Vec<RawRecord>, Vec<Option<RejectReason>>) {
    let mut r = rng(seed);
    let mut records = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut accepted_ids: Vec<String> = Vec::new();
    for i in 0..n {
        let id = format!("rec{i:05}");
        let mut rec = valid_record(&mut r, &id);
        let label = match r.gen_range(0..10) {
            0 => {
                rec.title = if r.gen_bool(0.5) { None } else { Some("   \t ".into()) };
                Some(RejectReason::MissingTitle)
            }
            1 => {
                // 9 visible chars; padding whitespace does not count.
                rec.title = Some("  Short \n  ttl ".into());
                Some(RejectReason::ShortTitle)
            }
            2 => {
                rec.abstract_text = if r.gen_bool(0.5) { None } else { Some("\n \n".into()) };
                Some(RejectReason::MissingAbstract)
            }
            3 => {
                let len = r.gen_range(1..200);
                rec.abstract_text = Some("a".repeat(len));
                Some(RejectReason::ShortAbstract)
            }
            4 if !accepted_ids.is_empty() => {
                rec.id = accepted_ids.choose(&mut r).unwrap().clone();
                Some(RejectReason::DuplicateId)
            }
            5 => {
                // Boundary cases that must be accepted.
                rec.title = Some("0123456789".into());
                rec.abstract_text = Some(format!("{}{}", "b".repeat(200 - id.len()), id));
                None
            }
            _ => None,
        };
        if label.is_none() {
            accepted_ids.push(rec.id.clone());
        }
        records.push(rec);
        labels.push(label);
    }
    (records, labels)
}

pub fn random_payload(rng: &mut impl Rng) -> Payload {
    let mut p = Payload::new();
    if rng.gen_bool(0.95) {
        p.insert("source".into(), SOURCES.choose(rng).unwrap().to_string().into());
    }
    if rng.gen_bool(0.85) {
        p.insert("year".into(), PayloadValue::Int(rng.gen_range(1990..=2024)));
    }
    p.insert("doi_present".into(), rng.gen_bool(0.4).into());
    p.insert("has_fulltext".into(), rng.gen_bool(0.3).into());
    if rng.gen_bool(0.8) {
        p.insert("language".into(), LANGUAGES.choose(rng).unwrap().to_string().into());
    }
    p
}

fn random_text_arg<R: Rng + ?Sized>(rng: &mut R) -> String {
    match rng.gen_range(0..6) {
        0 => "a&b=c[0]%20".into(),
        1 => "Ünïcödé — 東京".into(),
        2 => String::new(),
        _ => SOURCES.choose(rng).unwrap().to_string(),
    }
}

fn random_predicate(rng: &mut impl Rng, used: &mut Vec<(&'static str, PredicateOp)>) -> Option<Predicate> {
    let fields = ["source", "year", "doi_present", "has_fulltext", "language"];
    for _ in 0..16 {
        let field = *fields.choose(rng).unwrap();
        let ops: &[PredicateOp] = if field == "year" {
            &[PredicateOp::Eq, PredicateOp::InList, PredicateOp::Gte, PredicateOp::Lte]
        } else {
            &[PredicateOp::Eq, PredicateOp::InList]
        };
        let op = *ops.choose(rng).unwrap();
        if used.contains(&(field, op)) {
            continue;
        }
        used.push((field, op));
        let arg = |rng: &mut dyn rand::RngCore| -> String {
            match field {
                "year" => rng.gen_range(1988..=2026).to_string(),
                "doi_present" | "has_fulltext" => if rng.gen_bool(0.5) { "true" } else { "false" }.to_string(),
                "language" => LANGUAGES.choose(rng).unwrap().to_string(),
                _ => random_text_arg(rng),
            }
        };
        let n = if op == PredicateOp::InList { rng.gen_range(1..=3) } else { 1 };
        let args = (0..n).map(|_| arg(rng)).collect();
        return Some(Predicate {
            field: field.to_string(),
            op,
            args,
        });
    }
    None
}

/// A canonical, schema-valid AST: non-empty groups, unique `(field, op)`
/// per group.
pub fn random_filter(rng: &mut impl Rng, depth: usize) -> FilterExpr {
    let op = if rng.gen_bool(0.5) { GroupOp::And } else { GroupOp::Or };
    let n = rng.gen_range(1..=4);
    let mut used = Vec::new();
    let mut children = Vec::new();
    for _ in 0..n {
        if depth > 0 && rng.gen_bool(0.3) {
            children.push(random_filter(rng, depth - 1));
        } else if let Some(p) = random_predicate(rng, &mut used) {
            children.push(FilterExpr::Predicate(p));
        }
    }
    if children.is_empty() {
        children.push(FilterExpr::Predicate(random_predicate(rng, &mut Vec::new()).unwrap()));
    }
    FilterExpr::Group { op, children }
}

/// Direct boolean evaluation of the filter semantics, written independently
/// of the index: text equality is exact, integers compare numerically,
/// booleans match "true"/"false", and an absent field never matches.
pub fn oracle_matches(expr: &FilterExpr, payload: &Payload) -> bool {
    match expr {
        FilterExpr::Group { op: GroupOp::And, children } => children.iter().all(|c| oracle_matches(c, payload)),
        FilterExpr::Group { op: GroupOp::Or, children } => children.iter().any(|c| oracle_matches(c, payload)),
        FilterExpr::Predicate(p) => {
            let Some(value) = payload.get(&p.field) else { return false };
            let eq = |arg: &String| match value {
                PayloadValue::Text(s) => s == arg,
                PayloadValue::TextList(list) => list.contains(arg),
                PayloadValue::Int(v) => arg.parse::<i64>().is_ok_and(|a| a == *v),
                PayloadValue::Bool(b) => (arg == "true" && *b) || (arg == "false" && !*b),
            };
            match (p.op, value) {
                (PredicateOp::Eq | PredicateOp::InList, _) => p.args.iter().any(eq),
                (PredicateOp::Gte, PayloadValue::Int(v)) => *v >= p.args[0].parse::<i64>().unwrap(),
                (PredicateOp::Lte, PayloadValue::Int(v)) => *v <= p.args[0].parse::<i64>().unwrap(),
                _ => false,
            }
        }
    }
}

/// Left-to-right f32 accumulation, the same summation order the index uses,
/// so scores compare bit for bit.
pub fn sequential_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Brute-force ranking: score every matching record, sort by score
/// descending then id ascending, slice the page.
pub fn brute_force(
    records: &[(String, Vec<f32>, Payload)],
    query: &[f32],
    filter: Option<&FilterExpr>,
    offset: usize,
    limit: usize,
) -> Vec<(String, f32)> {
    let mut scored: Vec<(String, f32)> = records
        .iter()
        .filter(|(_, _, p)| filter.is_none_or(|f| oracle_matches(f, p)))
        .map(|(id, v, _)| (id.clone(), sequential_dot(v, query)))
        .collect();
    scored.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap() {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    scored.into_iter().skip(offset).take(limit).collect()
}

fn random_json(rng: &mut impl Rng, depth: usize) -> Value {
    match rng.gen_range(0..if depth == 0 { 4 } else { 6 }) {
        0 => Value::Null,
        1 => json!(rng.gen_bool(0.5)),
        2 => json!(rng.gen_range(-1_000_000i64..1_000_000)),
        3 => {
            let n = rng.gen_range(0..4);
            json!(words(rng, n))
        }
        4 => {
            let n = rng.gen_range(0..3);
            Value::Array((0..n).map(|_| random_json(rng, depth - 1)).collect())
        }
        _ => {
            let mut m = Map::new();
            for i in 0..rng.gen_range(0..3) {
                m.insert(format!("k{i}"), random_json(rng, depth - 1));
            }
            Value::Object(m)
        }
    }
}

/// A valid CSL item with optional known fields and some unknown ones.
pub fn random_citation_item(rng: &mut impl Rng, id: &str) -> CitationItem {
    let types = ["article-journal", "book", "chapter", "paper-conference", "report", "thesis", "webpage"];
    let mut item = CitationItem::new(id, types.choose(rng).unwrap());
    if rng.gen_bool(0.9) {
        item.title = Some(format!("{} \"quoted\" {{braced}} ü", words(rng, 5)));
    }
    if rng.gen_bool(0.8) {
        item.author = Some(
            (0..rng.gen_range(0..4))
                .map(|i| {
                    let mut n = CslName {
                        family: Some(format!("Family{i}")),
                        given: rng.gen_bool(0.7).then(|| format!("Given{i}")),
                        extra: Map::new(),
                    };
                    if rng.gen_bool(0.2) {
                        n.extra.insert("suffix".into(), json!("Jr."));
                    }
                    n
                })
                .collect(),
        );
    }
    if rng.gen_bool(0.8) {
        let mut d = CslDate::year(rng.gen_range(1900..=2030));
        if rng.gen_bool(0.3) {
            d.date_parts = Some(vec![vec![
                DatePart::Int(rng.gen_range(1900..=2030)),
                DatePart::Text(format!("{}", rng.gen_range(1..=12))),
            ]]);
        }
        if rng.gen_bool(0.2) {
            d.extra.insert("circa".into(), json!(true));
        }
        item.issued = Some(d);
    }
    if rng.gen_bool(0.5) {
        item.doi = Some(format!("10.{}/{}", rng.gen_range(1000..9999), id));
    }
    if rng.gen_bool(0.5) {
        item.url = Some(format!("https://example.org/{id}?a=1&b=2"));
    }
    if rng.gen_bool(0.4) {
        item.container_title = Some(words(rng, 3));
    }
    if rng.gen_bool(0.5) {
        item.abstract_text = Some(words(rng, 30));
    }
    for k in 0..rng.gen_range(0..3) {
        let key = ["publisher", "volume", "page", "note", "x-custom"][k];
        item.extra.insert(key.into(), random_json(rng, 2));
    }
    item
}
