mod common;

use std::time::Instant;

use ask_core::corpus::{validate_document, CurationOutcome, CurationPolicy};
use ask_core::embedding::{Embedder, LocalHashEmbedder};
use ask_core::vectorstore::{payload_for_document, FilterExpr, IndexedRecord, Page, Payload, PredicateOp, VectorIndex};
use rand::Rng;

use common::*;

type Flat = Vec<(String, Vec<f32>, Payload)>;

fn build(n: usize, seed: u64) -> (VectorIndex, Flat, LocalHashEmbedder) {
    let embedder = LocalHashEmbedder::with_dimension(768).unwrap();
    let index = VectorIndex::new(768);
    let mut flat = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for raw in synthetic_records(seed, n) {
        let CurationOutcome::Accepted(doc) = validate_document(raw, &CurationPolicy::default()) else {
            panic!("generator produced an invalid record");
        };
        let vector = embedder.embed_text(&doc.embedding_text()).unwrap();
        let payload = payload_for_document(&doc);
        flat.push((doc.doc_id.clone(), vector.as_slice().to_vec(), payload.clone()));
        records.push(IndexedRecord {
            doc_id: doc.doc_id,
            vector,
            payload,
        });
    }
    index.upsert_batch(records).unwrap();
    (index, flat, embedder)
}

fn assert_same(got: &[ask_core::SearchHit], want: &[(String, f32)], context: &str) {
    assert_eq!(got.len(), want.len(), "{context}: length");
    for (g, (id, score)) in got.iter().zip(want) {
        assert_eq!(&g.doc_id, id, "{context}: order");
        assert_eq!(g.score.to_bits(), score.to_bits(), "{context}: score of {id}");
    }
}

#[test]
fn matches_brute_force_on_5000_documents() {
    let started = Instant::now();
    let (index, flat, embedder) = build(5000, 11);
    let mut r = rng(12);
    let filters: Vec<FilterExpr> = (0..10).map(|_| random_filter(&mut r, 2)).collect();
    let mut nonempty = 0;
    for q in 0..50 {
        let query = embedder.embed_text(&words(&mut r, 6)).unwrap();
        for (fi, filter) in filters.iter().enumerate() {
            let offset = r.gen_range(0..30);
            let limit = r.gen_range(1..=100);
            let got = index.search(&query, Some(filter), Page::new(offset, limit).unwrap()).unwrap();
            let want = brute_force(&flat, query.as_slice(), Some(filter), offset, limit);
            assert_same(&got, &want, &format!("query {q} filter {fi}"));
            nonempty += usize::from(!got.is_empty());
        }
    }
    assert!(nonempty > 100, "filters too selective to be informative: {nonempty}");
    assert!(started.elapsed().as_secs() < 60, "took {:?}", started.elapsed());
}

#[test]
fn pages_partition_the_full_ranking() {
    let (index, flat, embedder) = build(15, 3);
    let query = embedder.embed_text("autonomous driving safety").unwrap();
    let first = index.search(&query, None, Page::new(0, 10).unwrap()).unwrap();
    let second = index.search(&query, None, Page::new(10, 10).unwrap()).unwrap();
    let third = index.search(&query, None, Page::new(20, 10).unwrap()).unwrap();
    assert_eq!((first.len(), second.len(), third.len()), (10, 5, 0));
    let all: Vec<_> = first.into_iter().chain(second).collect();
    assert_same(&all, &brute_force(&flat, query.as_slice(), None, 0, 100), "union");
}

#[test]
fn source_filter_restricts_to_special_collection() {
    let (index, flat, embedder) = build(400, 5);
    let filter = FilterExpr::and(vec![FilterExpr::pred("source", PredicateOp::InList, &[SPECIAL_SOURCE])]);
    let query = embedder.embed_text("autonomous driving").unwrap();
    let hits = index.search(&query, Some(&filter), Page::new(0, 100).unwrap()).unwrap();
    let expected = flat
        .iter()
        .filter(|(_, _, p)| p.get("source").is_some_and(|s| *s == SPECIAL_SOURCE.into()))
        .count();
    assert_eq!(hits.len(), expected.min(100));
    assert!(!hits.is_empty());
    for h in &hits {
        let rec = index.get(&h.doc_id).unwrap();
        assert_eq!(rec.payload["source"], SPECIAL_SOURCE.into());
    }
}

#[test]
fn ties_break_by_id() {
    let index = VectorIndex::new(8);
    let v = ask_core::EmbeddingVector::normalized(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    for id in ["c", "a", "b"] {
        index
            .upsert(IndexedRecord {
                doc_id: id.into(),
                vector: v.clone(),
                payload: Payload::new(),
            })
            .unwrap();
    }
    let hits = index.search(&v, None, Page::default()).unwrap();
    let ids: Vec<_> = hits.iter().map(|h| h.doc_id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
}

#[test]
fn saved_index_searches_identically() {
    let (index, _, embedder) = build(300, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.askv");
    index.save(&path).unwrap();
    let loaded = VectorIndex::load_read_only(&path).unwrap();
    assert!(loaded.is_read_only());
    let mut r = rng(10);
    for _ in 0..20 {
        let query = embedder.embed_text(&words(&mut r, 5)).unwrap();
        let filter = random_filter(&mut r, 1);
        let page = Page::new(0, 50).unwrap();
        assert_eq!(
            index.search(&query, Some(&filter), page).unwrap(),
            loaded.search(&query, Some(&filter), page).unwrap()
        );
    }
}
