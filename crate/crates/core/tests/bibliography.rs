mod common;

use ask_core::bibliography::{
    export_items, parse_citation_json, BibliographyError, BibliographyStore, CitationItem, ExportFormat, NewItem,
};
use ask_core::corpus::{CurationPolicy, CorpusStore};
use proptest::prelude::*;
use rand::Rng;

use common::*;

#[test]
fn export_import_is_identity_for_200_collections() {
    let store = BibliographyStore::in_memory();
    let mut r = rng(31);
    for n in 0..200 {
        let source = store.create(&format!("source {n}"), Some("tok")).unwrap();
        let count = r.gen_range(0..12);
        let items: Vec<CitationItem> = (0..count).map(|i| random_citation_item(&mut r, &format!("c{n}-{i}"))).collect();
        for item in &items {
            store.add_item(&source.collection_id, NewItem::Item(item.clone())).unwrap();
        }
        let exported = store.export(&source.collection_id, ExportFormat::CitationJson).unwrap();

        let target = store.create(&format!("target {n}"), Some("tok")).unwrap();
        let outcome = store.import_items(&target.collection_id, &exported).unwrap();
        assert_eq!(outcome.collection.items, items, "collection {n}");
        assert_eq!((outcome.imported, outcome.skipped_count), (count, 0));

        // Importing again skips every item.
        let again = store.import_items(&target.collection_id, &exported).unwrap();
        assert_eq!((again.imported, again.skipped_count), (0, count));
        assert_eq!(again.collection.items, items);
    }
}

#[test]
fn duplicate_skips_are_counted_exactly() {
    let store = BibliographyStore::in_memory();
    let mut r = rng(32);
    let c = store.create("c", None).unwrap();
    for i in 0..5 {
        store
            .add_item(&c.collection_id, NewItem::Item(random_citation_item(&mut r, &format!("e{i}"))))
            .unwrap();
    }
    let payload = vec![
        random_citation_item(&mut r, "e1"),
        random_citation_item(&mut r, "new1"),
        random_citation_item(&mut r, "e3"),
        random_citation_item(&mut r, "new2"),
        random_citation_item(&mut r, "new1"),
    ];
    let outcome = store
        .import_items(&c.collection_id, &export_items(&payload, ExportFormat::CitationJson))
        .unwrap();
    assert_eq!((outcome.imported, outcome.skipped_count), (2, 3));
    let ids: Vec<_> = outcome.collection.items.iter().map(|i| i.id.as_str()).collect();
    assert_eq!(ids, ["e0", "e1", "e2", "e3", "e4", "new1", "new2"]);
}

#[test]
fn thousand_item_import_preserves_order() {
    let mut r = rng(33);
    let items: Vec<_> = (0..1000).map(|i| random_citation_item(&mut r, &format!("z{}", 999 - i))).collect();
    let store = BibliographyStore::in_memory();
    let c = store.create("big", None).unwrap();
    let outcome = store
        .import_items(&c.collection_id, &export_items(&items, ExportFormat::CitationJson))
        .unwrap();
    let got: Vec<_> = outcome.collection.items.iter().map(|i| &i.id).collect();
    let want: Vec<_> = items.iter().map(|i| &i.id).collect();
    assert_eq!(got, want);
}

#[test]
fn malformed_import_changes_nothing() {
    let store = BibliographyStore::in_memory();
    let c = store.create("c", None).unwrap();
    let err = store
        .import_items(&c.collection_id, br#"[{"id":"ok","type":"book"},{"id":"bad","type":7}]"#)
        .unwrap_err();
    assert!(matches!(err, BibliographyError::Parse { index: Some(1), .. }), "{err}");
    assert!(store.get(&c.collection_id).unwrap().items.is_empty());
    assert!(matches!(
        store.import_items("missing", b"[]"),
        Err(BibliographyError::NotFound(_))
    ));
}

#[test]
fn collections_do_not_interfere() {
    let store = BibliographyStore::in_memory();
    let a = store.create("a", None).unwrap();
    let b = store.create("b", None).unwrap();
    let mut r = rng(34);
    store
        .add_item(&a.collection_id, NewItem::Item(random_citation_item(&mut r, "x")))
        .unwrap();
    assert!(store.get(&b.collection_id).unwrap().items.is_empty());
    store.remove_item(&b.collection_id, "x").unwrap();
    assert_eq!(store.get(&a.collection_id).unwrap().items.len(), 1);
}

#[test]
fn documents_map_to_items_and_bibtex() {
    let corpus = CorpusStore::in_memory();
    let records = synthetic_records(35, 20);
    corpus.ingest_batch(records, &CurationPolicy::default()).unwrap();
    let doc = corpus
        .documents()
        .into_iter()
        .find(|d| d.doi.is_some() && d.year.is_some())
        .unwrap();
    let store = BibliographyStore::in_memory();
    let c = store.create("c", None).unwrap();
    let c = store.add_item(&c.collection_id, NewItem::Document(doc.clone())).unwrap();
    let item = &c.items[0];
    assert_eq!(item.id, doc.doc_id);
    assert_eq!(item.title.as_deref(), Some(doc.title.as_str()));
    let json = serde_json::to_value(item).unwrap();
    assert_eq!(json["issued"]["date-parts"], serde_json::json!([[doc.year.unwrap()]]));

    let bib = String::from_utf8(store.export(&c.collection_id, ExportFormat::Bibtex).unwrap()).unwrap();
    assert!(bib.starts_with(&format!("@article{{{},", doc.doc_id)));
    assert!(bib.contains(&format!("doi = {{{}}}", doc.doi.unwrap())));
    assert!("ris".parse::<ExportFormat>().is_err());
}

#[test]
fn collections_persist_one_file_each() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(36);
    let (a, b) = {
        let store = BibliographyStore::open(dir.path()).unwrap();
        let a = store.create("a", Some("s1")).unwrap();
        let b = store.create("b", Some("s2")).unwrap();
        store
            .add_item(&a.collection_id, NewItem::Item(random_citation_item(&mut r, "i1")))
            .unwrap();
        (store.get(&a.collection_id).unwrap(), b)
    };
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
    let store = BibliographyStore::open(dir.path()).unwrap();
    assert_eq!(store.get(&a.collection_id).unwrap(), a);
    assert_eq!(store.get(&b.collection_id).unwrap(), b);
    assert_eq!(store.list_for_session("s1").len(), 1);
}

proptest! {
    #[test]
    fn citation_json_round_trips(seed in any::<u64>(), n in 0usize..20) {
        let mut r = rng(seed);
        let items: Vec<_> = (0..n).map(|i| random_citation_item(&mut r, &format!("p{i}"))).collect();
        let bytes = export_items(&items, ExportFormat::CitationJson);
        prop_assert_eq!(parse_citation_json(&bytes).unwrap(), items);
    }
}
