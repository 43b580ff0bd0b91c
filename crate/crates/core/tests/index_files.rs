use std::io::Write;

use rede_core::corpus::{load_corpus, load_qrels, load_queries, read_run_file, write_run_file, RecordFormat};
use rede_core::dense::{DenseIndex, Encoder, HashingEncoder, QueryVector};
use rede_core::sparse::{Bm25Params, SparseIndex};
use rede_core::Error;

fn write(dir: &std::path::Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
    p
}

#[test]
fn loads_jsonl_and_tsv_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(
        dir.path(),
        "corpus.jsonl",
        "{\"_id\":\"d2\",\"title\":\"T\",\"text\":\"beta gamma\"}\n{\"_id\":\"d1\",\"text\":\"alpha\"}\n",
    );
    let corpus = load_corpus(&c, RecordFormat::from_path(&c)).unwrap();
    assert_eq!(corpus.iter().map(|d| d.doc_id.as_str()).collect::<Vec<_>>(), ["d1", "d2"]);
    assert_eq!(corpus.get("d2").unwrap().contents(), "T. beta gamma");

    let q = write(dir.path(), "queries.tsv", "q1\twhat is alpha\nq2\tbeta\n");
    let queries = load_queries(&q, RecordFormat::from_path(&q)).unwrap();
    assert_eq!(queries.len(), 2);
    assert_eq!(queries[0].text, "what is alpha");

    let r = write(dir.path(), "qrels.tsv", "query-id\tcorpus-id\tscore\nq1\td1\t1\nq2\td2\t2\n");
    let qrels = load_qrels(&r).unwrap();
    assert_eq!(qrels.relevance("q2", "d2"), Some(2));
}

#[test]
fn malformed_inputs_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.jsonl", "{\"_id\":\"d1\",\"text\":\"a\"}\nnot json\n");
    assert!(matches!(load_corpus(&c, RecordFormat::Jsonl), Err(Error::MalformedRecord { line: 2, .. })));

    let c = write(dir.path(), "dup.jsonl", "{\"_id\":\"d1\",\"text\":\"a\"}\n{\"_id\":\"d1\",\"text\":\"b\"}\n");
    assert!(matches!(load_corpus(&c, RecordFormat::Jsonl), Err(Error::DuplicateDocId(_))));

    let r = write(dir.path(), "neg.tsv", "q1\td1\t-1\n");
    assert!(matches!(load_qrels(&r), Err(Error::NegativeRelevance { value: -1, .. })));

    let missing = dir.path().join("nope.jsonl");
    assert!(matches!(load_corpus(&missing, RecordFormat::Jsonl), Err(Error::Io { .. })));
}

#[test]
fn sparse_index_survives_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(
        dir.path(),
        "c.tsv",
        "d1\tcats chase mice\nd2\tdogs chase cats and cats\nd3\tbirds sing\n",
    );
    let corpus = load_corpus(&c, RecordFormat::Tsv).unwrap();
    let index = SparseIndex::build(&corpus, Bm25Params { k1: 1.2, b: 0.75 }).unwrap();
    let path = dir.path().join("bm25.idx");
    index.save(&path).unwrap();
    let loaded = SparseIndex::load(&path).unwrap();
    assert_eq!(loaded.params(), index.params());
    assert_eq!(loaded.search("q", "cats chase", 10), index.search("q", "cats chase", 10));
    assert_eq!(loaded.postings("cats"), index.postings("cats"));

    let junk = write(dir.path(), "junk.idx", "definitely not an index");
    assert!(SparseIndex::load(&junk).is_err());
}

#[test]
fn dense_index_written_then_ingested_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let enc = HashingEncoder::new(32).unwrap();
    let texts: Vec<String> = ["red apple", "green apple pie", "blue sky"].iter().map(|s| s.to_string()).collect();
    let rows = enc.encode(&texts).unwrap();
    let index = DenseIndex::from_rows(vec!["a".into(), "b".into(), "c".into()], rows).unwrap();
    let (vectors, manifest) = index.write(dir.path()).unwrap();
    let back = DenseIndex::ingest(&vectors, &manifest).unwrap();
    assert_eq!(back.ids(), index.ids());
    for id in index.ids() {
        assert_eq!(back.fetch(id).unwrap(), index.fetch(id).unwrap());
    }
    let q: QueryVector = enc.encode_one("apple").unwrap();
    assert_eq!(back.search("q", &q, 3).unwrap(), index.search("q", &q, 3).unwrap());

    // Truncating the vector file is caught.
    let bytes = std::fs::read(&vectors).unwrap();
    std::fs::write(&vectors, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(DenseIndex::ingest(&vectors, &manifest), Err(Error::SizeMismatch { .. })));
}

#[test]
fn run_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let enc = HashingEncoder::new(16).unwrap();
    let texts: Vec<String> = (0..5).map(|i| format!("doc number {i}")).collect();
    let ids: Vec<String> = (0..5).map(|i| format!("d{i}")).collect();
    let index = DenseIndex::from_rows(ids, enc.encode(&texts).unwrap()).unwrap();
    let runs = vec![
        index.search("q1", &enc.encode_one("doc 3").unwrap(), 5).unwrap(),
        index.search("q2", &enc.encode_one("number").unwrap(), 2).unwrap(),
    ];
    let path = dir.path().join("run.trec");
    write_run_file(&path, &runs, "test").unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().all(|l| l.split(' ').count() == 6 && l.ends_with(" test")));
    let back = read_run_file(&path).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in back.iter().zip(&runs) {
        assert_eq!(a.doc_ids().collect::<Vec<_>>(), b.doc_ids().collect::<Vec<_>>());
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert!((x.score - y.score).abs() <= 5e-7);
        }
    }
}
