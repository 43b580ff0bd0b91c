//! Shared fixtures for integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use rede_core::corpus::{Corpus, Document, QrelEntry, Qrels, Query};
use rede_core::dense::{DenseIndex, Encoder};
use rede_core::judge::JudgeBackend;
use rede_core::llm::{Gateway, MockBackend, MockEntry};
use rede_core::pipeline::Retriever;
use rede_core::sparse::{Bm25Params, SparseIndex};
use rede_core::templates::Templates;
use rede_core::{Error, Result};

/// Looks texts up in a fixed table, so tests control every vector.
#[derive(Debug, Clone)]
pub struct TableEncoder {
    pub dim: usize,
    pub table: HashMap<String, Vec<f32>>,
}

impl TableEncoder {
    pub fn new(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f32>)>) -> Self {
        Self {
            dim,
            table: entries.into_iter().collect(),
        }
    }
}

impl Encoder for TableEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::InvalidConfig(format!("no vector for text {t:?}")))
            })
            .collect()
    }
}

/// Everything a [`Retriever`] borrows, owned in one place.
pub struct World {
    pub corpus: Corpus,
    pub sparse: SparseIndex,
    pub dense: DenseIndex,
    pub encoder: Box<dyn Encoder>,
    pub judge: JudgeBackend,
    pub gateway: Option<Arc<Gateway>>,
    pub templates: Templates,
}

impl World {
    pub fn new(corpus: Corpus, dense: DenseIndex, encoder: Box<dyn Encoder>, judge: JudgeBackend) -> Self {
        let sparse = SparseIndex::build(&corpus, Bm25Params::default()).expect("sparse index");
        Self {
            corpus,
            sparse,
            dense,
            encoder,
            judge,
            gateway: None,
            templates: Templates::default(),
        }
    }

    pub fn with_gateway(mut self, gateway: Arc<Gateway>) -> Self {
        self.gateway = Some(gateway);
        self
    }

    pub fn retriever(&self) -> Retriever<'_> {
        Retriever {
            corpus: &self.corpus,
            sparse: &self.sparse,
            dense: &self.dense,
            encoder: self.encoder.as_ref(),
            judge: &self.judge,
            gateway: self.gateway.as_deref(),
            templates: &self.templates,
        }
    }
}

pub const JUDGE_MARKER: &str = "judge whether they are relevant";
pub const GENERATE_MARKER: &str = "Please write a passage";

pub fn judge_entry(lp_pos: f64, lp_neg: f64, delay_ms: Option<f64>) -> MockEntry {
    MockEntry {
        match_substring: JUDGE_MARKER.into(),
        text: "1".into(),
        first_token_logprobs: Some(BTreeMap::from([("1".into(), lp_pos), ("0".into(), lp_neg)])),
        delay_ms,
    }
}

pub fn generate_entry(text: &str, delay_ms: Option<f64>) -> MockEntry {
    MockEntry {
        match_substring: GENERATE_MARKER.into(),
        text: text.into(),
        first_token_logprobs: None,
        delay_ms,
    }
}

pub fn mock_gateway(entries: Vec<MockEntry>) -> Arc<Gateway> {
    Arc::new(Gateway::new(MockBackend::new(entries)))
}

/// Topic-clustered retrieval benchmark with planted relevance.
pub struct Bench {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
    pub doc_vectors: Vec<(String, Vec<f32>)>,
    pub query_vectors: Vec<(String, Vec<f32>)>,
    pub doc_topic: HashMap<String, usize>,
}

pub const BENCH_TOPICS: usize = 5;
pub const BENCH_DIM: usize = 16;
pub const BENCH_DOCS: usize = 200;
pub const BENCH_QUERIES: usize = 20;

/// Documents sit near their topic centre; queries are noisier draws from
/// the same centres. Texts mix topic words with shared filler so the
/// lexical leg is informative but imperfect. Every same-topic document is
/// relevant.
pub fn bench(seed: u64) -> Bench {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f64, 1.0).unwrap();
    let doc_noise = Normal::new(0.0f64, 0.7).unwrap();
    let query_noise = Normal::new(0.0f64, 1.4).unwrap();

    let centres: Vec<Vec<f64>> = (0..BENCH_TOPICS)
        .map(|_| (0..BENCH_DIM).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let topic_words: Vec<Vec<String>> = (0..BENCH_TOPICS)
        .map(|t| (0..15).map(|w| format!("t{t}w{w}")).collect())
        .collect();
    let filler: Vec<String> = (0..40).map(|w| format!("common{w}")).collect();

    let perturb = |rng: &mut ChaCha8Rng, centre: &[f64], noise: &Normal<f64>| -> Vec<f32> {
        centre.iter().map(|c| (c + noise.sample(rng)) as f32).collect()
    };
    let words = |rng: &mut ChaCha8Rng, topic: usize, n_topic: usize, n_filler: usize| -> String {
        let mut w: Vec<&str> = Vec::with_capacity(n_topic + n_filler);
        for _ in 0..n_topic {
            w.push(topic_words[topic].choose(rng).unwrap());
        }
        for _ in 0..n_filler {
            w.push(filler.choose(rng).unwrap());
        }
        w.shuffle(rng);
        w.join(" ")
    };

    let mut docs = Vec::with_capacity(BENCH_DOCS);
    let mut doc_vectors = Vec::with_capacity(BENCH_DOCS);
    let mut doc_topic = HashMap::new();
    for i in 0..BENCH_DOCS {
        let topic = i % BENCH_TOPICS;
        let id = format!("doc{i:03}");
        let text = words(&mut rng, topic, 3, 6);
        doc_vectors.push((id.clone(), perturb(&mut rng, &centres[topic], &doc_noise)));
        docs.push(Document::new(id.clone(), "", text));
        doc_topic.insert(id, topic);
    }

    let mut queries = Vec::with_capacity(BENCH_QUERIES);
    let mut query_vectors = Vec::with_capacity(BENCH_QUERIES);
    let mut qrels = Vec::new();
    for i in 0..BENCH_QUERIES {
        let topic = rng.gen_range(0..BENCH_TOPICS);
        let id = format!("q{i:02}");
        // The id keeps texts unique for the table encoder.
        let text = format!("{} {id}", words(&mut rng, topic, 1, 2));
        query_vectors.push((text.clone(), perturb(&mut rng, &centres[topic], &query_noise)));
        for (doc, t) in &doc_topic {
            if *t == topic {
                qrels.push(QrelEntry {
                    query_id: id.clone(),
                    doc_id: doc.clone(),
                    relevance: 1,
                });
            }
        }
        queries.push(Query::new(id, text));
    }

    Bench {
        corpus: Corpus::from_documents(docs).unwrap(),
        queries,
        qrels: Qrels::from_entries(qrels).unwrap(),
        doc_vectors,
        query_vectors,
        doc_topic,
    }
}

impl Bench {
    pub fn dense(&self) -> DenseIndex {
        let (ids, rows) = self.doc_vectors.iter().cloned().unzip();
        DenseIndex::from_rows(ids, rows).unwrap()
    }

    pub fn encoder(&self) -> TableEncoder {
        TableEncoder::new(BENCH_DIM, self.query_vectors.iter().cloned())
    }

    pub fn world(&self, judge: JudgeBackend) -> World {
        World::new(self.corpus.clone(), self.dense(), Box::new(self.encoder()), judge)
    }

    pub fn oracle(&self) -> JudgeBackend {
        JudgeBackend::Oracle(Arc::new(self.qrels.clone()))
    }
}

/// Direct inner product in f64, independent of the library's helpers.
pub fn brute_dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// Exhaustive ranking by inner product, ties by ascending id.
pub fn brute_rank(query: &[f32], docs: &[(String, Vec<f32>)]) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = docs.iter().map(|(id, v)| (id.clone(), brute_dot(query, v))).collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored
}

/// Plain arithmetic mean of the query and `vectors`, accumulated in f64.
pub fn brute_mean(query: &[f32], vectors: &[&[f32]]) -> Vec<f32> {
    let n = (vectors.len() + 1) as f64;
    (0..query.len())
        .map(|c| ((f64::from(query[c]) + vectors.iter().map(|v| f64::from(v[c])).sum::<f64>()) / n) as f32)
        .collect()
}
