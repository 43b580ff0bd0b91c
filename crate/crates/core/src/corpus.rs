//! Corpus, query and qrels ingestion, TREC run files, and the shared analyzer.
//!
//! Corpora and query sets come in BEIR-style JSONL (`_id`, `title`, `text`)
//! or tab-separated form. Qrels and run files use the TREC whitespace
//! formats. Everything here is immutable once loaded.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases, splits on every non-alphanumeric codepoint and drops empty
/// pieces. No stemming and no stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    #[default]
    Jsonl,
    Tsv,
}

impl RecordFormat {
    /// Picks a format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => RecordFormat::Tsv,
            _ => RecordFormat::Jsonl,
        }
    }
}

impl FromStr for RecordFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(RecordFormat::Jsonl),
            "tsv" => Ok(RecordFormat::Tsv),
            other => Err(Error::InvalidConfig(format!("unknown record format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    contents: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        let title = title.into();
        let text = text.into();
        let contents = if title.is_empty() {
            text.clone()
        } else {
            format!("{title}. {text}")
        };
        Self {
            doc_id: doc_id.into(),
            title,
            text,
            contents,
        }
    }

    /// The single string every downstream stage sees: `"title. text"` when
    /// a title exists, otherwise just the text.
    pub fn contents(&self) -> &str {
        &self.contents
    }
}

/// Documents keyed by id. Iteration order is ascending `doc_id`, independent
/// of the order records appeared in the source file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    docs: Vec<Document>,
    rows: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_documents(docs: impl IntoIterator<Item = Document>) -> Result<Self> {
        let mut docs: Vec<Document> = docs.into_iter().collect();
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        let mut rows = HashMap::with_capacity(docs.len());
        for (row, doc) in docs.iter().enumerate() {
            if doc.doc_id.is_empty() {
                return Err(Error::PreconditionViolation("empty document id".into()));
            }
            if rows.insert(doc.doc_id.clone(), row).is_some() {
                return Err(Error::DuplicateDocId(doc.doc_id.clone()));
            }
        }
        Ok(Self { docs, rows })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.rows.get(doc_id).map(|&r| &self.docs[r])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.docs.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QrelEntry {
    pub query_id: String,
    pub doc_id: String,
    pub relevance: u32,
}

/// Graded judgments, `query_id -> doc_id -> relevance`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    map: HashMap<String, HashMap<String, u32>>,
}

impl Qrels {
    pub fn from_entries(entries: impl IntoIterator<Item = QrelEntry>) -> Result<Self> {
        let mut qrels = Qrels::default();
        for (i, e) in entries.into_iter().enumerate() {
            qrels.insert(e, i + 1)?;
        }
        Ok(qrels)
    }

    fn insert(&mut self, e: QrelEntry, line: usize) -> Result<()> {
        let slot = self.map.entry(e.query_id.clone()).or_default();
        if slot.insert(e.doc_id.clone(), e.relevance).is_some() {
            return Err(Error::MalformedRecord {
                line,
                reason: format!("duplicate judgment for ({}, {})", e.query_id, e.doc_id),
            });
        }
        Ok(())
    }

    pub fn relevance(&self, query_id: &str, doc_id: &str) -> Option<u32> {
        self.map.get(query_id).and_then(|m| m.get(doc_id)).copied()
    }

    pub fn for_query(&self, query_id: &str) -> Option<&HashMap<String, u32>> {
        self.map.get(query_id)
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.map.contains_key(query_id)
    }

    pub fn query_count(&self) -> usize {
        self.map.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Ordered retrieval output for one query: scores non-increasing, ids
/// distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<ScoredDoc>,
}

/// Descending score, ascending doc id on ties.
pub(crate) fn rank_order(a: &(String, f64), b: &(String, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

impl RankedList {
    pub fn empty(query_id: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            entries: Vec::new(),
        }
    }

    /// Sorts by descending score (ties by ascending doc id) and keeps the
    /// first `depth` entries.
    pub fn from_scores(query_id: impl Into<String>, mut scores: Vec<(String, f64)>, depth: usize) -> Self {
        if depth < scores.len() && depth > 0 {
            scores.select_nth_unstable_by(depth - 1, rank_order);
        }
        scores.truncate(depth);
        scores.sort_by(rank_order);
        Self {
            query_id: query_id.into(),
            entries: scores
                .into_iter()
                .map(|(doc_id, score)| ScoredDoc { doc_id, score })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    pub fn truncated(&self, depth: usize) -> Self {
        Self {
            query_id: self.query_id.clone(),
            entries: self.entries.iter().take(depth).cloned().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            if !seen.insert(e.doc_id.as_str()) {
                return Err(Error::PreconditionViolation(format!(
                    "query {}: doc {} appears twice",
                    self.query_id, e.doc_id
                )));
            }
            if i > 0 && self.entries[i - 1].score < e.score {
                return Err(Error::PreconditionViolation(format!(
                    "query {}: scores increase at rank {}",
                    self.query_id,
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let owned = path.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|e| Error::io(&owned, e)))))
}

fn malformed(line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedRecord {
        line,
        reason: reason.into(),
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    #[serde(rename = "_id")]
    id: serde_json::Value,
    #[serde(default)]
    title: Option<String>,
    text: Option<String>,
}

fn json_id(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_json_record(line_no: usize, line: &str) -> Result<(String, String, String)> {
    let rec: JsonRecord =
        serde_json::from_str(line).map_err(|e| malformed(line_no, e.to_string()))?;
    let id = json_id(&rec.id)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| malformed(line_no, "missing or empty \"_id\""))?;
    let text = rec
        .text
        .ok_or_else(|| malformed(line_no, "missing \"text\""))?;
    Ok((id, rec.title.unwrap_or_default(), text))
}

/// Loads a corpus. TSV rows are `id<TAB>text` or `id<TAB>title<TAB>text`.
pub fn load_corpus(path: impl AsRef<Path>, format: RecordFormat) -> Result<Corpus> {
    let path = path.as_ref();
    let mut docs = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, title, text) = match format {
            RecordFormat::Jsonl => parse_json_record(line_no, &line)?,
            RecordFormat::Tsv => {
                let cols: Vec<&str> = line.split('\t').collect();
                match cols.as_slice() {
                    [id, text] => (id.to_string(), String::new(), text.to_string()),
                    [id, title, text] => (id.to_string(), title.to_string(), text.to_string()),
                    _ => return Err(malformed(line_no, "expected 2 or 3 tab-separated columns")),
                }
            }
        };
        if id.is_empty() {
            return Err(malformed(line_no, "empty document id"));
        }
        docs.push(Document::new(id, title, text));
    }
    let corpus = Corpus::from_documents(docs)?;
    tracing::info!(path = %path.display(), documents = corpus.len(), "loaded corpus");
    Ok(corpus)
}

/// Loads queries in file order.
pub fn load_queries(path: impl AsRef<Path>, format: RecordFormat) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut queries = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = match format {
            RecordFormat::Jsonl => {
                let (id, _title, text) = parse_json_record(line_no, &line)?;
                (id, text)
            }
            RecordFormat::Tsv => match line.split_once('\t') {
                Some((id, text)) => (id.to_string(), text.to_string()),
                None => return Err(malformed(line_no, "expected id<TAB>text")),
            },
        };
        if id.is_empty() {
            return Err(malformed(line_no, "empty query id"));
        }
        if text.trim().is_empty() {
            return Err(malformed(line_no, format!("query {id} has blank text")));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateQueryId(id));
        }
        queries.push(Query::new(id, text));
    }
    Ok(queries)
}

/// Loads TREC qrels (`qid iter docid rel`, iteration ignored) or the
/// three-column BEIR layout (`qid docid rel`, optional header row).
pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let mut qrels = Qrels::default();
    for (line_no, line) in open_lines(path)? {
        let line = line?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        let (qid, docid, rel) = match cols.as_slice() {
            [] => continue,
            [q, _iter, d, r] => (q, d, r),
            [q, d, r] if line_no == 1 && r.parse::<i64>().is_err() => {
                tracing::debug!(header = %format!("{q} {d} {r}"), "skipping qrels header");
                continue;
            }
            [q, d, r] => (q, d, r),
            _ => return Err(malformed(line_no, "expected 3 or 4 whitespace-separated columns")),
        };
        let value: i64 = rel
            .parse()
            .map_err(|_| malformed(line_no, format!("relevance {rel:?} is not an integer")))?;
        if value < 0 {
            return Err(Error::NegativeRelevance {
                line: line_no,
                value,
            });
        }
        let relevance = u32::try_from(value)
            .map_err(|_| malformed(line_no, format!("relevance {value} out of range")))?;
        qrels.insert(
            QrelEntry {
                query_id: qid.to_string(),
                doc_id: docid.to_string(),
                relevance,
            },
            line_no,
        )?;
    }
    Ok(qrels)
}

/// Renders runs in TREC format, one line per entry.
pub fn format_run(runs: &[RankedList], tag: &str) -> Result<String> {
    let mut out = String::new();
    for run in runs {
        run.validate()?;
        for (rank, e) in run.entries.iter().enumerate() {
            out.push_str(&format!(
                "{} Q0 {} {} {:.6} {}\n",
                run.query_id,
                e.doc_id,
                rank + 1,
                e.score,
                tag
            ));
        }
    }
    Ok(out)
}

pub fn write_run_file(path: impl AsRef<Path>, runs: &[RankedList], tag: &str) -> Result<()> {
    let path = path.as_ref();
    let body = format_run(runs, tag)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads a TREC run file. Queries keep their first-appearance order and
/// entries are ordered by the rank column.
pub fn read_run_file(path: impl AsRef<Path>) -> Result<Vec<RankedList>> {
    let path = path.as_ref();
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(u64, String, f64)>> = HashMap::new();
    for (line_no, line) in open_lines(path)? {
        let line = line?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        let [qid, _q0, docid, rank, score, _tag] = cols.as_slice() else {
            return Err(malformed(line_no, "expected 6 whitespace-separated columns"));
        };
        let rank: u64 = rank
            .parse()
            .map_err(|_| malformed(line_no, format!("bad rank {rank:?}")))?;
        let score: f64 = score
            .parse()
            .map_err(|_| malformed(line_no, format!("bad score {score:?}")))?;
        if !rows.contains_key(*qid) {
            order.push(qid.to_string());
        }
        rows.entry(qid.to_string())
            .or_default()
            .push((rank, docid.to_string(), score));
    }
    Ok(order
        .into_iter()
        .map(|qid| {
            let mut entries = rows.remove(&qid).unwrap_or_default();
            entries.sort_by_key(|(rank, _, _)| *rank);
            RankedList {
                query_id: qid,
                entries: entries
                    .into_iter()
                    .map(|(_, doc_id, score)| ScoredDoc { doc_id, score })
                    .collect(),
            }
        })
        .collect())
}
