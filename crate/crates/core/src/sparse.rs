//! BM25 inverted index.
//!
//! Scoring uses the Robertson form with a `(k1 + 1)` numerator and
//! `idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))`. Query terms are scored
//! once per occurrence in the query.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! magic      b"RDBM25\0\0"
//! version    u32 (= 1)
//! k1, b      f64, f64
//! n_docs     u64
//! per doc    u32 id length, id bytes (UTF-8), u32 token count
//! n_terms    u64
//! per term   u32 term length, term bytes, u32 n_postings,
//!            n_postings × (u32 doc row, u32 tf)
//! ```
//!
//! Terms are written in ascending byte order so identical indexes produce
//! identical files.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus, RankedList};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RDBM25\0\0";
const FORMAT_VERSION: u32 = 1;
const MIN_AVGDL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0 && (0.0..=1.0).contains(&self.b)) {
            return Err(Error::InvalidConfig(format!(
                "bm25 parameters out of range: k1={}, b={}",
                self.k1, self.b
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    row: u32,
    tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseIndex {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    rows: HashMap<String, u32>,
    /// Postings sorted by row.
    postings: HashMap<String, Vec<Posting>>,
    avg_doc_length: f64,
}

impl SparseIndex {
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Result<Self> {
        params.validate()?;
        let mut doc_ids = Vec::with_capacity(corpus.len());
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        for (row, doc) in corpus.iter().enumerate() {
            let tokens = tokenize(doc.contents());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    row: row as u32,
                    tf: count,
                });
            }
            doc_ids.push(doc.doc_id.clone());
            doc_lengths.push(tokens.len() as u32);
        }
        if doc_lengths.iter().all(|&l| l == 0) {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self::assemble(params, doc_ids, doc_lengths, postings))
    }

    fn assemble(
        params: Bm25Params,
        doc_ids: Vec<String>,
        doc_lengths: Vec<u32>,
        mut postings: HashMap<String, Vec<Posting>>,
    ) -> Self {
        for list in postings.values_mut() {
            list.sort_by_key(|p| p.row);
        }
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        let rows = doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        Self {
            params,
            doc_ids,
            doc_lengths,
            rows,
            postings,
            avg_doc_length,
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.rows.get(doc_id).map(|&r| self.doc_lengths[r as usize])
    }

    /// `(doc_id, tf)` pairs for a term, in index row order.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|list| {
                list.iter()
                    .map(|p| (self.doc_ids[p.row as usize].as_str(), p.tf))
                    .collect()
            })
            .unwrap_or_default()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc_len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let avgdl = self.avg_doc_length.max(MIN_AVGDL);
        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * f64::from(doc_len) / avgdl))
    }

    pub fn score(&self, query_tokens: &[String], doc_id: &str) -> Result<f64> {
        let row = *self
            .rows
            .get(doc_id)
            .ok_or_else(|| Error::UnknownDocId(doc_id.to_owned()))?;
        let doc_len = self.doc_lengths[row as usize];
        let mut score = 0.0;
        for term in query_tokens {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            if let Ok(i) = list.binary_search_by_key(&row, |p| p.row) {
                score += self.term_weight(self.idf(list.len()), list[i].tf, doc_len);
            }
        }
        Ok(score)
    }

    /// Top-`k` documents with positive score, ties by ascending doc id.
    pub fn search(&self, query_id: &str, query_text: &str, k: usize) -> RankedList {
        let tokens = tokenize(query_text);
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in &tokens {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for p in list {
                let w = self.term_weight(idf, p.tf, self.doc_lengths[p.row as usize]);
                *acc.entry(p.row).or_insert(0.0) += w;
            }
        }
        let scores = acc
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(row, s)| (self.doc_ids[row as usize].clone(), s))
            .collect();
        RankedList::from_scores(query_id, scores, k)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.params.k1.to_le_bytes())?;
        w.write_all(&self.params.b.to_le_bytes())?;
        w.write_all(&(self.doc_ids.len() as u64).to_le_bytes())?;
        for (id, len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            write_str(&mut w, id)?;
            w.write_all(&len.to_le_bytes())?;
        }
        let mut terms: Vec<&String> = self.postings.keys().collect();
        terms.sort();
        w.write_all(&(terms.len() as u64).to_le_bytes())?;
        for term in terms {
            let list = &self.postings[term];
            write_str(&mut w, term)?;
            w.write_all(&(list.len() as u32).to_le_bytes())?;
            for p in list {
                w.write_all(&p.row.to_le_bytes())?;
                w.write_all(&p.tf.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |what: &str| Error::InvalidIndexFile(what.to_owned());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::InvalidIndexFile(format!("unsupported version {version}")));
        }
        let params = Bm25Params {
            k1: read_f64(&mut r)?,
            b: read_f64(&mut r)?,
        };
        params.validate()?;
        let n_docs = read_u64(&mut r)? as usize;
        let mut doc_ids = Vec::new();
        let mut doc_lengths = Vec::new();
        for _ in 0..n_docs {
            doc_ids.push(read_str(&mut r)?);
            doc_lengths.push(read_u32(&mut r)?);
        }
        if n_docs == 0 {
            return Err(bad("no documents"));
        }
        let n_terms = read_u64(&mut r)?;
        let mut postings = HashMap::new();
        for _ in 0..n_terms {
            let term = read_str(&mut r)?;
            let n = read_u32(&mut r)?;
            let mut list = Vec::new();
            for _ in 0..n {
                let row = read_u32(&mut r)?;
                let tf = read_u32(&mut r)?;
                if row as usize >= n_docs {
                    return Err(bad("posting references unknown row"));
                }
                list.push(Posting { row, tf });
            }
            postings.insert(term, list);
        }
        Ok(Self::assemble(params, doc_ids, doc_lengths, postings))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::InvalidIndexFile("unexpected end of file".into()))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    read_exact::<4>(r).map(u32::from_le_bytes)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    read_exact::<8>(r).map(u64::from_le_bytes)
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    read_exact::<8>(r).map(f64::from_le_bytes)
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::InvalidIndexFile("unexpected end of file".into()))?;
    String::from_utf8(buf).map_err(|_| Error::InvalidIndexFile("non-UTF-8 string".into()))
}
