//! Precomputed document embeddings with exact nearest-neighbour search, plus
//! the query encoder contract.
//!
//! Embeddings are stored as raw little-endian `f32` rows next to a JSON
//! manifest `{"dim", "count", "id_file"}` and a newline-separated id file.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, RankedList};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    InnerProduct,
    Cosine,
}

/// A query embedding, original or refined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryVector(Vec<f32>);

impl QueryVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteVector { row: 0 });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub dim: usize,
    pub count: usize,
    pub id_file: PathBuf,
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    ids: Vec<String>,
    /// Row-major, `ids.len() * dim` values.
    vectors: Vec<f32>,
    id_to_row: HashMap<String, usize>,
    similarity: Similarity,
}

impl DenseIndex {
    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f32>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.len() != ids.len() {
            return Err(Error::PreconditionViolation(format!(
                "{} ids for {} vectors",
                ids.len(),
                rows.len()
            )));
        }
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        Self::from_flat(dim.max(1), ids, flat)
    }

    fn from_flat(dim: usize, ids: Vec<String>, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dim must be at least 1".into()));
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteVector { row: pos / dim });
        }
        let mut id_to_row = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if id_to_row.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicateDocId(id.clone()));
            }
        }
        Ok(Self {
            dim,
            ids,
            vectors,
            id_to_row,
            similarity: Similarity::InnerProduct,
        })
    }

    /// Loads a vectors file described by a manifest. The manifest's
    /// `id_file` is resolved relative to the manifest's directory.
    pub fn ingest(vectors_path: impl AsRef<Path>, manifest_path: impl AsRef<Path>) -> Result<Self> {
        let vectors_path = vectors_path.as_ref();
        let manifest_path = manifest_path.as_ref();
        let raw = std::fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: EmbeddingManifest = serde_json::from_slice(&raw)?;
        let id_path = manifest_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(&manifest.id_file);
        let ids: Vec<String> = std::fs::read_to_string(&id_path)
            .map_err(|e| Error::io(&id_path, e))?
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        if ids.len() != manifest.count {
            return Err(Error::PreconditionViolation(format!(
                "manifest declares {} vectors but id file lists {}",
                manifest.count,
                ids.len()
            )));
        }
        let bytes = std::fs::read(vectors_path).map_err(|e| Error::io(vectors_path, e))?;
        let expected = (manifest.count * manifest.dim * 4) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::SizeMismatch {
                expected,
                actual: bytes.len() as u64,
            });
        }
        let vectors = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let index = Self::from_flat(manifest.dim, ids, vectors)?;
        tracing::info!(rows = index.len(), dim = index.dim, "ingested embeddings");
        Ok(index)
    }

    /// Writes `vectors.f32`, `ids.txt` and `manifest.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vectors_path = dir.join("vectors.f32");
        let ids_path = dir.join("ids.txt");
        let manifest_path = dir.join("manifest.json");
        let bytes: Vec<u8> = self.vectors.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&vectors_path, bytes).map_err(|e| Error::io(&vectors_path, e))?;
        let mut ids = self.ids.join("\n");
        ids.push('\n');
        std::fs::write(&ids_path, ids).map_err(|e| Error::io(&ids_path, e))?;
        let manifest = EmbeddingManifest {
            dim: self.dim,
            count: self.ids.len(),
            id_file: PathBuf::from("ids.txt"),
        };
        std::fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| Error::io(&manifest_path, e))?;
        Ok((vectors_path, manifest_path))
    }

    pub fn with_similarity(mut self, similarity: Similarity) -> Self {
        self.similarity = similarity;
        self
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.id_to_row.contains_key(doc_id)
    }

    fn row(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    /// The stored row for `doc_id`, untouched.
    pub fn fetch(&self, doc_id: &str) -> Result<&[f32]> {
        self.id_to_row
            .get(doc_id)
            .map(|&r| self.row(r))
            .ok_or_else(|| Error::UnknownDocId(doc_id.to_owned()))
    }

    /// Exact top-`k` by the configured similarity, ties by ascending doc id.
    pub fn search(&self, query_id: &str, query: &QueryVector, k: usize) -> Result<RankedList> {
        if query.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let q = query.as_slice();
        let q_norm = match self.similarity {
            Similarity::InnerProduct => 1.0,
            Similarity::Cosine => dot(q, q).sqrt(),
        };
        let scores = self
            .ids
            .iter()
            .enumerate()
            .map(|(row, id)| {
                let v = self.row(row);
                let s = match self.similarity {
                    Similarity::InnerProduct => dot(q, v),
                    Similarity::Cosine => {
                        let denom = q_norm * dot(v, v).sqrt();
                        if denom > 0.0 {
                            dot(q, v) / denom
                        } else {
                            0.0
                        }
                    }
                };
                (id.clone(), s)
            })
            .collect();
        Ok(RankedList::from_scores(query_id, scores, k))
    }
}

/// Maps text to fixed-dimension vectors. Implementations must be
/// deterministic and safe to call concurrently.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;

    fn encode_one(&self, text: &str) -> Result<QueryVector> {
        let mut out = self.encode(&[text.to_owned()])?;
        QueryVector::new(out.pop().unwrap_or_default())
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hashed bag-of-words encoder for offline runs: each token's FNV-1a 64-bit
/// hash modulo `dim` picks a bucket, counts accumulate, and the result is
/// L2-normalised. Empty text encodes to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEncoder {
    dim: usize,
}

impl HashingEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("encoder dim must be at least 1".into()));
        }
        Ok(Self { dim })
    }

    fn encode_text(&self, text: &str) -> Vec<f32> {
        let mut counts = vec![0f64; self.dim];
        for token in tokenize(text) {
            counts[(fnv1a64(token.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.0 {
            counts.iter().map(|c| (c / norm) as f32).collect()
        } else {
            vec![0.0; self.dim]
        }
    }
}

impl Encoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        if texts.is_empty() {
            return Err(Error::PreconditionViolation("encode called with no texts".into()));
        }
        Ok(texts.iter().map(|t| self.encode_text(t)).collect())
    }
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EncodeResponse {
    vectors: Vec<Vec<f32>>,
}

/// Remote encoder: `POST {"texts": [...]}` returning `{"vectors": [[...]]}`.
#[derive(Debug, Clone)]
pub struct HttpEncoder {
    url: String,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpEncoder {
    pub fn new(url: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            dim,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Encoder for HttpEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        if texts.is_empty() {
            return Err(Error::PreconditionViolation("encode called with no texts".into()));
        }
        let resp: EncodeResponse = self
            .agent
            .post(&self.url)
            .send_json(EncodeRequest { texts })
            .map_err(|e| Error::BackendUnavailable(format!("encoder {}: {e}", self.url)))?
            .into_json()
            .map_err(|e| Error::BackendUnavailable(format!("encoder {}: {e}", self.url)))?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::BackendUnavailable(format!(
                "encoder returned {} vectors for {} texts",
                resp.vectors.len(),
                texts.len()
            )));
        }
        if let Some(bad) = resp.vectors.iter().find(|v| v.len() != self.dim) {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: bad.len(),
            });
        }
        Ok(resp.vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_by_two() -> DenseIndex {
        DenseIndex::from_rows(vec!["d1".into(), "d2".into()], vec![vec![1.0, 0.0], vec![0.0, 1.0]])
            .unwrap()
    }

    fn qv(v: &[f32]) -> QueryVector {
        QueryVector::new(v.to_vec()).unwrap()
    }

    fn write_fixture(dir: &Path, bytes: &[u8], dim: usize, count: usize, ids: &str) -> (PathBuf, PathBuf) {
        let vp = dir.join("v.f32");
        let mp = dir.join("m.json");
        std::fs::write(&vp, bytes).unwrap();
        std::fs::write(dir.join("ids.txt"), ids).unwrap();
        std::fs::write(&mp, format!("{{\"dim\":{dim},\"count\":{count},\"id_file\":\"ids.txt\"}}")).unwrap();
        (vp, mp)
    }

    #[test]
    fn ingest_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = [0.0f32, 1.0, 2.0, 3.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let (vp, mp) = write_fixture(dir.path(), &bytes, 2, 2, "d1\nd2\n");
        let idx = DenseIndex::ingest(&vp, &mp).unwrap();
        assert_eq!(idx.len(), 2);
        assert_eq!(idx.fetch("d1").unwrap(), &[0.0, 1.0]);
        assert_eq!(idx.fetch("d2").unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn ingest_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (vp, mp) = write_fixture(dir.path(), &[0u8; 15], 2, 2, "d1\nd2\n");
        assert!(matches!(
            DenseIndex::ingest(&vp, &mp),
            Err(Error::SizeMismatch { expected: 16, actual: 15 })
        ));
    }

    #[test]
    fn ingest_rejects_nan_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = [f32::NAN, 1.0, 2.0, 3.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let (vp, mp) = write_fixture(dir.path(), &bytes, 2, 2, "d1\nd2\n");
        assert!(matches!(DenseIndex::ingest(&vp, &mp), Err(Error::NonFiniteVector { row: 0 })));
        let bytes: Vec<u8> = [0.0f32, 1.0, 2.0, 3.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let (vp, mp) = write_fixture(dir.path(), &bytes, 2, 2, "d1\nd1\n");
        assert!(matches!(DenseIndex::ingest(&vp, &mp), Err(Error::DuplicateDocId(_))));
    }

    #[test]
    fn fetch_unknown() {
        assert!(matches!(two_by_two().fetch("dX"), Err(Error::UnknownDocId(_))));
    }

    #[test]
    fn search_examples() {
        let idx = two_by_two();
        let r = idx.search("q", &qv(&[1.0, 0.0]), 1).unwrap();
        assert_eq!(r.entries.len(), 1);
        assert_eq!((r.entries[0].doc_id.as_str(), r.entries[0].score), ("d1", 1.0));

        let r = idx.search("q", &qv(&[0.0, 0.0]), 2).unwrap();
        assert_eq!(r.doc_ids().collect::<Vec<_>>(), vec!["d1", "d2"]);
        assert!(r.entries.iter().all(|e| e.score == 0.0));

        let r = idx.search("q", &qv(&[1.0, 1.0]), 2).unwrap();
        assert_eq!(r.doc_ids().collect::<Vec<_>>(), vec!["d1", "d2"]);
        assert_eq!(r.entries[1].score, 1.0);

        assert!(matches!(
            idx.search("q", &qv(&[1.0]), 1),
            Err(Error::DimMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn cosine_flag() {
        let idx = DenseIndex::from_rows(vec!["a".into(), "b".into()], vec![vec![10.0, 0.0], vec![1.0, 1.0]])
            .unwrap()
            .with_similarity(Similarity::Cosine);
        let r = idx.search("q", &qv(&[1.0, 1.0]), 2).unwrap();
        assert_eq!(r.entries[0].doc_id, "b");
        assert!((r.entries[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hashing_encoder_bucket() {
        // FNV-1a-64("a") = 0xaf63dc4c8601ec8c, which is 4 mod 8.
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        let enc = HashingEncoder::new(8).unwrap();
        let v = enc.encode_one("a a").unwrap();
        let mut want = vec![0.0f32; 8];
        want[4] = 1.0;
        assert_eq!(v.as_slice(), want.as_slice());

        // "a" -> 4, "b" -> 5: equal counts normalise to 1/sqrt(2).
        let v = enc.encode_one("a b").unwrap();
        assert!((v.as_slice()[4] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert!((v.as_slice()[5] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-7);
    }

    #[test]
    fn hashing_encoder_empty_and_deterministic() {
        let enc = HashingEncoder::new(8).unwrap();
        assert_eq!(enc.encode_one("!!").unwrap().as_slice(), &[0.0; 8]);
        let a = enc.encode(&["x y z".into(), "x y z".into()]).unwrap();
        assert_eq!(a[0], a[1]);
        assert!(enc.encode(&[]).is_err());
    }

    fn arb_index() -> impl Strategy<Value = DenseIndex> {
        (1usize..5).prop_flat_map(|dim| {
            prop::collection::vec(prop::collection::vec(-4i8..5, dim), 1..12).prop_map(|rows| {
                let ids = (0..rows.len()).map(|i| format!("d{i:02}")).collect();
                let rows = rows
                    .into_iter()
                    .map(|r| r.into_iter().map(|x| f32::from(x) * 0.5).collect())
                    .collect();
                DenseIndex::from_rows(ids, rows).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn search_prefix_and_self_score(idx in arb_index(), k in 1usize..6) {
            for id in idx.ids().to_vec() {
                let v = idx.fetch(&id).unwrap().to_vec();
                let q = QueryVector::new(v.clone()).unwrap();
                let short = idx.search("q", &q, k).unwrap();
                let long = idx.search("q", &q, k + 1).unwrap();
                prop_assert_eq!(&short.entries[..], &long.entries[..short.len()]);
                let all = idx.search("q", &q, idx.len()).unwrap();
                let own = all.entries.iter().find(|e| e.doc_id == id).unwrap();
                prop_assert_eq!(own.score, dot(&v, &v));
            }
        }

        #[test]
        fn write_ingest_is_bit_exact(idx in arb_index()) {
            let dir = tempfile::tempdir().unwrap();
            let (vp, mp) = idx.write(dir.path()).unwrap();
            let back = DenseIndex::ingest(&vp, &mp).unwrap();
            for id in idx.ids() {
                let a: Vec<u32> = idx.fetch(id).unwrap().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = back.fetch(id).unwrap().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
