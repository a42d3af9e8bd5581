//! Precedent vector store over training facts with exact L2 top-k search.
//!
//! The index is a flat array scanned linearly. Distances are computed in
//! `f64` from the stored `f32` components, and ties are broken by ascending
//! `case_id`, so a query always yields the same ranked list.
//!
//! On disk an index is two files: `<path>` holds a fixed header followed by
//! the vectors as little-endian `f32`, and `<path>.json` holds the metadata
//! (embedder, dimension, source kind and one entry per vector).

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{CaseFact, Split};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::offense_tagger::TypedFact;

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_DIMENSION: usize = 1024;

const MAGIC: &[u8; 8] = b"BAILIDX\0";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8;
const SIDECAR_SCHEMA: &str = "bailaudit.index/v1";

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
}

/// Signed feature hashing of lowercase words, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
    name: String,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(HashingEmbedder {
            dimension,
            name: format!("hashing-bow-v1-{dimension}"),
        })
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(DEFAULT_DIMENSION).expect("positive dimension")
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl Embedder for HashingEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut acc = vec![0f64; self.dimension];
        for word in crate::text::words(text) {
            let h = fnv1a64(word.as_bytes());
            let bucket = (h % self.dimension as u64) as usize;
            acc[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(acc.into_iter().map(|x| x as f32).collect())
    }
}

/// Client for an embeddings endpoint that accepts `{"model", "input"}` and
/// answers `{"data": [{"embedding": [...]}]}`.
#[derive(Debug)]
pub struct HttpEmbedder {
    name: String,
    endpoint_url: String,
    model: String,
    dimension: usize,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(
        endpoint_url: &str,
        model: &str,
        dimension: usize,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Ok(HttpEmbedder {
            name: format!("http:{model}"),
            endpoint_url: endpoint_url.to_string(),
            model: model.to_string(),
            dimension,
            api_key,
            agent,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

impl Embedder for HttpEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut request = self.agent.post(&self.endpoint_url);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({ "model": self.model, "input": text });
        let mut response = request
            .send_json(&body)
            .map_err(|e| Error::Input(format!("embedding request failed: {e}")))?;
        let parsed: EmbeddingResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Input(format!("embedding response unreadable: {e}")))?;
        let vector = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| Error::Input("embedding response has no data".into()))?
            .embedding;
        if vector.len() != self.dimension {
            return Err(Error::Config(format!(
                "embedding endpoint returned dimension {}, expected {}",
                vector.len(),
                self.dimension
            )));
        }
        Ok(vector)
    }
}

/// What an index was built from; typed-fact prompting requires `TypedFacts`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexSource {
    Facts,
    TypedFacts,
    Vectors,
}

/// Anything that can become a precedent entry.
pub trait PrecedentSource {
    const SOURCE: IndexSource;
    fn case_id(&self) -> &str;
    fn precedent_text(&self) -> &str;
    fn bail_granted(&self) -> bool;
    fn split(&self) -> Option<Split>;
}

impl PrecedentSource for CaseFact {
    const SOURCE: IndexSource = IndexSource::Facts;
    fn case_id(&self) -> &str {
        &self.case_id
    }
    fn precedent_text(&self) -> &str {
        &self.text
    }
    fn bail_granted(&self) -> bool {
        self.bail_granted
    }
    fn split(&self) -> Option<Split> {
        self.split
    }
}

impl PrecedentSource for TypedFact {
    const SOURCE: IndexSource = IndexSource::TypedFacts;
    fn case_id(&self) -> &str {
        &self.case_id
    }
    fn precedent_text(&self) -> &str {
        &self.rendered_text
    }
    fn bail_granted(&self) -> bool {
        self.bail_granted
    }
    fn split(&self) -> Option<Split> {
        self.split
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub case_id: String,
    pub bail_granted: bool,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecedentIndex {
    embedder: String,
    dimension: usize,
    source: IndexSource,
    entries: Vec<IndexEntry>,
    vectors: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub case_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub k: usize,
    pub ranked: Vec<Neighbor>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    schema: String,
    embedder: String,
    dimension: usize,
    source: IndexSource,
    vectors_sha256: String,
    entries: Vec<IndexEntry>,
}

/// Embeds every fact. Any test-split (or unsplit) fact is rejected: the
/// store may only hold training precedents.
pub fn build_index<T: PrecedentSource>(facts: &[T], embedder: &dyn Embedder) -> Result<PrecedentIndex> {
    let dimension = embedder.dimension();
    let mut entries = Vec::with_capacity(facts.len());
    let mut vectors = Vec::with_capacity(facts.len() * dimension);
    for fact in facts {
        if fact.split() != Some(Split::Train) {
            return Err(Error::Contamination(fact.case_id().to_string()));
        }
        let vector = embedder.embed(fact.precedent_text())?;
        if vector.len() != dimension {
            return Err(Error::Config(format!(
                "embedder `{}` produced dimension {} instead of {dimension}",
                embedder.name(),
                vector.len()
            )));
        }
        vectors.extend_from_slice(&vector);
        entries.push(IndexEntry {
            case_id: fact.case_id().to_string(),
            bail_granted: fact.bail_granted(),
            text: fact.precedent_text().to_string(),
        });
    }
    Ok(PrecedentIndex {
        embedder: embedder.name().to_string(),
        dimension,
        source: T::SOURCE,
        entries,
        vectors,
    })
}

fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn rank_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| a.case_id.cmp(&b.case_id))
}

impl PrecedentIndex {
    /// An index over precomputed vectors (`vectors.len() == entries.len() · dimension`).
    pub fn from_vectors(
        embedder: &str,
        dimension: usize,
        entries: Vec<IndexEntry>,
        vectors: Vec<f32>,
    ) -> Result<Self> {
        if dimension == 0 || vectors.len() != entries.len() * dimension {
            return Err(Error::Config(format!(
                "{} vector components do not fit {} entries of dimension {dimension}",
                vectors.len(),
                entries.len()
            )));
        }
        Ok(PrecedentIndex {
            embedder: embedder.to_string(),
            dimension,
            source: IndexSource::Vectors,
            entries,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn embedder_name(&self) -> &str {
        &self.embedder
    }

    pub fn source(&self) -> IndexSource {
        self.source
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn entry(&self, case_id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.case_id == case_id)
    }

    pub fn vector(&self, position: usize) -> &[f32] {
        &self.vectors[position * self.dimension..(position + 1) * self.dimension]
    }

    /// Exact k nearest entries to `query` under L2, skipping `exclude`.
    pub fn search(&self, query: &[f32], k: usize, exclude: Option<&str>) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::Input("precedent index is empty".into()));
        }
        if query.len() != self.dimension {
            return Err(Error::Config(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.dimension
            )));
        }
        let mut scored: Vec<Neighbor> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| Some(e.case_id.as_str()) != exclude)
            .map(|(i, e)| Neighbor {
                case_id: e.case_id.clone(),
                distance: l2_distance(query, self.vector(i)),
            })
            .collect();
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(RetrievalResult { k, ranked: scored })
    }

    /// Embeds `query_text` with `embedder` and searches. The embedder must
    /// be the one the index was built with.
    pub fn retrieve_top_k(
        &self,
        embedder: &dyn Embedder,
        query_text: &str,
        k: usize,
        exclude: Option<&str>,
    ) -> Result<RetrievalResult> {
        if embedder.dimension() != self.dimension {
            return Err(Error::Config(format!(
                "embedder dimension {} does not match index dimension {}",
                embedder.dimension(),
                self.dimension
            )));
        }
        if embedder.name() != self.embedder {
            return Err(Error::Config(format!(
                "index was built with embedder `{}`, query uses `{}`",
                self.embedder,
                embedder.name()
            )));
        }
        let query = embedder.embed(query_text)?;
        self.search(&query, k, exclude)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".json");
        PathBuf::from(name)
    }

    fn vector_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(HEADER_LEN + self.vectors.len() * 4);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for v in &self.vectors {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.vector_bytes();
        let sidecar = Sidecar {
            schema: SIDECAR_SCHEMA.to_string(),
            embedder: self.embedder.clone(),
            dimension: self.dimension,
            source: self.source,
            vectors_sha256: sha256_hex(&bytes),
            entries: self.entries.clone(),
        };
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        let sidecar_path = Self::sidecar_path(path);
        let mut file = fs::File::create(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        serde_json::to_writer_pretty(&mut file, &sidecar).map_err(|source| Error::Json {
            path: sidecar_path.clone(),
            line: 0,
            source,
        })?;
        file.write_all(b"\n").map_err(|e| Error::io(&sidecar_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: &str| Error::Input(format!("{}: {reason}", path.display()));
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(corrupt("not a precedent index file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(&format!("unsupported index version {version}")));
        }
        let dimension = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * dimension * 4 {
            return Err(corrupt("vector payload length does not match header"));
        }
        let vectors = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let sidecar_path = Self::sidecar_path(path);
        let raw = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&raw).map_err(|source| Error::Json {
            path: sidecar_path.clone(),
            line: 0,
            source,
        })?;
        if sidecar.schema != SIDECAR_SCHEMA {
            return Err(corrupt(&format!("unknown sidecar schema `{}`", sidecar.schema)));
        }
        if sidecar.dimension != dimension || sidecar.entries.len() != count {
            return Err(corrupt("sidecar disagrees with vector header"));
        }
        if sidecar.vectors_sha256 != sha256_hex(&bytes) {
            return Err(corrupt("vector file checksum mismatch"));
        }
        Ok(PrecedentIndex {
            embedder: sidecar.embedder,
            dimension,
            source: sidecar.source,
            entries: sidecar.entries,
            vectors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train_fact(id: &str, text: &str) -> CaseFact {
        CaseFact {
            case_id: id.into(),
            text: text.into(),
            token_count: 0,
            bail_granted: true,
            split: Some(Split::Train),
        }
    }

    #[test]
    fn hashing_embedder_is_normalized_and_deterministic() {
        let e = HashingEmbedder::default();
        let v = e.embed("Two kilograms of charas recovered").unwrap();
        assert_eq!(v.len(), 1024);
        let norm: f64 = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(v, e.embed("two KILOGRAMS of charas, recovered!").unwrap());
        assert!(e.embed("").unwrap().iter().all(|x| *x == 0.0));
        assert!(HashingEmbedder::new(0).is_err());
    }

    #[test]
    fn empty_build_is_valid() {
        let index = build_index::<CaseFact>(&[], &HashingEmbedder::default()).unwrap();
        assert!(index.is_empty());
        assert!(matches!(
            index.search(&vec![0.0; 1024], 3, None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn contamination_is_rejected() {
        let mut f = train_fact("t1", "some text");
        f.split = Some(Split::Test);
        assert!(matches!(
            build_index(&[train_fact("a", "x"), f], &HashingEmbedder::default()),
            Err(Error::Contamination(id)) if id == "t1"
        ));
    }

    #[test]
    fn identical_query_ranks_first() {
        let facts = vec![
            train_fact("a", "stolen motorcycle recovered near the market"),
            train_fact("b", "heroin seized at the border check post"),
            train_fact("c", "dispute over land escalated into a fight"),
        ];
        let e = HashingEmbedder::default();
        let index = build_index(&facts, &e).unwrap();
        let r = index
            .retrieve_top_k(&e, "heroin seized at the border check post", 3, None)
            .unwrap();
        assert_eq!(r.ranked[0].case_id, "b");
        assert_eq!(r.ranked[0].distance, 0.0);
        assert_eq!(r.ranked.len(), 3);

        let excluded = index
            .retrieve_top_k(&e, "heroin seized at the border check post", 3, Some("b"))
            .unwrap();
        assert_eq!(excluded.ranked.len(), 2);
        assert!(excluded.ranked.iter().all(|n| n.case_id != "b"));
    }

    #[test]
    fn k_larger_than_index() {
        let entries = (0..4)
            .map(|i| IndexEntry {
                case_id: format!("e{i}"),
                bail_granted: false,
                text: String::new(),
            })
            .collect();
        let index =
            PrecedentIndex::from_vectors("v", 1, entries, vec![3.0, 1.0, 2.0, 0.0]).unwrap();
        let r = index.search(&[0.0], 10, None).unwrap();
        let ids: Vec<_> = r.ranked.iter().map(|n| n.case_id.as_str()).collect();
        assert_eq!(ids, vec!["e3", "e1", "e2", "e0"]);
    }

    #[test]
    fn ties_break_by_case_id() {
        let entries = ["z", "m", "a"]
            .iter()
            .map(|id| IndexEntry {
                case_id: id.to_string(),
                bail_granted: true,
                text: String::new(),
            })
            .collect();
        let index = PrecedentIndex::from_vectors("v", 2, entries, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0])
            .unwrap();
        let r = index.search(&[0.0, 0.0], 2, None).unwrap();
        let ids: Vec<_> = r.ranked.iter().map(|n| n.case_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "m"]);
    }

    #[test]
    fn dimension_mismatch() {
        let index = build_index(&[train_fact("a", "x y")], &HashingEmbedder::new(8).unwrap()).unwrap();
        assert!(matches!(index.search(&[0.0; 4], 1, None), Err(Error::Config(_))));
        assert!(matches!(
            index.retrieve_top_k(&HashingEmbedder::new(16).unwrap(), "x", 1, None),
            Err(Error::Config(_))
        ));
        assert!(matches!(index.search(&[0.0; 8], 0, None), Err(Error::Config(_))));
    }

    #[test]
    fn corrupted_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        let index = build_index(&[train_fact("a", "x y")], &HashingEmbedder::new(8).unwrap()).unwrap();
        index.save(&path).unwrap();
        assert_eq!(PrecedentIndex::load(&path).unwrap(), index);

        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(PrecedentIndex::load(&path).is_err());
        fs::write(&path, b"garbage").unwrap();
        assert!(PrecedentIndex::load(&path).is_err());
    }
}
