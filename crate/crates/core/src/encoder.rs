//! Clause, contract and clause-type representations.
//!
//! Every encoder is a pure function of its configuration and the clause, so
//! representations can be cached by `(encoder fingerprint, text)`. The
//! built-in encoder hashes unigram and bigram features, weights them by an
//! IDF table fitted on a corpus, projects them to `dimension` with a seeded
//! signed random projection and L2-normalizes the result. The external
//! encoder delegates to an HTTP service.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Clause, ClauseLibrary, ClauseTypeId, Contract};
use crate::error::{Error, Result};

pub const DEFAULT_DIMENSION: usize = 256;
const DEFAULT_BUCKETS: usize = 1 << 18;

/// A dense real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Elementwise arithmetic mean. Errors on an empty input or mixed dimensions.
    pub fn mean<'a, I>(items: I) -> Result<Embedding>
    where
        I: IntoIterator<Item = &'a Embedding>,
    {
        let mut iter = items.into_iter();
        let first = iter.next().ok_or(Error::Empty("embedding set"))?;
        let mut acc = first.0.clone();
        let mut n = 1usize;
        for e in iter {
            if e.dim() != acc.len() {
                return Err(Error::DimensionMismatch {
                    expected: acc.len(),
                    actual: e.dim(),
                });
            }
            for (a, x) in acc.iter_mut().zip(&e.0) {
                *a += x;
            }
            n += 1;
        }
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(Embedding(acc))
    }

    /// Elementwise mean of two vectors of equal dimension.
    pub fn midpoint(&self, other: &Embedding) -> Result<Embedding> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(Embedding(
            self.0.iter().zip(&other.0).map(|(a, b)| (a + b) / 2.0).collect(),
        ))
    }
}

/// Mean of a contract's clause embeddings (not re-normalized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractRep(pub Embedding);

/// Mean embedding of every library clause of one type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseTypeRep {
    pub kind: ClauseTypeId,
    pub values: Embedding,
}

/// Cosine similarity; zero vectors are an error so callers can pick a fallback.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// A deterministic clause encoder.
pub trait Encoder: Send + Sync {
    fn dimension(&self) -> usize;

    /// Stable identifier of the encoder configuration (and fitted state).
    fn fingerprint(&self) -> String;

    fn encode_batch(&self, clauses: &[&Clause]) -> Result<Vec<Embedding>>;

    fn encode_clause(&self, clause: &Clause) -> Result<Embedding> {
        self.encode_batch(&[clause])?
            .pop()
            .ok_or(Error::Empty("encoder response"))
    }
}

/// Averages the embeddings of every encodable clause of `contract`.
pub fn contract_rep(enc: &dyn Encoder, contract: &Contract) -> Result<ContractRep> {
    let clauses: Vec<&Clause> = contract.clauses.iter().filter(|c| !c.tokens.is_empty()).collect();
    if clauses.is_empty() {
        return Err(Error::EmptyContract(contract.id.clone()));
    }
    let embeddings = enc.encode_batch(&clauses)?;
    Ok(ContractRep(Embedding::mean(&embeddings)?))
}

/// Averages the embeddings of every library clause of type `kind`.
pub fn clause_type_rep(enc: &dyn Encoder, lib: &ClauseLibrary, kind: ClauseTypeId) -> Result<ClauseTypeRep> {
    let entries = lib.entries(kind);
    if entries.is_empty() {
        return Err(Error::UnknownClauseType(format!("#{}", kind.0)));
    }
    let clauses: Vec<&Clause> = entries.iter().map(|e| &e.clause).collect();
    let embeddings = enc.encode_batch(&clauses)?;
    Ok(ClauseTypeRep {
        kind,
        values: Embedding::mean(&embeddings)?,
    })
}

/// Precomputed clause-type representations for one library and encoder.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TypeReps {
    pub encoder_fingerprint: String,
    reps: BTreeMap<ClauseTypeId, ClauseTypeRep>,
}

impl TypeReps {
    pub fn build(enc: &dyn Encoder, lib: &ClauseLibrary) -> Result<Self> {
        let reps = lib
            .types()
            .map(|t| clause_type_rep(enc, lib, t).map(|r| (t, r)))
            .collect::<Result<_>>()?;
        Ok(TypeReps {
            encoder_fingerprint: enc.fingerprint(),
            reps,
        })
    }

    pub fn get(&self, kind: ClauseTypeId) -> Result<&ClauseTypeRep> {
        self.reps
            .get(&kind)
            .ok_or_else(|| Error::UnknownClauseType(format!("#{}", kind.0)))
    }
}

/// Serializable description of an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderSpec {
    BuiltinDeterministic {
        #[serde(default = "default_dimension")]
        dimension: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_buckets")]
        buckets: usize,
    },
    ExternalService {
        url: String,
        dimension: usize,
        #[serde(default = "default_max_batch")]
        max_batch: usize,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}
fn default_buckets() -> usize {
    DEFAULT_BUCKETS
}
fn default_max_batch() -> usize {
    64
}
fn default_timeout_ms() -> u64 {
    30_000
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::BuiltinDeterministic {
            dimension: DEFAULT_DIMENSION,
            seed: 0,
            buckets: DEFAULT_BUCKETS,
        }
    }
}

impl EncoderSpec {
    pub fn dimension(&self) -> usize {
        match self {
            EncoderSpec::BuiltinDeterministic { dimension, .. } | EncoderSpec::ExternalService { dimension, .. } => {
                *dimension
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Built-in hashed TF-IDF encoder

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for part in parts {
        for b in *part {
            h ^= u64::from(*b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        // separator so ("ab","c") and ("a","bc") differ
        h ^= 0xff;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashed unigram + bigram feature keys of a token stream.
fn feature_hashes(tokens: &[String]) -> impl Iterator<Item = u64> + '_ {
    let unigrams = tokens.iter().map(|t| fnv1a(&[b"u", t.as_bytes()]));
    let bigrams = tokens
        .windows(2)
        .map(|w| fnv1a(&[b"b", w[0].as_bytes(), w[1].as_bytes()]));
    unigrams.chain(bigrams)
}

/// Deterministic hashed TF-IDF encoder with a signed random projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuiltinEncoder {
    dimension: usize,
    seed: u64,
    buckets: usize,
    /// Smoothed IDF per hash bucket; empty means every weight is 1.
    idf: Vec<f64>,
    #[serde(skip)]
    fingerprint: String,
}

impl BuiltinEncoder {
    /// An encoder with uniform IDF weights.
    pub fn new(dimension: usize, seed: u64) -> Self {
        let mut enc = BuiltinEncoder {
            dimension,
            seed,
            buckets: DEFAULT_BUCKETS,
            idf: Vec::new(),
            fingerprint: String::new(),
        };
        enc.fingerprint = enc.compute_fingerprint();
        enc
    }

    /// Fits the IDF table on the given token streams (one per document).
    pub fn fit<'a, I>(dimension: usize, seed: u64, buckets: usize, documents: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let buckets = buckets.max(1);
        let mut df = vec![0u32; buckets];
        let mut n_docs = 0u64;
        let mut seen = Vec::new();
        for tokens in documents {
            n_docs += 1;
            seen.clear();
            seen.extend(feature_hashes(tokens).map(|h| (h % buckets as u64) as usize));
            seen.sort_unstable();
            seen.dedup();
            for &b in &seen {
                df[b] += 1;
            }
        }
        let n = n_docs as f64;
        let idf = df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
        let mut enc = BuiltinEncoder {
            dimension,
            seed,
            buckets,
            idf,
            fingerprint: String::new(),
        };
        enc.fingerprint = enc.compute_fingerprint();
        enc
    }

    /// Fits on every clause of a library.
    pub fn fit_library(dimension: usize, seed: u64, lib: &ClauseLibrary) -> Self {
        Self::fit(
            dimension,
            seed,
            DEFAULT_BUCKETS,
            lib.iter().map(|e| e.clause.tokens.as_slice()),
        )
    }

    /// Restores the cached fingerprint after deserialization.
    pub fn finish_load(mut self) -> Self {
        self.fingerprint = self.compute_fingerprint();
        self
    }

    pub fn spec(&self) -> EncoderSpec {
        EncoderSpec::BuiltinDeterministic {
            dimension: self.dimension,
            seed: self.seed,
            buckets: self.buckets,
        }
    }

    fn compute_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"builtin-deterministic/v1");
        h.update((self.dimension as u64).to_le_bytes());
        h.update(self.seed.to_le_bytes());
        h.update((self.buckets as u64).to_le_bytes());
        for w in &self.idf {
            h.update(w.to_le_bytes());
        }
        format!("builtin-{}", &hex::encode(h.finalize())[..16])
    }

    fn idf(&self, hash: u64) -> f64 {
        if self.idf.is_empty() {
            1.0
        } else {
            self.idf[(hash % self.buckets as u64) as usize]
        }
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Embedding {
        let mut counts: HashMap<u64, f64> = HashMap::new();
        for h in feature_hashes(tokens) {
            *counts.entry(h).or_default() += 1.0;
        }
        // Fixed accumulation order keeps the float result independent of
        // hash-map iteration order.
        let mut features: Vec<(u64, f64)> = counts.into_iter().collect();
        features.sort_unstable_by_key(|(h, _)| *h);

        let mut out = vec![0.0; self.dimension];
        for (h, tf) in features {
            let weight = tf * self.idf(h);
            let mut state = h ^ self.seed.rotate_left(17) ^ 0x5851_f42d_4c95_7f2d;
            let mut bits = 0u64;
            for (i, slot) in out.iter_mut().enumerate() {
                if i % 64 == 0 {
                    bits = splitmix64(&mut state);
                }
                if bits & 1 == 1 {
                    *slot += weight;
                } else {
                    *slot -= weight;
                }
                bits >>= 1;
            }
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|x| *x /= norm);
        }
        Embedding(out)
    }
}

impl Encoder for BuiltinEncoder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn encode_batch(&self, clauses: &[&Clause]) -> Result<Vec<Embedding>> {
        Ok(clauses.iter().map(|c| self.encode_tokens(&c.tokens)).collect())
    }
}

// ---------------------------------------------------------------------------
// External encoder service client

#[derive(Serialize)]
struct EncodeRequest<'a> {
    texts: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EncodeResponse {
    vectors: Vec<Vec<f64>>,
    dimension: usize,
}

/// Client for `POST {url}/encode` returning `{"vectors": [...], "dimension": d}`.
pub struct ExternalEncoder {
    url: String,
    dimension: usize,
    max_batch: usize,
    client: reqwest::blocking::Client,
}

impl ExternalEncoder {
    pub fn new(url: impl Into<String>, dimension: usize, max_batch: usize, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::EncoderTransport(e.to_string()))?;
        Ok(ExternalEncoder {
            url: url.into().trim_end_matches('/').to_string(),
            dimension,
            max_batch: max_batch.max(1),
            client,
        })
    }

    fn request(&self, texts: Vec<&str>) -> Result<Vec<Embedding>> {
        let expected = texts.len();
        let resp = self
            .client
            .post(format!("{}/encode", self.url))
            .json(&EncodeRequest { texts })
            .send()
            .map_err(classify_transport)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::EncoderProtocol(format!("HTTP status {status}")));
        }
        let bytes = resp.bytes().map_err(classify_transport)?;
        let body: EncodeResponse = serde_json::from_slice(&bytes)
            .map_err(|e| Error::EncoderProtocol(format!("invalid response body: {e}")))?;
        if body.dimension != self.dimension {
            return Err(Error::EncoderProtocol(format!(
                "service dimension {} but encoder configured for {}",
                body.dimension, self.dimension
            )));
        }
        if body.vectors.len() != expected {
            return Err(Error::EncoderProtocol(format!(
                "requested {expected} vectors, received {}",
                body.vectors.len()
            )));
        }
        body.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dimension {
                    Err(Error::EncoderProtocol(format!(
                        "vector of length {} in a {}-dimensional response",
                        v.len(),
                        self.dimension
                    )))
                } else if v.iter().any(|x| !x.is_finite()) {
                    Err(Error::EncoderProtocol("non-finite vector entry".into()))
                } else {
                    Ok(Embedding(v))
                }
            })
            .collect()
    }
}

fn classify_transport(e: reqwest::Error) -> Error {
    if e.is_timeout() {
        Error::EncoderTimeout(e.to_string())
    } else if e.is_decode() || e.is_body() {
        Error::EncoderProtocol(e.to_string())
    } else {
        Error::EncoderTransport(e.to_string())
    }
}

impl Encoder for ExternalEncoder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"external-service/v1");
        h.update(self.url.as_bytes());
        h.update((self.dimension as u64).to_le_bytes());
        format!("external-{}", &hex::encode(h.finalize())[..16])
    }

    fn encode_batch(&self, clauses: &[&Clause]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(clauses.len());
        for chunk in clauses.chunks(self.max_batch) {
            out.extend(self.request(chunk.iter().map(|c| c.text.as_str()).collect())?);
        }
        Ok(out)
    }
}

/// Memoizes another encoder by clause text. Concurrent readers share the map;
/// misses are encoded outside the lock and inserted under a short write lock.
pub struct CachedEncoder<E> {
    inner: E,
    cache: RwLock<HashMap<String, Embedding>>,
}

impl<E: Encoder> CachedEncoder<E> {
    pub fn new(inner: E) -> Self {
        CachedEncoder {
            inner,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn cached(&self) -> usize {
        self.cache.read().map(|c| c.len()).unwrap_or(0)
    }
}

impl<E: Encoder> Encoder for CachedEncoder<E> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn encode_batch(&self, clauses: &[&Clause]) -> Result<Vec<Embedding>> {
        let mut out: Vec<Option<Embedding>> = {
            let cache = self.cache.read().expect("encoder cache poisoned");
            clauses.iter().map(|c| cache.get(&c.text).cloned()).collect()
        };
        let missing: Vec<&Clause> = clauses
            .iter()
            .zip(&out)
            .filter(|(_, e)| e.is_none())
            .map(|(c, _)| *c)
            .collect();
        if !missing.is_empty() {
            let fresh = self.inner.encode_batch(&missing)?;
            let mut fresh_iter = fresh.iter();
            for slot in out.iter_mut().filter(|e| e.is_none()) {
                *slot = fresh_iter.next().cloned();
            }
            let mut cache = self.cache.write().expect("encoder cache poisoned");
            for (c, e) in missing.into_iter().zip(fresh) {
                cache.entry(c.text.clone()).or_insert(e);
            }
        }
        out.into_iter()
            .map(|e| e.ok_or(Error::Empty("encoder response")))
            .collect()
    }
}

impl<E: Encoder + ?Sized> Encoder for Arc<E> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }

    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }

    fn encode_batch(&self, clauses: &[&Clause]) -> Result<Vec<Embedding>> {
        (**self).encode_batch(clauses)
    }
}
