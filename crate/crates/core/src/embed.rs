//! Text encoders and the inner-product kernel.
//!
//! Every vector leaving an encoder is L2-normalized, so cosine similarity is
//! the plain dot product everywhere downstream.

use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dot product with eight independent accumulators so the loop vectorizes.
///
/// The summation order is fixed; every score in the crate goes through here,
/// which keeps graph, IVF and brute-force scores bit-identical.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Squared Euclidean distance, same accumulation scheme as [`dot`].
#[inline]
pub fn l2_sq(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += (x - y) * (x - y);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Scales `v` to unit length in place. Returns `false` for a zero (or
/// non-finite) vector, leaving it untouched.
pub fn normalize_in_place(v: &mut [f32]) -> bool {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    true
}

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Normalizes `values`; `None` if the input has zero norm.
    pub fn normalized(mut values: Vec<f32>) -> Option<Self> {
        normalize_in_place(&mut values).then_some(Self(values))
    }

    /// Wraps values that are already unit-norm (e.g. rows of a vector file).
    pub fn from_unit(values: Vec<f32>) -> Self {
        Self(values)
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

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Cosine similarity of two unit vectors.
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f32> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(dot(a.as_slice(), b.as_slice()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Reference,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderRole {
    Retrieval,
    Rerank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderDescriptor {
    pub name: String,
    pub dim: usize,
    pub kind: EncoderKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub role: EncoderRole,
    /// Remote only: per-request timeout.
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Remote only: attempts per batch before giving up.
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    /// Remote only: bound on concurrent requests to the endpoint.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_attempts() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}

impl EncoderDescriptor {
    pub fn reference(dim: usize, role: EncoderRole) -> Self {
        Self {
            name: format!("trigram-hash-{dim}"),
            dim,
            kind: EncoderKind::Reference,
            endpoint: None,
            role,
            timeout_ms: default_timeout_ms(),
            max_attempts: default_attempts(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn remote(name: &str, dim: usize, endpoint: &str, role: EncoderRole) -> Self {
        Self {
            name: name.to_string(),
            kind: EncoderKind::Remote,
            endpoint: Some(endpoint.to_string()),
            ..Self::reference(dim, role)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config(format!("encoder {} has dim 0", self.name)));
        }
        if self.kind == EncoderKind::Remote
            && self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty())
        {
            return Err(Error::Config(format!(
                "remote encoder {} requires an endpoint",
                self.name
            )));
        }
        Ok(())
    }
}

pub trait Encoder: Send + Sync {
    fn descriptor(&self) -> &EncoderDescriptor;

    /// One unit vector per text, in input order.
    fn encode(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn encode_one(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.encode(&[text])?.pop().expect("one output per input"))
    }
}

pub fn encoder_from_descriptor(descriptor: &EncoderDescriptor) -> Result<Arc<dyn Encoder>> {
    descriptor.validate()?;
    Ok(match descriptor.kind {
        EncoderKind::Reference => Arc::new(ReferenceEncoder::new(descriptor.clone())),
        EncoderKind::Remote => Arc::new(RemoteEncoder::new(descriptor.clone())?),
    })
}

fn reject_empty(texts: &[&str]) -> Result<()> {
    match texts.iter().position(|t| t.trim().is_empty()) {
        Some(i) => Err(Error::Config(format!("text at position {i} is empty"))),
        None => Ok(()),
    }
}

/// Character-trigram feature hashing with signed buckets.
///
/// The text is lowercased and padded with one space on each side, so even a
/// single character yields a trigram. Hashing is FNV-1a over the trigram's
/// UTF-8 bytes followed by a 64-bit finalizer, which is stable across
/// platforms and releases.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    descriptor: EncoderDescriptor,
}

impl ReferenceEncoder {
    pub fn new(descriptor: EncoderDescriptor) -> Self {
        Self { descriptor }
    }

    pub fn with_dim(dim: usize) -> Self {
        Self::new(EncoderDescriptor::reference(dim, EncoderRole::Retrieval))
    }

    fn hash(gram: &[char]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut buf = [0u8; 4];
        for c in gram {
            for b in c.encode_utf8(&mut buf).bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        // splitmix64 finalizer spreads low-entropy FNV output over all bits
        h ^= h >> 30;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^ (h >> 31)
    }

    pub fn raw_features(&self, text: &str) -> Vec<f32> {
        let dim = self.descriptor.dim;
        let mut v = vec![0f32; dim];
        let chars: Vec<char> = std::iter::once(' ')
            .chain(text.chars().flat_map(char::to_lowercase))
            .chain(std::iter::once(' '))
            .collect();
        for gram in chars.windows(3) {
            let h = Self::hash(gram);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % dim as u64) as usize] += sign;
        }
        v
    }
}

impl Encoder for ReferenceEncoder {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.descriptor
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        reject_empty(texts)?;
        texts
            .iter()
            .map(|t| {
                EmbeddingVector::normalized(self.raw_features(t)).ok_or_else(|| Error::ZeroVector {
                    text: t.to_string(),
                })
            })
            .collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
    dim: usize,
}

/// Counting semaphore bounding concurrent remote calls.
#[derive(Debug)]
struct InFlight {
    used: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock();
        while *used >= self.limit {
            self.freed.wait(&mut used);
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock() -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for `POST {endpoint}/embed`.
pub struct RemoteEncoder {
    descriptor: EncoderDescriptor,
    url: String,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl RemoteEncoder {
    pub fn new(descriptor: EncoderDescriptor) -> Result<Self> {
        descriptor.validate()?;
        let endpoint = descriptor.endpoint.clone().unwrap_or_default();
        let url = format!("{}/embed", endpoint.trim_end_matches('/'));
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(descriptor.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            in_flight: InFlight {
                used: Mutex::new(0),
                freed: Condvar::new(),
                limit: descriptor.max_in_flight.max(1),
            },
            descriptor,
            url,
            agent,
        })
    }

    fn attempt(&self, texts: &[&str]) -> std::result::Result<EmbedResponse, (bool, String)> {
        let _slot = self.in_flight.acquire();
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { texts })
            .map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            // 5xx and 429 are worth retrying, other 4xx are not
            return Err((status >= 500 || status == 429, format!("HTTP {status}")));
        }
        resp.body_mut()
            .read_json::<EmbedResponse>()
            .map_err(|e| (false, format!("bad response body: {e}")))
    }
}

impl Encoder for RemoteEncoder {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.descriptor
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        reject_empty(texts)?;
        let attempts = self.descriptor.max_attempts.max(1);
        let fail = |attempt, retryable, message| Error::RemoteEncoder {
            endpoint: self.url.clone(),
            attempts: attempt,
            retryable,
            message,
        };
        let mut attempt = 0;
        let resp = loop {
            attempt += 1;
            match self.attempt(texts) {
                Ok(r) => break r,
                Err((retryable, msg)) if !retryable || attempt >= attempts => {
                    return Err(fail(attempt, retryable, msg));
                }
                Err(_) => std::thread::sleep(Duration::from_millis(50 << attempt.min(6))),
            }
        };
        if resp.dim != self.descriptor.dim || resp.vectors.len() != texts.len() {
            return Err(fail(
                attempt,
                false,
                format!(
                    "expected {} vectors of dim {}, got {} of dim {}",
                    texts.len(),
                    self.descriptor.dim,
                    resp.vectors.len(),
                    resp.dim
                ),
            ));
        }
        resp.vectors
            .into_iter()
            .zip(texts)
            .map(|(v, t)| {
                if v.len() != self.descriptor.dim {
                    return Err(Error::Dimension {
                        expected: self.descriptor.dim,
                        actual: v.len(),
                    });
                }
                EmbeddingVector::normalized(v).ok_or_else(|| Error::ZeroVector {
                    text: t.to_string(),
                })
            })
            .collect()
    }
}
