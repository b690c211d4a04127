//! Post-ANN refinement: exact rerank against a second encoder, and MMR
//! diversity selection.

use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use lru::LruCache;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::corpus::ChunkStore;
use crate::embed::{dot, EmbeddingVector, Encoder};
use crate::error::{Error, Result};

pub const DEFAULT_CACHE_CAPACITY: usize = 1_000_000;
const ENCODE_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ann,
    Exact,
    Mmr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub chunk_id: u64,
    pub score: f32,
    pub stage: Stage,
    /// 1-based.
    pub rank: usize,
}

/// Ranks `(id, score)` pairs that are already in output order.
pub fn ranked(pairs: impl IntoIterator<Item = (u64, f32)>, stage: Stage) -> Vec<ScoredHit> {
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, (chunk_id, score))| ScoredHit {
            chunk_id,
            score,
            stage,
            rank: i + 1,
        })
        .collect()
}

/// LRU map from chunk id to its rerank-encoder vector.
pub struct RerankCache {
    inner: Option<Mutex<LruCache<u64, Arc<EmbeddingVector>>>>,
    capacity: usize,
    hits: AtomicU64,
    misses: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub capacity: usize,
    pub entries: usize,
    pub hits: u64,
    pub misses: u64,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

impl RerankCache {
    /// A capacity of zero disables caching.
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: NonZeroUsize::new(capacity).map(|c| Mutex::new(LruCache::new(c))),
            capacity,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn get(&self, id: u64) -> Option<Arc<EmbeddingVector>> {
        let found = self.inner.as_ref().and_then(|m| m.lock().get(&id).cloned());
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    pub fn insert(&self, id: u64, v: Arc<EmbeddingVector>) {
        if let Some(m) = &self.inner {
            m.lock().put(id, v);
        }
    }

    pub fn len(&self) -> usize {
        self.inner.as_ref().map_or(0, |m| m.lock().len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            capacity: self.capacity,
            entries: self.len(),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactOutcome {
    pub hits: Vec<ScoredHit>,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

/// Sorts by score descending, ties by ascending id, and keeps `k`.
pub fn top_k(mut pairs: Vec<(u64, f32)>, k: usize) -> Vec<(u64, f32)> {
    let cmp = |a: &(u64, f32), b: &(u64, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k, cmp);
        pairs.truncate(k);
    }
    pairs.sort_by(cmp);
    pairs
}

/// Re-scores ANN candidates with `encoder` and returns the exact top-`k`.
///
/// Candidate vectors come from `cache` when present; misses are encoded
/// from the chunk text and inserted. Any encoder failure yields
/// [`Error::RerankUnavailable`] carrying the ANN top-`k` as a fallback.
pub fn exact_rerank(
    query_text: &str,
    candidates: &[(u64, f32)],
    k: usize,
    encoder: &dyn Encoder,
    cache: &RerankCache,
    store: &ChunkStore,
) -> Result<ExactOutcome> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let mut seen = std::collections::HashSet::with_capacity(candidates.len());
    if let Some((id, _)) = candidates.iter().find(|(id, _)| !seen.insert(*id)) {
        return Err(Error::Config(format!("candidate {id} listed twice")));
    }
    let degrade = |e: Error| Error::RerankUnavailable {
        reason: e.to_string(),
        fallback: ranked(top_k(candidates.to_vec(), k), Stage::Ann),
    };

    let query = encoder.encode_one(query_text).map_err(degrade)?;
    let mut vectors: Vec<Option<Arc<EmbeddingVector>>> =
        candidates.iter().map(|(id, _)| cache.get(*id)).collect();
    let missing: Vec<usize> = (0..vectors.len()).filter(|&i| vectors[i].is_none()).collect();
    let (cache_misses, cache_hits) = (missing.len() as u64, (vectors.len() - missing.len()) as u64);

    for batch in missing.chunks(ENCODE_BATCH) {
        let texts = batch
            .iter()
            .map(|&i| store.lookup(candidates[i].0).map(|c| c.text))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let encoded = encoder.encode(&refs).map_err(degrade)?;
        for (&i, v) in batch.iter().zip(encoded) {
            let v = Arc::new(v);
            cache.insert(candidates[i].0, Arc::clone(&v));
            vectors[i] = Some(v);
        }
    }

    let mut scored = Vec::with_capacity(candidates.len());
    for ((id, _), v) in candidates.iter().zip(vectors) {
        let v = v.expect("every miss was filled");
        if v.dim() != query.dim() {
            return Err(degrade(Error::Dimension {
                expected: query.dim(),
                actual: v.dim(),
            }));
        }
        scored.push((*id, dot(query.as_slice(), v.as_slice())));
    }
    Ok(ExactOutcome {
        hits: ranked(top_k(scored, k), Stage::Exact),
        cache_hits,
        cache_misses,
    })
}

/// Greedy maximal-marginal-relevance selection.
///
/// Each step picks the candidate maximizing
/// `lambda * sim(q, d) - (1 - lambda) * max_{s in selected} sim(d, s)`,
/// ties by ascending id. The first pick is the most relevant candidate
/// for every `lambda`, since the diversity term over an empty selection is 0.
/// Hits carry the objective value at the moment they were chosen.
pub fn mmr_select(
    query: &[f32],
    candidates: &[(u64, &[f32])],
    k: usize,
    lambda: f32,
) -> Result<Vec<ScoredHit>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must be in [0, 1], got {lambda}")));
    }
    if candidates.is_empty() {
        return Err(Error::Config("MMR needs at least one candidate".into()));
    }
    if let Some((_, v)) = candidates.iter().find(|(_, v)| v.len() != query.len()) {
        return Err(Error::Dimension {
            expected: query.len(),
            actual: v.len(),
        });
    }
    let relevance: Vec<f32> = candidates.iter().map(|(_, v)| dot(query, v)).collect();
    let mut max_sim = vec![0f32; candidates.len()];
    let mut remaining: Vec<usize> = (0..candidates.len()).collect();
    let want = k.min(candidates.len());
    let mut out = Vec::with_capacity(want);

    while out.len() < want {
        let first = out.is_empty();
        let objective = |i: usize| {
            if first {
                relevance[i]
            } else {
                lambda * relevance[i] - (1.0 - lambda) * max_sim[i]
            }
        };
        let (slot, &best) = remaining
            .iter()
            .enumerate()
            .max_by(|(_, &a), (_, &b)| {
                objective(a)
                    .total_cmp(&objective(b))
                    .then(candidates[b].0.cmp(&candidates[a].0))
            })
            .unwrap();
        let score = if first { lambda * relevance[best] } else { objective(best) };
        remaining.swap_remove(slot);
        out.push(ScoredHit {
            chunk_id: candidates[best].0,
            score,
            stage: Stage::Mmr,
            rank: out.len() + 1,
        });
        let chosen = candidates[best].1;
        for &i in &remaining {
            let s = dot(candidates[i].1, chosen);
            if first || s > max_sim[i] {
                max_sim[i] = s;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> Vec<f32> {
        EmbeddingVector::normalized(v.to_vec()).unwrap().into_inner()
    }

    #[test]
    fn top_k_breaks_ties_by_id() {
        let got = top_k(vec![(5, 0.5), (2, 0.9), (1, 0.5), (9, 0.1)], 3);
        assert_eq!(got, vec![(2, 0.9), (1, 0.5), (5, 0.5)]);
    }

    #[test]
    fn lru_evicts_least_recent() {
        let cache = RerankCache::new(2);
        let v = Arc::new(EmbeddingVector::from_unit(vec![1.0]));
        cache.insert(1, v.clone());
        cache.insert(2, v.clone());
        assert!(cache.get(1).is_some());
        cache.insert(3, v.clone());
        assert!(cache.get(2).is_none());
        assert!(cache.get(1).is_some() && cache.get(3).is_some());
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.stats().misses, 1);
        let off = RerankCache::new(0);
        off.insert(1, v);
        assert!(off.get(1).is_none());
    }

    #[test]
    fn mmr_near_duplicate_is_deferred() {
        // rel: A 0.9, B 0.88, C 0.8; sim(A,B) = 0.9991, sim(A,C) = 0.72
        // lambda 0.5, after A: B -> 0.44 - 0.4996 = -0.0596, C -> 0.40 - 0.36 = 0.04
        let q = [1.0f32, 0.0, 0.0];
        let a = [0.9f32, 0.435_89, 0.0];
        let b = [0.88f32, 0.474_97, 0.0];
        let c = [0.8f32, 0.0, 0.6];
        let cands: Vec<(u64, &[f32])> = vec![(0, &a), (1, &b), (2, &c)];
        let pick = |lambda| -> Vec<u64> {
            mmr_select(&q, &cands, 2, lambda).unwrap().iter().map(|h| h.chunk_id).collect()
        };
        assert_eq!(pick(0.5), vec![0, 2]);
        assert_eq!(pick(1.0), vec![0, 1]);
        assert_eq!(pick(0.5), oracle(&q, &cands, 2, 0.5));
        let hits = mmr_select(&q, &cands, 2, 0.5).unwrap();
        assert!((hits[1].score - 0.04).abs() < 1e-3);
    }

    /// Recomputes every objective from scratch at each step.
    pub(crate) fn oracle(q: &[f32], cands: &[(u64, &[f32])], k: usize, lambda: f32) -> Vec<u64> {
        let mut selected: Vec<usize> = Vec::new();
        while selected.len() < k.min(cands.len()) {
            let mut best: Option<(f32, u64, usize)> = None;
            for (i, (id, v)) in cands.iter().enumerate() {
                if selected.contains(&i) {
                    continue;
                }
                let rel = dot(q, v);
                let score = if selected.is_empty() {
                    rel
                } else {
                    let div = selected
                        .iter()
                        .map(|&j| dot(v, cands[j].1))
                        .fold(f32::NEG_INFINITY, f32::max);
                    lambda * rel - (1.0 - lambda) * div
                };
                let better = match best {
                    None => true,
                    Some((s, bid, _)) => score > s || (score == s && *id < bid),
                };
                if better {
                    best = Some((score, *id, i));
                }
            }
            selected.push(best.unwrap().2);
        }
        selected.iter().map(|&i| cands[i].0).collect()
    }

    #[test]
    fn lambda_one_is_relevance_order() {
        let q = unit(&[1.0, 0.2]);
        let vs: Vec<Vec<f32>> = [[1.0, 0.0], [0.0, 1.0], [0.7, 0.7], [1.0, 0.0]]
            .iter()
            .map(|v| unit(v))
            .collect();
        let cands: Vec<(u64, &[f32])> = vs.iter().enumerate().map(|(i, v)| (i as u64 * 10, v.as_slice())).collect();
        let got = mmr_select(&q, &cands, 4, 1.0).unwrap();
        let expect = top_k(cands.iter().map(|(id, v)| (*id, dot(&q, v))).collect(), 4);
        assert_eq!(
            got.iter().map(|h| (h.chunk_id, h.score)).collect::<Vec<_>>(),
            expect
        );
        assert_eq!(got.iter().map(|h| h.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn exhaustion_returns_all() {
        let q = unit(&[1.0, 0.0]);
        let a = unit(&[1.0, 1.0]);
        let b = unit(&[0.0, 1.0]);
        let cands: Vec<(u64, &[f32])> = vec![(3, &a), (8, &b)];
        let mut ids: Vec<u64> = mmr_select(&q, &cands, 10, 0.3).unwrap().iter().map(|h| h.chunk_id).collect();
        ids.sort();
        assert_eq!(ids, vec![3, 8]);
    }

    #[test]
    fn mmr_errors() {
        let q = [1.0f32, 0.0];
        let bad = [1.0f32];
        assert!(matches!(
            mmr_select(&q, &[(0, &bad[..])], 1, 0.5),
            Err(Error::Dimension { .. })
        ));
        assert!(mmr_select(&q, &[(0, &q[..])], 1, 1.5).is_err());
        assert!(mmr_select(&q, &[], 1, 0.5).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cand_sets() -> impl Strategy<Value = (Vec<f32>, Vec<Vec<f32>>)> {
            (1usize..=8).prop_flat_map(|n| {
                (
                    proptest::collection::vec(-1f32..1f32, 4),
                    proptest::collection::vec(proptest::collection::vec(-1f32..1f32, 4), n),
                )
            })
        }

        proptest! {
            #[test]
            fn greedy_matches_oracle((q, vs) in cand_sets(), li in 0usize..5, k in 1usize..10) {
                let lambda = li as f32 * 0.25;
                let Some(q) = EmbeddingVector::normalized(q) else { return Ok(()) };
                let vs: Vec<Vec<f32>> = vs.into_iter().filter_map(|v| EmbeddingVector::normalized(v).map(|e| e.into_inner())).collect();
                prop_assume!(!vs.is_empty());
                let cands: Vec<(u64, &[f32])> = vs.iter().enumerate().map(|(i, v)| (i as u64, v.as_slice())).collect();
                let got = mmr_select(q.as_slice(), &cands, k, lambda).unwrap();
                let ids: Vec<u64> = got.iter().map(|h| h.chunk_id).collect();
                prop_assert_eq!(&ids, &oracle(q.as_slice(), &cands, k, lambda));
                // subset, no duplicates
                let set: std::collections::HashSet<_> = ids.iter().collect();
                prop_assert_eq!(set.len(), ids.len());
                // first pick is the relevance argmax
                let best = top_k(cands.iter().map(|(id, v)| (*id, dot(q.as_slice(), v))).collect(), 1)[0].0;
                prop_assert_eq!(ids[0], best);
            }
        }
    }
}
