mod common;

use annserve_core::corpus::{ingest, ChunkStore, ChunkingConfig};
use annserve_core::embed::{dot, Encoder, ReferenceEncoder};
use annserve_core::rerank::{exact_rerank, RerankCache, Stage};
use annserve_core::synth::documents;
use annserve_core::vectors::{VectorSet, VectorSource};
use common::brute_force;

/// 1000 single-chunk documents, plus their reference vectors.
fn corpus(dir: &std::path::Path) -> (ChunkStore, VectorSet, ReferenceEncoder) {
    let cfg = ChunkingConfig {
        window_tokens: 64,
        overlap_tokens: 8,
        strict: true,
    };
    let store = ingest(documents(1000, 30, 4).into_iter().map(Ok), &cfg, dir).unwrap();
    assert_eq!(store.len(), 1000);
    let enc = ReferenceEncoder::with_dim(64);
    let texts: Vec<String> = store.iter().map(|c| c.unwrap().text).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vectors = VectorSet::from_rows(64, enc.encode(&refs).unwrap().iter().map(|v| v.as_slice()))
        .unwrap();
    (store, vectors, enc)
}

#[test]
fn every_chunk_is_its_own_nearest_neighbor() {
    let dir = tempfile::tempdir().unwrap();
    let (store, vectors, enc) = corpus(dir.path());
    for id in 0..store.len() {
        let text = store.lookup(id).unwrap().text;
        let q = enc.encode_one(&text).unwrap();
        let top = brute_force(&vectors, q.as_slice(), 1);
        assert_eq!(top[0].0, id);
        assert!((top[0].1 - 1.0).abs() < 1e-4);
    }
}

#[test]
fn full_pool_rerank_equals_global_top_k() {
    let dir = tempfile::tempdir().unwrap();
    let (store, vectors, enc) = corpus(dir.path());
    let cache = RerankCache::new(10_000);
    // the ANN scores are deliberately wrong: only the pool membership matters
    let pool: Vec<(u64, f32)> = (0..1000).map(|i| (i, 0.0)).collect();
    for query in ["kalo mine ruvi", "doc", "belcor dunent falgor"] {
        let q = enc.encode_one(query).unwrap();
        let truth = brute_force(&vectors, q.as_slice(), 10);
        let cold = exact_rerank(query, &pool, 10, &enc, &cache, &store).unwrap();
        let got: Vec<(u64, f32)> = cold.hits.iter().map(|h| (h.chunk_id, h.score)).collect();
        assert_eq!(got, truth);
        assert!(cold.hits.iter().all(|h| h.stage == Stage::Exact));
        let warm = exact_rerank(query, &pool, 10, &enc, &cache, &store).unwrap();
        assert_eq!(warm.cache_misses, 0);
        assert_eq!(warm.cache_hits, 1000);
        assert_eq!(warm.hits, cold.hits);
    }
}

#[test]
fn k_equal_pool_only_reorders() {
    let dir = tempfile::tempdir().unwrap();
    let (store, vectors, enc) = corpus(dir.path());
    let cache = RerankCache::new(0);
    let pool: Vec<(u64, f32)> = [5u64, 900, 17, 3, 444].iter().map(|&i| (i, 1.0)).collect();
    let out = exact_rerank("ruvi sato", &pool, 5, &enc, &cache, &store).unwrap();
    let mut ids: Vec<u64> = out.hits.iter().map(|h| h.chunk_id).collect();
    let q = enc.encode_one("ruvi sato").unwrap();
    for h in &out.hits {
        assert_eq!(h.score, dot(q.as_slice(), vectors.row(h.chunk_id as usize)));
    }
    ids.sort();
    assert_eq!(ids, [3, 5, 17, 444, 900]);
    assert_eq!(out.cache_misses, 5);
}
