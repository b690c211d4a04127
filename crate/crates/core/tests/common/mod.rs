//! Brute-force oracle shared by the integration tests.
#![allow(dead_code)]

use annserve_core::embed::dot;
use annserve_core::vectors::VectorSource;

/// Exhaustive scan: every row scored, sorted by score desc then id asc.
pub fn brute_force(vectors: &dyn VectorSource, query: &[f32], k: usize) -> Vec<(u64, f32)> {
    let mut all: Vec<(u64, f32)> = (0..vectors.len())
        .map(|i| (i as u64, dot(query, vectors.row(i))))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

pub fn recall(found: &[(u64, f32)], truth: &[(u64, f32)]) -> f64 {
    let hits = truth
        .iter()
        .filter(|(id, _)| found.iter().any(|(f, _)| f == id))
        .count();
    hits as f64 / truth.len() as f64
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// The 10k x 64 set and 100 queries the recall criteria are measured on.
pub fn ten_k() -> (annserve_core::vectors::VectorSet, annserve_core::vectors::VectorSet) {
    annserve_core::synth::clustered(10_000, 100, 64, 42)
}
