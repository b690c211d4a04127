//! Recall and latency sweeps against a brute-force oracle.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::dot;
use crate::error::{Error, Result};
use crate::graph::{beam_search, BeamSearchParams, GraphView};
use crate::ivfpq::IvfPqIndex;
use crate::rerank::top_k;
use crate::vectors::VectorSource;

/// Exact top-`k` for every query by a full scan of `data`.
pub fn oracle(data: &dyn VectorSource, queries: &dyn VectorSource, k: usize) -> Vec<Vec<(u64, f32)>> {
    (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            let all = (0..data.len()).map(|i| (i as u64, dot(q, data.row(i)))).collect();
            top_k(all, k)
        })
        .collect()
}

/// Fraction of `truth` ids present in `found`.
pub fn recall_at_k(found: &[(u64, f32)], truth: &[(u64, f32)]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hit = truth.iter().filter(|(t, _)| found.iter().any(|(f, _)| f == t)).count();
    hit as f64 / truth.len() as f64
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub backend: String,
    pub params: String,
    pub k: usize,
    pub recall_at_k: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub qps: f64,
}

/// Runs `search` once per query, sequentially, and summarizes.
fn measure<F>(backend: &str, params: String, k: usize, queries: &dyn VectorSource, truth: &[Vec<(u64, f32)>], search: F) -> Result<BenchRow>
where
    F: Fn(&[f32]) -> Result<Vec<(u64, f32)>>,
{
    let mut lat = Vec::with_capacity(queries.len());
    let mut recall = 0.0;
    let wall = Instant::now();
    for (qi, t) in truth.iter().enumerate() {
        let start = Instant::now();
        let hits = search(queries.row(qi))?;
        lat.push(start.elapsed().as_secs_f64() * 1e3);
        recall += recall_at_k(&hits, t);
    }
    let secs = wall.elapsed().as_secs_f64();
    lat.sort_by(f64::total_cmp);
    Ok(BenchRow {
        backend: backend.into(),
        params,
        k,
        recall_at_k: recall / truth.len().max(1) as f64,
        p50_ms: percentile(&lat, 50.0),
        p95_ms: percentile(&lat, 95.0),
        p99_ms: percentile(&lat, 99.0),
        qps: if secs > 0.0 { truth.len() as f64 / secs } else { 0.0 },
    })
}

pub fn sweep_graph<G: GraphView>(
    graph: &G,
    queries: &dyn VectorSource,
    truth: &[Vec<(u64, f32)>],
    ls: &[usize],
    w: usize,
    k: usize,
) -> Result<Vec<BenchRow>> {
    ls.iter()
        .map(|&l| {
            let p = BeamSearchParams::new(l, w.min(l), k);
            p.validate()?;
            measure("graph", format!("L={l} W={}", p.w), k, queries, truth, |q| {
                beam_search(graph, q, &p)
            })
        })
        .collect()
}

pub fn sweep_ivfpq(
    index: &IvfPqIndex,
    queries: &dyn VectorSource,
    truth: &[Vec<(u64, f32)>],
    probes: &[usize],
    k: usize,
) -> Result<Vec<BenchRow>> {
    probes
        .iter()
        .map(|&n_probe| {
            measure("ivfpq", format!("n_probe={n_probe}"), k, queries, truth, |q| {
                index.search(q, k, n_probe)
            })
        })
        .collect()
}

pub fn write_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(Error::io(path))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path)(std::io::Error::other(e))
}

/// Fixed-width summary table.
pub fn render_table(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:<8} {:<18} {:>9} {:>9} {:>9} {:>9} {:>10}\n",
        "backend", "params", "recall", "p50 ms", "p95 ms", "p99 ms", "qps"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<8} {:<18} {:>9.4} {:>9.3} {:>9.3} {:>9.3} {:>10.1}\n",
            r.backend, r.params, r.recall_at_k, r.p50_ms, r.p95_ms, r.p99_ms, r.qps
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_vamana, VamanaParams};
    use crate::synth::clustered;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn graph_sweep_reaches_exact_at_l_equal_n() {
        let (data, queries) = clustered(500, 20, 16, 2);
        let truth = oracle(&data, &queries, 10);
        let g = build_vamana(data, &VamanaParams::new(12, 24, 1.2, 0)).unwrap();
        let rows = sweep_graph(&g, &queries, &truth, &[16, 32, 64, 500], 4, 10).unwrap();
        assert_eq!(rows.len(), 4);
        for pair in rows.windows(2) {
            assert!(pair[1].recall_at_k >= pair[0].recall_at_k - 0.01);
        }
        assert_eq!(rows[3].recall_at_k, 1.0);
        assert!(rows.iter().all(|r| r.p50_ms <= r.p99_ms));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("backend,params,k,recall_at_k"));
        assert_eq!(text.lines().count(), 5);
        assert!(render_table(&rows).contains("L=500 W=4"));
    }
}
