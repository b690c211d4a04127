//! Request counters and rolling latency percentiles.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use annserve_core::api::Timings;
use annserve_core::bench::percentile;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

const WINDOW: usize = 10_000;
const QPS_SPAN: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

impl Percentiles {
    fn of(mut xs: Vec<f64>) -> Self {
        xs.sort_by(f64::total_cmp);
        Self {
            p50: percentile(&xs, 50.0),
            p95: percentile(&xs, 95.0),
            p99: percentile(&xs, 99.0),
        }
    }
}

/// Percentiles over the last completed queries. Exact and MMR figures
/// cover only the queries that ran those stages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub ann: Percentiles,
    pub exact: Percentiles,
    pub mmr: Percentiles,
    pub total: Percentiles,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub queries: u64,
    pub degraded: u64,
    pub errors: u64,
    pub rejected: u64,
    pub votes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    #[serde(flatten)]
    pub counters: Counters,
    /// Completed queries per second over the last minute.
    pub qps: f64,
    pub uptime_s: f64,
    pub latency_ms: StageLatency,
}

#[derive(Default)]
struct Inner {
    counters: Counters,
    window: VecDeque<(Instant, Timings, bool, bool)>,
}

pub struct Stats {
    started: Instant,
    inner: Mutex<Inner>,
}

impl Default for Stats {
    fn default() -> Self {
        Self::new()
    }
}

impl Stats {
    pub fn new() -> Self {
        Self {
            started: Instant::now(),
            inner: Mutex::new(Inner::default()),
        }
    }

    pub fn record_query(&self, t: &Timings, exact: bool, mmr: bool, degraded: bool) {
        let mut g = self.inner.lock();
        g.counters.queries += 1;
        g.counters.degraded += degraded as u64;
        if g.window.len() == WINDOW {
            g.window.pop_front();
        }
        g.window.push_back((Instant::now(), *t, exact, mmr));
    }

    pub fn record_error(&self) {
        self.inner.lock().counters.errors += 1;
    }

    pub fn record_rejected(&self) {
        self.inner.lock().counters.rejected += 1;
    }

    pub fn record_vote(&self) {
        self.inner.lock().counters.votes += 1;
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        let g = self.inner.lock();
        let now = Instant::now();
        let uptime = now - self.started;
        let recent = g.window.iter().filter(|(at, ..)| now - *at <= QPS_SPAN).count();
        let span = uptime.min(QPS_SPAN).as_secs_f64();
        let pick = |f: fn(&(Instant, Timings, bool, bool)) -> Option<f64>| {
            Percentiles::of(g.window.iter().filter_map(f).collect())
        };
        StatsSnapshot {
            counters: g.counters,
            qps: if span > 0.0 { recent as f64 / span } else { 0.0 },
            uptime_s: uptime.as_secs_f64(),
            latency_ms: StageLatency {
                ann: pick(|e| Some(e.1.ann_ms)),
                exact: pick(|e| e.2.then_some(e.1.exact_ms)),
                mmr: pick(|e| e.3.then_some(e.1.mmr_ms)),
                total: pick(|e| Some(e.1.total_ms)),
            },
        }
    }
}
