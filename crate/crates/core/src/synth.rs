//! Seeded synthetic corpora and vector sets for tests and benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::Document;
use crate::embed::normalize_in_place;
use crate::vectors::{VectorSet, VectorSource};

/// Gaussian-mixture unit vectors whose within-cluster spread lives in a
/// shared low-dimensional subspace, roughly like real text embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteredSpec {
    pub dim: usize,
    pub clusters: usize,
    pub latent_dim: usize,
    /// Standard deviation of the within-cluster offset, relative to the unit
    /// norm of a cluster center.
    pub spread: f32,
    pub seed: u64,
}

impl ClusteredSpec {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            clusters: 64,
            latent_dim: 16.min(dim),
            spread: 0.35,
            seed,
        }
    }
}

/// A mixture model drawn once from a spec; data points and held-out queries
/// come from the same distribution through independent streams.
#[derive(Debug, Clone)]
pub struct ClusteredModel {
    spec: ClusteredSpec,
    centers: Vec<Vec<f32>>,
    /// `dim x latent_dim`, row-major.
    basis: Vec<f32>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

impl ClusteredModel {
    pub fn new(spec: ClusteredSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let centers = (0..spec.clusters)
            .map(|_| {
                let mut c: Vec<f32> = (0..spec.dim).map(|_| gaussian(&mut rng)).collect();
                normalize_in_place(&mut c);
                c
            })
            .collect();
        // E|basis * z|^2 = 1 for z ~ N(0, I), so offsets have norm ~ spread
        let scale = 1.0 / ((spec.dim * spec.latent_dim) as f32).sqrt();
        let basis = (0..spec.dim * spec.latent_dim)
            .map(|_| gaussian(&mut rng) * scale)
            .collect();
        Self {
            spec,
            centers,
            basis,
        }
    }

    fn sample_into(&self, rng: &mut ChaCha8Rng, set: &mut VectorSet) {
        let ClusteredSpec {
            dim,
            latent_dim,
            spread,
            ..
        } = self.spec;
        let center = &self.centers[rng.gen_range(0..self.centers.len())];
        let z: Vec<f32> = (0..latent_dim).map(|_| gaussian(rng)).collect();
        let mut v: Vec<f32> = (0..dim)
            .map(|r| {
                let offset: f32 = (0..latent_dim).map(|j| self.basis[r * latent_dim + j] * z[j]).sum();
                center[r] + spread * offset
            })
            .collect();
        if !normalize_in_place(&mut v) {
            v = center.clone();
        }
        set.push(&v).expect("row has model dim");
    }

    fn draw(&self, n: usize, stream: u64) -> VectorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(stream);
        let mut set = VectorSet::new(self.spec.dim);
        for _ in 0..n {
            self.sample_into(&mut rng, &mut set);
        }
        set
    }

    pub fn points(&self, n: usize) -> VectorSet {
        self.draw(n, 1)
    }

    /// Held-out queries, disjoint in stream from [`points`](Self::points).
    pub fn queries(&self, n: usize) -> VectorSet {
        self.draw(n, 2)
    }
}

/// `n` points and `n_queries` held-out queries from one seeded model with
/// default mixture settings.
pub fn clustered(n: usize, n_queries: usize, dim: usize, seed: u64) -> (VectorSet, VectorSet) {
    let model = ClusteredModel::new(ClusteredSpec::new(dim, seed));
    (model.points(n), model.queries(n_queries))
}

/// Held-out queries for an arbitrary vector set: seeded random rows plus
/// Gaussian noise with expected norm `noise`, renormalized.
pub fn perturbed_queries(data: &dyn VectorSource, n: usize, noise: f32, seed: u64) -> VectorSet {
    let dim = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = noise / (dim as f32).sqrt();
    let mut set = VectorSet::new(dim);
    if data.len() == 0 {
        return set;
    }
    while set.len() < n {
        let row = data.row(rng.gen_range(0..data.len()));
        let mut q: Vec<f32> = row.iter().map(|x| x + sigma * gaussian(&mut rng)).collect();
        if normalize_in_place(&mut q) {
            set.push(&q).expect("row has the set's dim");
        }
    }
    set
}

/// Documents built from a seeded pseudo-word vocabulary. Every document is
/// distinct and non-empty.
pub fn documents(n: usize, words_per_doc: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let syllables = [
        "ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "zo", "pe", "da", "fu", "gi", "ho", "ja",
        "bel", "cor", "dun", "ent", "fal", "gor", "hin", "ist", "jor", "kel",
    ];
    let vocab: Vec<String> = (0..2000)
        .map(|_| {
            let len = rng.gen_range(2..=4);
            (0..len).map(|_| *syllables.choose(&mut rng).unwrap()).collect()
        })
        .collect();
    let topics = 20;
    (0..n)
        .map(|i| {
            // each topic favors a slice of the vocabulary so related docs overlap lexically
            let topic = rng.gen_range(0..topics);
            let band = vocab.len() / topics;
            let mut words: Vec<&str> = Vec::with_capacity(words_per_doc + 1);
            words.push(["doc", "item", "entry"][i % 3]);
            for _ in 0..words_per_doc {
                let w = if rng.gen_bool(0.7) {
                    &vocab[topic * band + rng.gen_range(0..band)]
                } else {
                    &vocab[rng.gen_range(0..vocab.len())]
                };
                words.push(w);
            }
            let mut text = words.join(" ");
            text.push_str(&format!(" n{i}"));
            Document {
                doc_id: format!("doc-{i:06}"),
                text,
                source: format!("synthetic/topic-{topic}"),
            }
        })
        .collect()
}
