//! Lloyd's k-means with k-means++ seeding, used for both the coarse
//! quantizer and the per-subspace PQ codebooks.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embed::l2_sq;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the relative inertia change drops below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 25,
            tolerance: 1e-4,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    /// `k * dim`, row-major.
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
    /// Sum of squared distances from each point to its centroid.
    pub inertia: f64,
    pub iterations: usize,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

/// Index of the nearest centroid (lowest index on ties) and its squared distance.
#[inline]
pub fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = l2_sq(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(data: &[f32], dim: usize, centroids: &[f32]) -> (Vec<u32>, Vec<f32>) {
    data.par_chunks_exact(dim)
        .map(|p| {
            let (c, d) = nearest(p, centroids, dim);
            (c as u32, d)
        })
        .unzip()
}

fn plus_plus_init(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = row(first).to_vec();
    let mut d2: Vec<f32> = (0..n).map(|i| l2_sq(row(i), row(first))).collect();
    for _ in 1..k {
        let next = match WeightedIndex::new(d2.iter().map(|&d| d as f64)) {
            Ok(w) => w.sample(rng),
            // every point coincides with a chosen centroid
            Err(_) => (0..n).find(|&i| !chosen[i]).unwrap_or(0),
        };
        chosen[next] = true;
        let c = row(next).to_vec();
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            *d = d.min(l2_sq(row(i), &c));
        });
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Moves each empty centroid onto the farthest member of the currently
/// largest cluster, then reassigns that member.
fn repair_empty(
    data: &[f32],
    dim: usize,
    centroids: &mut [f32],
    assignments: &mut [u32],
    dists: &mut [f32],
) -> usize {
    let k = centroids.len() / dim;
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a as usize] += 1;
    }
    let mut repaired = 0;
    for empty in 0..k {
        if counts[empty] != 0 {
            continue;
        }
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        if counts[largest] < 2 {
            break;
        }
        let far = (0..assignments.len())
            .filter(|&i| assignments[i] as usize == largest)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
            .unwrap();
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(&data[far * dim..(far + 1) * dim]);
        assignments[far] = empty as u32;
        dists[far] = 0.0;
        counts[largest] -= 1;
        counts[empty] = 1;
        repaired += 1;
    }
    repaired
}

/// Clusters `data` (row-major, `dim` columns). Deterministic for a given seed.
pub fn kmeans(data: &[f32], dim: usize, params: &KMeansParams) -> Result<KMeans> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::Config("data length is not a multiple of dim".into()));
    }
    let n = data.len() / dim;
    if params.k == 0 || n < params.k {
        return Err(Error::Config(format!(
            "k-means needs 1 <= k <= N (k={}, N={n})",
            params.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = plus_plus_init(data, dim, params.k, &mut rng);
    let mut prev_inertia = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..params.max_iters {
        iterations += 1;
        let (mut assignments, mut dists) = assign(data, dim, &centroids);
        let inertia: f64 = dists.iter().map(|&d| d as f64).sum();
        let converged = inertia == 0.0
            || (prev_inertia.is_finite()
                && (prev_inertia - inertia).abs() / prev_inertia.max(f64::MIN_POSITIVE)
                    < params.tolerance);
        if converged {
            break;
        }
        prev_inertia = inertia;
        repair_empty(data, dim, &mut centroids, &mut assignments, &mut dists);

        let mut sums = vec![0f64; params.k * dim];
        let mut counts = vec![0usize; params.k];
        for (i, &a) in assignments.iter().enumerate() {
            let a = a as usize;
            counts[a] += 1;
            for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
                *s += *x as f64;
            }
        }
        for c in 0..params.k {
            if counts[c] == 0 {
                continue;
            }
            for j in 0..dim {
                centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
            }
        }
    }
    let (assignments, dists) = assign(data, dim, &centroids);
    Ok(KMeans {
        dim,
        inertia: dists.iter().map(|&d| d as f64).sum(),
        centroids,
        assignments,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_equals_k_gives_zero_inertia() {
        let data = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0];
        let km = kmeans(&data, 2, &KMeansParams::new(4, 7)).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut a = km.assignments.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3]);
        for (i, &c) in km.assignments.iter().enumerate() {
            assert_eq!(km.centroid(c as usize), &data[i * 2..i * 2 + 2]);
        }
    }

    #[test]
    fn too_few_points() {
        assert!(kmeans(&[1.0, 2.0], 1, &KMeansParams::new(3, 0)).is_err());
    }

    #[test]
    fn same_seed_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..3000).map(|_| rng.gen::<f32>()).collect();
        let a = kmeans(&data, 3, &KMeansParams::new(16, 42)).unwrap();
        let b = kmeans(&data, 3, &KMeansParams::new(16, 42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicates_are_repaired_without_nan() {
        // 6 copies of one point and 2 of another, k=4: two centroids start
        // as duplicates and must not become NaN
        let mut data = vec![1.0f32; 12];
        data.extend_from_slice(&[3.0, 3.0, 3.1, 3.0]);
        let km = kmeans(&data, 2, &KMeansParams::new(4, 3)).unwrap();
        assert!(km.centroids.iter().all(|x| x.is_finite()));
        assert!(km.inertia < 1e-6);
    }

    #[test]
    fn repair_splits_largest_cluster() {
        let data = [0.0f32, 1.0, 2.0, 10.0];
        let mut centroids = vec![1.0, 100.0];
        let mut assignments = vec![0, 0, 0, 0];
        let mut dists: Vec<f32> = data.iter().map(|x| (x - 1.0) * (x - 1.0)).collect();
        assert_eq!(repair_empty(&data, 1, &mut centroids, &mut assignments, &mut dists), 1);
        assert_eq!(centroids[1], 10.0);
        assert_eq!(assignments, vec![0, 0, 0, 1]);
    }
}
