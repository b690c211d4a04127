//! Vamana graph construction and beam search over a disk-resident layout.
//!
//! The graph stores full-precision vectors next to each node's adjacency so
//! one node fetch is one contiguous read:
//!
//! ```text
//! header (64 bytes):
//!   "VMNA" | version u32 | N u64 | dim u32 | R u32 | entry_point u32 |
//!   alpha f32 | seed u64 | checksum u64 | l_build u32 | reserved
//! N node records:
//!   vector f32 * dim | degree u32 | neighbors u32 * R (zero padded)
//! ```
//!
//! The checksum is XXH3-64 over every byte after the header.
//!
//! All vectors are assumed unit-norm: search ranks by inner product while
//! construction prunes by squared Euclidean distance, which agree on the
//! unit sphere.

use std::collections::{HashSet, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use memmap2::{Advice, Mmap};
use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::Xxh3;

use crate::embed::{dot, l2_sq};
use crate::error::{Error, Result};
use crate::vectors::{VectorSet, VectorSource};

pub const MAGIC: [u8; 4] = *b"VMNA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;
const MEDOID_SAMPLE: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VamanaParams {
    /// Maximum out-degree.
    pub r: usize,
    pub l_build: usize,
    pub alpha: f32,
    pub seed: u64,
    /// Refuse builds whose vectors plus adjacency would exceed this.
    pub max_memory_bytes: u64,
}

impl Default for VamanaParams {
    fn default() -> Self {
        Self {
            r: 64,
            l_build: 128,
            alpha: 1.2,
            seed: 0,
            max_memory_bytes: 32 << 30,
        }
    }
}

impl VamanaParams {
    pub fn new(r: usize, l_build: usize, alpha: f32, seed: u64) -> Self {
        Self {
            r,
            l_build,
            alpha,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamSearchParams {
    /// Search list capacity ("search complexity").
    pub l: usize,
    /// Beam width: candidates expanded per round.
    pub w: usize,
    pub k: usize,
}

impl BeamSearchParams {
    pub fn new(l: usize, w: usize, k: usize) -> Self {
        Self { l, w, k }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.w == 0 || self.l < self.k || self.w > self.l {
            return Err(Error::Config(format!(
                "beam search needs L >= k >= 1 and 1 <= W <= L (L={}, W={}, k={})",
                self.l, self.w, self.k
            )));
        }
        Ok(())
    }
}

/// Read access to a built graph, in memory or memory-mapped.
pub trait GraphView: Sync {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn entry_point(&self) -> u32;
    fn vector(&self, id: u32) -> &[f32];
    fn neighbors(&self, id: u32) -> &[u32];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    id: u32,
    score: f32,
    expanded: bool,
}

/// Per-search counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub expanded: usize,
    pub scored: usize,
}

/// Sorted (score desc, id asc) list of at most `cap` candidates.
struct CandidateList {
    items: Vec<Candidate>,
    cap: usize,
}

impl CandidateList {
    fn insert(&mut self, id: u32, score: f32) {
        let pos = self
            .items
            .partition_point(|c| c.score.total_cmp(&score).then(id.cmp(&c.id)).is_gt());
        if pos >= self.cap {
            return;
        }
        if self.items.len() == self.cap {
            self.items.pop();
        }
        self.items.insert(
            pos,
            Candidate {
                id,
                score,
                expanded: false,
            },
        );
    }
}

/// Beam search returning the final candidate list and the ids expanded on
/// the way (the visited set used by construction).
fn search_impl<G: GraphView + ?Sized>(
    graph: &G,
    query: &[f32],
    l: usize,
    w: usize,
    mut expanded_out: Option<&mut Vec<u32>>,
) -> (Vec<(u32, f32)>, SearchStats) {
    let mut stats = SearchStats::default();
    let entry = graph.entry_point();
    let mut visited: HashSet<u32> = HashSet::with_capacity(l * 4);
    let mut list = CandidateList {
        items: Vec::with_capacity(l + 1),
        cap: l,
    };
    visited.insert(entry);
    list.insert(entry, dot(query, graph.vector(entry)));
    stats.scored += 1;
    let mut beam: Vec<u32> = Vec::with_capacity(w);
    loop {
        beam.clear();
        for c in list.items.iter_mut().filter(|c| !c.expanded).take(w) {
            c.expanded = true;
            beam.push(c.id);
        }
        if beam.is_empty() {
            break;
        }
        stats.expanded += beam.len();
        if let Some(out) = expanded_out.as_deref_mut() {
            out.extend_from_slice(&beam);
        }
        for &node in &beam {
            for &nb in graph.neighbors(node) {
                if visited.insert(nb) {
                    list.insert(nb, dot(query, graph.vector(nb)));
                    stats.scored += 1;
                }
            }
        }
    }
    (list.items.iter().map(|c| (c.id, c.score)).collect(), stats)
}

/// Top-`k` `(id, exact inner product)` pairs for `query`.
pub fn beam_search<G: GraphView + ?Sized>(
    graph: &G,
    query: &[f32],
    params: &BeamSearchParams,
) -> Result<Vec<(u64, f32)>> {
    beam_search_with_stats(graph, query, params).map(|(hits, _)| hits)
}

pub fn beam_search_with_stats<G: GraphView + ?Sized>(
    graph: &G,
    query: &[f32],
    params: &BeamSearchParams,
) -> Result<(Vec<(u64, f32)>, SearchStats)> {
    params.validate()?;
    if query.len() != graph.dim() {
        return Err(Error::Dimension {
            expected: graph.dim(),
            actual: query.len(),
        });
    }
    let (list, stats) = search_impl(graph, query, params.l, params.w, None);
    Ok((
        list.into_iter()
            .take(params.k)
            .map(|(id, s)| (id as u64, s))
            .collect(),
        stats,
    ))
}

/// Fraction of nodes reachable from the entry point by BFS.
pub fn reachable_fraction<G: GraphView + ?Sized>(graph: &G) -> f64 {
    let mut seen = vec![false; graph.len()];
    let mut queue = VecDeque::from([graph.entry_point()]);
    seen[graph.entry_point() as usize] = true;
    let mut count = 1usize;
    while let Some(n) = queue.pop_front() {
        for &nb in graph.neighbors(n) {
            if !std::mem::replace(&mut seen[nb as usize], true) {
                count += 1;
                queue.push_back(nb);
            }
        }
    }
    count as f64 / graph.len() as f64
}

/// Fully in-memory graph, as produced by [`build_vamana`] or [`VamanaGraph::load`].
#[derive(Debug, Clone, PartialEq)]
pub struct VamanaGraph {
    vectors: VectorSet,
    adjacency: Vec<Vec<u32>>,
    entry_point: u32,
    params: VamanaParams,
}

impl GraphView for VamanaGraph {
    fn len(&self) -> usize {
        self.adjacency.len()
    }
    fn dim(&self) -> usize {
        self.vectors.dim()
    }
    fn entry_point(&self) -> u32 {
        self.entry_point
    }
    #[inline]
    fn vector(&self, id: u32) -> &[f32] {
        self.vectors.row(id as usize)
    }
    #[inline]
    fn neighbors(&self, id: u32) -> &[u32] {
        &self.adjacency[id as usize]
    }
}

/// Point closest to the mean of a (seeded) sample: the exact medoid of the
/// sample under squared Euclidean distance.
fn medoid(vectors: &dyn VectorSource, seed: u64) -> u32 {
    let n = vectors.len();
    let rows: Vec<usize> = if n <= MEDOID_SAMPLE {
        (0..n).collect()
    } else {
        sample(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x3ed0), n, MEDOID_SAMPLE).into_vec()
    };
    let dim = vectors.dim();
    let mut mean = vec![0f64; dim];
    for &i in &rows {
        for (m, x) in mean.iter_mut().zip(vectors.row(i)) {
            *m += *x as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|m| (m / rows.len() as f64) as f32).collect();
    rows.iter()
        .map(|&i| (i, l2_sq(vectors.row(i), &mean)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i as u32)
        .unwrap()
}

/// Alpha-pruned neighbor selection for `node` from `candidates`.
fn robust_prune(
    vectors: &VectorSet,
    node: u32,
    candidates: &mut Vec<u32>,
    alpha: f32,
    r: usize,
) -> Vec<u32> {
    candidates.sort_unstable();
    candidates.dedup();
    let p = vectors.row(node as usize);
    let mut pool: Vec<(u32, f32)> = candidates
        .iter()
        .filter(|&&c| c != node)
        .map(|&c| (c, l2_sq(p, vectors.row(c as usize))))
        .collect();
    pool.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut out = Vec::with_capacity(r);
    let mut alive = vec![true; pool.len()];
    for i in 0..pool.len() {
        if !alive[i] {
            continue;
        }
        let (chosen, _) = pool[i];
        out.push(chosen);
        if out.len() == r {
            break;
        }
        let cv = vectors.row(chosen as usize);
        for j in i + 1..pool.len() {
            if alive[j] && alpha * l2_sq(cv, vectors.row(pool[j].0 as usize)) <= pool[j].1 {
                alive[j] = false;
            }
        }
    }
    out
}

/// Builds a Vamana graph over unit-norm `vectors`. Node ids are row numbers.
///
/// Nodes are processed in a seeded random order, in batches: each batch's
/// searches and prunes run in parallel against the graph as it stood before
/// the batch, and their results are applied in order. Output depends only on
/// the inputs and the seed, never on the thread count.
pub fn build_vamana(vectors: VectorSet, params: &VamanaParams) -> Result<VamanaGraph> {
    let n = vectors.len();
    let VamanaParams {
        r, l_build, alpha, ..
    } = *params;
    if n < 2 || r < 2 || l_build < r || !(alpha >= 1.0) {
        return Err(Error::Config(format!(
            "need N >= 2, R >= 2, L_build >= R, alpha >= 1 (N={n}, R={r}, L_build={l_build}, alpha={alpha})"
        )));
    }
    if n > u32::MAX as usize {
        return Err(Error::Config("graph ids are u32".into()));
    }
    let needed = n as u64 * (vectors.dim() as u64 * 4 + r as u64 * 4 + 32);
    if needed > params.max_memory_bytes {
        return Err(Error::BuildResource {
            needed,
            limit: params.max_memory_bytes,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let init_degree = r.min(n - 1);
    let adjacency: Vec<Vec<u32>> = (0..n)
        .map(|i| {
            sample(&mut rng, n - 1, init_degree)
                .into_iter()
                .map(|j| if j >= i { j as u32 + 1 } else { j as u32 })
                .collect()
        })
        .collect();
    let entry_point = medoid(&vectors, params.seed);
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut rng);
    let mut graph = VamanaGraph {
        vectors,
        adjacency,
        entry_point,
        params: *params,
    };

    let batch = (n / 64).clamp(1, 256);
    for pass_alpha in [1.0, alpha] {
        for nodes in order.chunks(batch) {
            let updates: Vec<Vec<u32>> = nodes
                .par_iter()
                .map(|&p| {
                    let mut visited = Vec::new();
                    search_impl(&graph, graph.vector(p), l_build, 1, Some(&mut visited));
                    visited.extend_from_slice(&graph.adjacency[p as usize]);
                    robust_prune(&graph.vectors, p, &mut visited, pass_alpha, r)
                })
                .collect();
            for (&p, out) in nodes.iter().zip(&updates) {
                graph.adjacency[p as usize].clone_from(out);
            }
            for (&p, out) in nodes.iter().zip(updates) {
                for j in out {
                    let list = &mut graph.adjacency[j as usize];
                    if list.contains(&p) {
                        continue;
                    }
                    if list.len() < r {
                        list.push(p);
                    } else {
                        let mut cands = list.clone();
                        cands.push(p);
                        let pruned = robust_prune(&graph.vectors, j, &mut cands, pass_alpha, r);
                        graph.adjacency[j as usize] = pruned;
                    }
                }
            }
        }
    }
    connect_strays(&mut graph, l_build, r);
    Ok(graph)
}

/// Marks everything reachable from `start` that is not yet `seen`.
fn mark_reachable(adjacency: &[Vec<u32>], start: u32, seen: &mut [bool]) {
    if std::mem::replace(&mut seen[start as usize], true) {
        return;
    }
    let mut queue = VecDeque::from([start]);
    while let Some(n) = queue.pop_front() {
        for &nb in &adjacency[n as usize] {
            if !std::mem::replace(&mut seen[nb as usize], true) {
                queue.push_back(nb);
            }
        }
    }
}

/// Gives every node the entry point cannot reach an in-edge from the most
/// similar reachable node that still has a free slot. Hosts come from the
/// node's own search neighborhood, else from a full scan; if every reachable
/// node is full, the nearest one drops its least similar neighbor and the
/// sweep repeats. Returns the number of edges added.
fn connect_strays(graph: &mut VamanaGraph, l_build: usize, r: usize) -> usize {
    let n = graph.len();
    let mut added = 0;
    for _round in 0..8 {
        let mut seen = vec![false; n];
        mark_reachable(&graph.adjacency, graph.entry_point, &mut seen);
        if seen.iter().all(|&s| s) {
            break;
        }
        for u in 0..n as u32 {
            if seen[u as usize] {
                continue;
            }
            let q = graph.vector(u);
            let (near, _) = search_impl(&*graph, q, l_build, 1, None);
            let free = |c: u32| seen[c as usize] && graph.adjacency[c as usize].len() < r;
            let host = near.iter().map(|c| c.0).find(|&c| free(c)).or_else(|| {
                (0..n as u32)
                    .filter(|&c| free(c))
                    .map(|c| (c, dot(q, graph.vector(c))))
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                    .map(|(c, _)| c)
            });
            match host {
                Some(h) => graph.adjacency[h as usize].push(u),
                None => {
                    let h = near[0].0;
                    let hv = graph.vector(h);
                    let list = &graph.adjacency[h as usize];
                    let worst = (0..list.len())
                        .min_by(|&a, &b| {
                            dot(hv, graph.vector(list[a])).total_cmp(&dot(hv, graph.vector(list[b])))
                        })
                        .expect("a full node has neighbors");
                    graph.adjacency[h as usize][worst] = u;
                }
            }
            added += 1;
            mark_reachable(&graph.adjacency, u, &mut seen);
        }
    }
    if added > 0 {
        tracing::debug!(added, "linked unreachable nodes");
    }
    added
}

fn record_len(dim: usize, r: usize) -> usize {
    dim * 4 + 4 + r * 4
}

struct Header {
    n: u64,
    dim: u32,
    r: u32,
    entry_point: u32,
    alpha: f32,
    seed: u64,
    checksum: u64,
    l_build: u32,
}

impl Header {
    fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&VERSION.to_le_bytes());
        b[8..16].copy_from_slice(&self.n.to_le_bytes());
        b[16..20].copy_from_slice(&self.dim.to_le_bytes());
        b[20..24].copy_from_slice(&self.r.to_le_bytes());
        b[24..28].copy_from_slice(&self.entry_point.to_le_bytes());
        b[28..32].copy_from_slice(&self.alpha.to_le_bytes());
        b[32..40].copy_from_slice(&self.seed.to_le_bytes());
        b[40..48].copy_from_slice(&self.checksum.to_le_bytes());
        b[48..52].copy_from_slice(&self.l_build.to_le_bytes());
        b
    }

    fn parse(b: &[u8], path: &Path) -> Result<Self> {
        if b.len() < HEADER_LEN || b[0..4] != MAGIC {
            return Err(Error::corrupt(path, "missing VMNA header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let h = Self {
            n: u64_at(8),
            dim: u32_at(16),
            r: u32_at(20),
            entry_point: u32_at(24),
            alpha: f32::from_le_bytes(b[28..32].try_into().unwrap()),
            seed: u64_at(32),
            checksum: u64_at(40),
            l_build: u32_at(48),
        };
        if h.n == 0 || h.dim == 0 || h.entry_point as u64 >= h.n {
            return Err(Error::corrupt(path, "inconsistent header"));
        }
        Ok(h)
    }
}

impl VamanaGraph {
    pub fn params(&self) -> &VamanaParams {
        &self.params
    }

    pub fn vectors(&self) -> &VectorSet {
        &self.vectors
    }

    pub fn adjacency(&self) -> &[Vec<u32>] {
        &self.adjacency
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (dim, r) = (self.dim(), self.params.r);
        let mut body = Vec::with_capacity(self.len() * record_len(dim, r));
        for id in 0..self.len() {
            body.extend_from_slice(bytemuck::cast_slice(self.vectors.row(id)));
            let nbrs = &self.adjacency[id];
            body.extend_from_slice(&(nbrs.len() as u32).to_le_bytes());
            let mut padded = nbrs.clone();
            padded.resize(r, 0);
            body.extend_from_slice(bytemuck::cast_slice(&padded));
        }
        let header = Header {
            n: self.len() as u64,
            dim: dim as u32,
            r: r as u32,
            entry_point: self.entry_point,
            alpha: self.params.alpha,
            seed: self.params.seed,
            checksum: xxhash_rust::xxh3::xxh3_64(&body),
            l_build: self.params.l_build as u32,
        };
        let file = File::create(path).map_err(Error::io(path))?;
        let mut w = BufWriter::new(file);
        w.write_all(&header.to_bytes())
            .and_then(|_| w.write_all(&body))
            .and_then(|_| w.flush())
            .and_then(|_| w.get_ref().sync_all())
            .map_err(Error::io(path))
    }

    /// Reads the whole index into memory.
    pub fn load(path: &Path) -> Result<Self> {
        let served = MmapGraph::open(path)?;
        let mut vectors = VectorSet::new(served.dim());
        let mut adjacency = Vec::with_capacity(served.len());
        for id in 0..served.len() as u32 {
            vectors.push(served.vector(id))?;
            adjacency.push(served.neighbors(id).to_vec());
        }
        Ok(Self {
            vectors,
            adjacency,
            entry_point: served.entry_point,
            params: served.params(),
        })
    }
}

/// A graph served straight from its index file.
///
/// Opening verifies the checksum with buffered reads, then maps the file
/// with random-access advice so searches only fault in the records they touch.
#[derive(Debug)]
pub struct MmapGraph {
    path: PathBuf,
    map: Mmap,
    n: usize,
    dim: usize,
    r: usize,
    entry_point: u32,
    alpha: f32,
    seed: u64,
    l_build: usize,
}

impl MmapGraph {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(Error::io(path))?;
        let mut head = [0u8; HEADER_LEN];
        file.read_exact(&mut head)
            .map_err(|_| Error::corrupt(path, "file shorter than header"))?;
        let h = Header::parse(&head, path)?;
        let rec = record_len(h.dim as usize, h.r as usize) as u64;
        let expected = HEADER_LEN as u64 + h.n * rec;
        let actual = file.metadata().map_err(Error::io(path))?.len();
        if actual != expected {
            return Err(Error::corrupt(
                path,
                format!("expected {expected} bytes, found {actual}"),
            ));
        }
        let mut hasher = Xxh3::new();
        let mut buf = vec![0u8; 1 << 20];
        loop {
            let got = file.read(&mut buf).map_err(Error::io(path))?;
            if got == 0 {
                break;
            }
            hasher.update(&buf[..got]);
        }
        if hasher.digest() != h.checksum {
            return Err(Error::corrupt(path, "checksum mismatch"));
        }
        // SAFETY: index files are immutable once written.
        let map = unsafe { Mmap::map(&file) }.map_err(Error::io(path))?;
        map.advise(Advice::Random).map_err(Error::io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            map,
            n: h.n as usize,
            dim: h.dim as usize,
            r: h.r as usize,
            entry_point: h.entry_point,
            alpha: h.alpha,
            seed: h.seed,
            l_build: h.l_build as usize,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn params(&self) -> VamanaParams {
        VamanaParams {
            r: self.r,
            l_build: self.l_build,
            alpha: self.alpha,
            seed: self.seed,
            ..VamanaParams::default()
        }
    }

    #[inline]
    fn record(&self, id: u32) -> &[u8] {
        let len = record_len(self.dim, self.r);
        let start = HEADER_LEN + id as usize * len;
        &self.map[start..start + len]
    }
}

impl GraphView for MmapGraph {
    fn len(&self) -> usize {
        self.n
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn entry_point(&self) -> u32 {
        self.entry_point
    }
    #[inline]
    fn vector(&self, id: u32) -> &[f32] {
        bytemuck::cast_slice(&self.record(id)[..self.dim * 4])
    }
    #[inline]
    fn neighbors(&self, id: u32) -> &[u32] {
        let rec = self.record(id);
        let tail: &[u32] = bytemuck::cast_slice(&rec[self.dim * 4..]);
        let degree = (tail[0] as usize).min(self.r);
        &tail[1..1 + degree]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{ClusteredModel, ClusteredSpec};

    fn data(n: usize) -> VectorSet {
        ClusteredModel::new(ClusteredSpec::new(16, 9)).points(n)
    }

    #[test]
    fn two_nodes_point_at_each_other() {
        let v = VectorSet::from_rows(2, [[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let g = build_vamana(v, &VamanaParams::new(2, 2, 1.2, 0)).unwrap();
        assert_eq!(g.adjacency(), &[vec![1], vec![0]]);
    }

    #[test]
    fn parameter_validation() {
        let v = data(10);
        assert!(build_vamana(v.clone(), &VamanaParams::new(1, 4, 1.2, 0)).is_err());
        assert!(build_vamana(v.clone(), &VamanaParams::new(4, 3, 1.2, 0)).is_err());
        assert!(build_vamana(v.clone(), &VamanaParams::new(4, 8, 0.9, 0)).is_err());
        let mut p = VamanaParams::new(4, 8, 1.2, 0);
        p.max_memory_bytes = 100;
        assert!(matches!(
            build_vamana(v, &p),
            Err(Error::BuildResource { .. })
        ));
        for bad in [
            BeamSearchParams::new(5, 1, 10),
            BeamSearchParams::new(10, 0, 5),
            BeamSearchParams::new(10, 11, 5),
            BeamSearchParams::new(10, 1, 0),
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn strays_are_linked_within_the_degree_bound() {
        let mut g = build_vamana(data(300), &VamanaParams::new(6, 12, 1.2, 2)).unwrap();
        // cut every edge into nodes 5 and 9, and fill all slots so some
        // repairs must go through the replacement path
        for list in g.adjacency.iter_mut() {
            list.retain(|&j| j != 5 && j != 9);
        }
        assert!(reachable_fraction(&g) < 1.0);
        assert!(connect_strays(&mut g, 12, 6) >= 2);
        assert_eq!(reachable_fraction(&g), 1.0);
        for (i, nbrs) in g.adjacency().iter().enumerate() {
            assert!(nbrs.len() <= 6 && !nbrs.contains(&(i as u32)));
            assert_eq!(nbrs.iter().collect::<HashSet<_>>().len(), nbrs.len());
        }

        let mut full = g.clone();
        let n = full.len() as u32;
        for (i, list) in full.adjacency.iter_mut().enumerate() {
            list.retain(|&j| j != 7);
            let mut j = 0;
            while list.len() < 6 {
                if j != i as u32 && j != 7 && !list.contains(&j) {
                    list.push(j);
                }
                j = (j + 1) % n;
            }
        }
        full.adjacency[7].truncate(6);
        connect_strays(&mut full, 12, 6);
        assert_eq!(reachable_fraction(&full), 1.0);
        assert!(full.adjacency().iter().all(|l| l.len() <= 6));
    }

    #[test]
    fn degree_bound_no_self_loops_no_duplicates() {
        let g = build_vamana(data(600), &VamanaParams::new(8, 16, 1.2, 4)).unwrap();
        for (i, nbrs) in g.adjacency().iter().enumerate() {
            assert!(nbrs.len() <= 8);
            assert!(!nbrs.contains(&(i as u32)));
            let set: HashSet<_> = nbrs.iter().collect();
            assert_eq!(set.len(), nbrs.len());
            assert!(nbrs.iter().all(|&j| (j as usize) < 600));
        }
        assert_eq!(reachable_fraction(&g), 1.0);
    }

    #[test]
    fn deterministic_for_seed() {
        let a = build_vamana(data(400), &VamanaParams::new(8, 16, 1.2, 4)).unwrap();
        let b = build_vamana(data(400), &VamanaParams::new(8, 16, 1.2, 4)).unwrap();
        assert_eq!(a.adjacency(), b.adjacency());
        let c = build_vamana(data(400), &VamanaParams::new(8, 16, 1.2, 5)).unwrap();
        assert_ne!(a.adjacency(), c.adjacency());
    }

    #[test]
    fn prune_keeps_closest_and_drops_shadowed() {
        // node 0 at origin-ish; 1 is close, 2 lies behind 1, 3 is off-axis
        let v = VectorSet::from_rows(
            2,
            [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 3.0]],
        )
        .unwrap();
        let out = robust_prune(&v, 0, &mut vec![3, 2, 1, 0, 1], 1.2, 4);
        assert_eq!(out, vec![1, 3]);
        let out = robust_prune(&v, 0, &mut vec![3, 2, 1], 1.0, 1);
        assert_eq!(out, vec![1]);
    }

    #[test]
    fn save_open_checksum_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.vmna");
        let g = build_vamana(data(300), &VamanaParams::new(8, 16, 1.2, 1)).unwrap();
        g.save(&path).unwrap();
        assert_eq!(VamanaGraph::load(&path).unwrap().adjacency(), g.adjacency());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(MmapGraph::open(&path), Err(Error::Version { found: 9, .. })));

        bytes[4] = VERSION as u8;
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(MmapGraph::open(&path), Err(Error::CorruptIndex { .. })));
    }
}
