//! Inverted-file index with product-quantized residuals.
//!
//! Vectors are assigned to the nearest of `n_lists` k-means centroids. The
//! residual (vector minus centroid) is split into `m` subvectors, each
//! encoded as one byte naming the nearest of 256 codewords. At query time the
//! `n_probe` lists whose centroids have the highest inner product with the
//! query are scanned. A code's reconstruction `x = centroid + decoded` is
//! scored as `<q, x> - (|x|^2 - 1) / 2`, which for a unit query is
//! `1 - |q - x|^2 / 2`: the asymmetric L2 distance expressed as a cosine
//! estimate. It equals `<q, x>` when `x` is exactly unit, and ranks better
//! than the raw inner product when quantization shrinks or stretches `x`.
//! The sum over subspaces uses per-query lookup tables plus one stored
//! `|x|^2` per entry.
//!
//! [`CodeKind::Flat`] stores raw vectors instead of codes. It exists so the
//! IVF routing can be checked against brute force without quantization loss.
//!
//! File layout (little-endian):
//!
//! ```text
//! "IVPQ" | version u32 | N u64 | dim u32 | n_lists u32 | m u32 |
//!   kind u32 (0 = pq, 1 = flat) | train_distortion f64 | seed u64
//! centroids    n_lists * dim f32
//! codebooks    m * 256 * (dim / m) f32        (PQ only)
//! per list:    len u64 | ids len * u64 | codes len * code_size bytes |
//!              sq_norms len * f32             (PQ only)
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::dot;
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, nearest, KMeansParams};
use crate::vectors::VectorSource;

pub const MAGIC: [u8; 4] = *b"IVPQ";
pub const VERSION: u32 = 1;
pub const CODEWORDS: usize = 256;
const MAX_TRAIN: usize = 100_000;

/// `4 * sqrt(N)` rounded to a power of two, clamped to `[16, 65536]` and to `N`.
pub fn default_n_lists(n: usize) -> usize {
    let target = 4.0 * (n as f64).sqrt();
    let pow = 2f64.powf(target.max(1.0).log2().round()) as usize;
    pow.clamp(16, 65536).min(n.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeKind {
    Pq,
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IvfPqParams {
    pub n_lists: usize,
    pub m: usize,
    pub seed: u64,
    pub kind: CodeKind,
}

impl IvfPqParams {
    pub fn new(n_lists: usize, m: usize, seed: u64) -> Self {
        Self {
            n_lists,
            m,
            seed,
            kind: CodeKind::Pq,
        }
    }

    pub fn flat(n_lists: usize, seed: u64) -> Self {
        Self {
            n_lists,
            m: 0,
            seed,
            kind: CodeKind::Flat,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseQuantizer {
    pub dim: usize,
    pub centroids: Vec<f32>,
    /// Training inertia of the coarse k-means.
    pub inertia: f64,
}

impl CoarseQuantizer {
    pub fn n_lists(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, list: usize) -> &[f32] {
        &self.centroids[list * self.dim..(list + 1) * self.dim]
    }

    pub fn assign(&self, v: &[f32]) -> usize {
        nearest(v, &self.centroids, self.dim).0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    pub m: usize,
    pub sub_dim: usize,
    /// `m * 256 * sub_dim`.
    pub codebooks: Vec<f32>,
    /// Mean squared residual reconstruction error over the training set.
    pub train_distortion: f64,
}

impl PqCodebook {
    fn codeword(&self, sub: usize, code: u8) -> &[f32] {
        let start = (sub * CODEWORDS + code as usize) * self.sub_dim;
        &self.codebooks[start..start + self.sub_dim]
    }

    fn sub_table(&self, sub: usize) -> &[f32] {
        let start = sub * CODEWORDS * self.sub_dim;
        &self.codebooks[start..start + CODEWORDS * self.sub_dim]
    }

    pub fn encode(&self, residual: &[f32], out: &mut [u8]) {
        for (s, code) in out.iter_mut().enumerate().take(self.m) {
            let sub = &residual[s * self.sub_dim..(s + 1) * self.sub_dim];
            *code = nearest(sub, self.sub_table(s), self.sub_dim).0 as u8;
        }
    }

    pub fn decode(&self, code: &[u8]) -> Vec<f32> {
        code.iter()
            .enumerate()
            .flat_map(|(s, &c)| self.codeword(s, c).iter().copied())
            .collect()
    }

    /// `m x 256` inner products between query subvectors and codewords.
    pub fn lookup_table(&self, query: &[f32]) -> Vec<f32> {
        let mut table = Vec::with_capacity(self.m * CODEWORDS);
        for s in 0..self.m {
            let q = &query[s * self.sub_dim..(s + 1) * self.sub_dim];
            table.extend(self.sub_table(s).chunks_exact(self.sub_dim).map(|c| dot(q, c)));
        }
        table
    }
}

fn training_sample(vectors: &dyn VectorSource, seed: u64) -> Vec<f32> {
    let n = vectors.len();
    let rows: Vec<usize> = if n <= MAX_TRAIN {
        (0..n).collect()
    } else {
        let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), n, MAX_TRAIN).into_vec();
        idx.sort_unstable();
        idx
    };
    rows.iter().flat_map(|&i| vectors.row(i).iter().copied()).collect()
}

/// Trains the coarse quantizer, and for PQ the residual codebooks.
pub fn train_ivfpq(
    vectors: &dyn VectorSource,
    params: &IvfPqParams,
) -> Result<(CoarseQuantizer, Option<PqCodebook>)> {
    let (n, dim) = (vectors.len(), vectors.dim());
    if params.n_lists == 0 || n < params.n_lists {
        return Err(Error::Config(format!(
            "need N >= n_lists >= 1 (N={n}, n_lists={})",
            params.n_lists
        )));
    }
    if params.kind == CodeKind::Pq {
        if params.m == 0 || dim % params.m != 0 {
            return Err(Error::Config(format!(
                "dim {dim} is not divisible by m={}",
                params.m
            )));
        }
        if n < CODEWORDS {
            return Err(Error::Config(format!(
                "PQ training needs at least {CODEWORDS} vectors, got {n}"
            )));
        }
    }
    let data = training_sample(vectors, params.seed);
    let coarse = kmeans(&data, dim, &KMeansParams::new(params.n_lists, params.seed))?;
    let quantizer = CoarseQuantizer {
        dim,
        centroids: coarse.centroids.clone(),
        inertia: coarse.inertia,
    };
    if params.kind == CodeKind::Flat {
        return Ok((quantizer, None));
    }

    let rows = data.len() / dim;
    let mut residuals = data;
    for (i, &a) in coarse.assignments.iter().enumerate() {
        for (r, c) in residuals[i * dim..(i + 1) * dim].iter_mut().zip(coarse.centroid(a as usize)) {
            *r -= c;
        }
    }
    let sub_dim = dim / params.m;
    let subspaces: Vec<Vec<f32>> = (0..params.m)
        .into_par_iter()
        .map(|s| {
            let sub: Vec<f32> = (0..rows)
                .flat_map(|i| residuals[i * dim + s * sub_dim..i * dim + (s + 1) * sub_dim].iter().copied())
                .collect();
            let seed = params.seed.wrapping_add(1 + s as u64);
            kmeans(&sub, sub_dim, &KMeansParams::new(CODEWORDS, seed)).map(|km| km.centroids)
        })
        .collect::<Result<_>>()?;
    let mut codebook = PqCodebook {
        m: params.m,
        sub_dim,
        codebooks: subspaces.concat(),
        train_distortion: 0.0,
    };
    let mut code = vec![0u8; params.m];
    let mut total = 0f64;
    for r in residuals.chunks_exact(dim) {
        codebook.encode(r, &mut code);
        let rec = codebook.decode(&code);
        total += r.iter().zip(&rec).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
    }
    codebook.train_distortion = total / rows as f64;
    Ok((quantizer, Some(codebook)))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InvertedList {
    pub ids: Vec<u64>,
    pub codes: Vec<u8>,
    /// `|reconstruction|^2` per entry; empty in flat mode.
    pub sq_norms: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct IvfPqIndex {
    quantizer: CoarseQuantizer,
    codebook: Option<PqCodebook>,
    lists: Vec<InvertedList>,
    /// chunk id -> (list, position)
    locations: HashMap<u64, (u32, u32)>,
    seed: u64,
}

impl IvfPqIndex {
    pub fn new(quantizer: CoarseQuantizer, codebook: Option<PqCodebook>, seed: u64) -> Self {
        let lists = vec![InvertedList::default(); quantizer.n_lists()];
        Self {
            quantizer,
            codebook,
            lists,
            locations: HashMap::new(),
            seed,
        }
    }

    /// Trains on `vectors` and adds every row with its row number as id.
    pub fn build(vectors: &dyn VectorSource, params: &IvfPqParams) -> Result<Self> {
        let (q, cb) = train_ivfpq(vectors, params)?;
        let mut index = Self::new(q, cb, params.seed);
        let assigned: Vec<(usize, Vec<u8>)> = (0..vectors.len())
            .into_par_iter()
            .map(|i| index.encode_vector(vectors.row(i)))
            .collect();
        for (i, (list, code)) in assigned.into_iter().enumerate() {
            index.insert(i as u64, list, &code)?;
        }
        Ok(index)
    }

    pub fn dim(&self) -> usize {
        self.quantizer.dim
    }

    pub fn n_lists(&self) -> usize {
        self.lists.len()
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn kind(&self) -> CodeKind {
        if self.codebook.is_some() {
            CodeKind::Pq
        } else {
            CodeKind::Flat
        }
    }

    pub fn m(&self) -> usize {
        self.codebook.as_ref().map_or(0, |c| c.m)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn quantizer(&self) -> &CoarseQuantizer {
        &self.quantizer
    }

    pub fn codebook(&self) -> Option<&PqCodebook> {
        self.codebook.as_ref()
    }

    pub fn lists(&self) -> &[InvertedList] {
        &self.lists
    }

    fn code_size(&self) -> usize {
        match &self.codebook {
            Some(cb) => cb.m,
            None => self.dim() * 4,
        }
    }

    fn encode_vector(&self, v: &[f32]) -> (usize, Vec<u8>) {
        let list = self.quantizer.assign(v);
        let code = match &self.codebook {
            Some(cb) => {
                let residual: Vec<f32> =
                    v.iter().zip(self.quantizer.centroid(list)).map(|(a, b)| a - b).collect();
                let mut code = vec![0u8; cb.m];
                cb.encode(&residual, &mut code);
                code
            }
            None => bytemuck::cast_slice(v).to_vec(),
        };
        (list, code)
    }

    fn insert(&mut self, id: u64, list: usize, code: &[u8]) -> Result<()> {
        if self.locations.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        if let Some(cb) = &self.codebook {
            let c = self.quantizer.centroid(list);
            let x: Vec<f32> = cb.decode(code).iter().zip(c).map(|(r, c)| r + c).collect();
            self.lists[list].sq_norms.push(dot(&x, &x));
        }
        let l = &mut self.lists[list];
        self.locations.insert(id, (list as u32, l.ids.len() as u32));
        l.ids.push(id);
        l.codes.extend_from_slice(code);
        Ok(())
    }

    pub fn add(&mut self, id: u64, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: vector.len(),
            });
        }
        if self.locations.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        let (list, code) = self.encode_vector(vector);
        self.insert(id, list, &code)
    }

    fn code_at(&self, list: usize, pos: usize) -> &[u8] {
        let cs = self.code_size();
        &self.lists[list].codes[pos * cs..(pos + 1) * cs]
    }

    /// The vector the index actually holds for `id`: centroid plus decoded
    /// residual, or the raw vector in flat mode.
    pub fn reconstruct(&self, id: u64) -> Option<Vec<f32>> {
        let &(list, pos) = self.locations.get(&id)?;
        let code = self.code_at(list as usize, pos as usize);
        Some(match &self.codebook {
            Some(cb) => cb
                .decode(code)
                .iter()
                .zip(self.quantizer.centroid(list as usize))
                .map(|(r, c)| r + c)
                .collect(),
            None => bytemuck::pod_collect_to_vec(code),
        })
    }

    /// Lists to probe: highest `<q, centroid>` first, ties by list index.
    pub fn probe_order(&self, query: &[f32], n_probe: usize) -> Vec<(usize, f32)> {
        let mut scored: Vec<(usize, f32)> = self
            .quantizer
            .centroids
            .chunks_exact(self.dim())
            .map(|c| dot(query, c))
            .enumerate()
            .collect();
        let by_score = |a: &(usize, f32), b: &(usize, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if n_probe < scored.len() {
            scored.select_nth_unstable_by(n_probe, by_score);
            scored.truncate(n_probe);
        }
        scored.sort_by(by_score);
        scored
    }

    /// Smallest probe count `>= n_probe` whose lists hold at least `want`
    /// entries (or every entry, if fewer exist).
    pub fn probes_to_fill(&self, query: &[f32], n_probe: usize, want: usize) -> usize {
        let want = want.min(self.len());
        let order = self.probe_order(query, self.n_lists());
        let mut scanned = 0;
        for (i, (list, _)) in order.iter().enumerate() {
            scanned += self.lists[*list].ids.len();
            if i + 1 >= n_probe && scanned >= want {
                return i + 1;
            }
        }
        self.n_lists()
    }

    /// Top-`k` `(id, approximate score)` pairs, descending, ties by id.
    pub fn search(&self, query: &[f32], k: usize, n_probe: usize) -> Result<Vec<(u64, f32)>> {
        if query.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: query.len(),
            });
        }
        if k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if n_probe == 0 || n_probe > self.n_lists() {
            return Err(Error::Config(format!(
                "n_probe must be in [1, {}], got {n_probe}",
                self.n_lists()
            )));
        }
        let table = self.codebook.as_ref().map(|cb| cb.lookup_table(query));
        let mut hits: Vec<(u64, f32)> = Vec::new();
        for (list, base) in self.probe_order(query, n_probe) {
            let l = &self.lists[list];
            match (&self.codebook, &table) {
                (Some(cb), Some(table)) => {
                    for ((id, code), &sq) in l.ids.iter().zip(l.codes.chunks_exact(cb.m)).zip(&l.sq_norms) {
                        let ip = code
                            .iter()
                            .enumerate()
                            .fold(base, |s, (sub, &c)| s + table[sub * CODEWORDS + c as usize]);
                        hits.push((*id, corrected(ip, sq)));
                    }
                }
                _ => {
                    let cs = self.dim() * 4;
                    for (id, code) in l.ids.iter().zip(l.codes.chunks_exact(cs)) {
                        let v: Vec<f32> = bytemuck::pod_collect_to_vec(code);
                        hits.push((*id, dot(query, &v)));
                    }
                }
            }
        }
        Ok(crate::top_k(hits, k))
    }

    /// Table-lookup score of one stored id, as used inside [`search`](Self::search).
    pub fn adc_score(&self, query: &[f32], id: u64) -> Option<f32> {
        let &(list, pos) = self.locations.get(&id)?;
        let code = self.code_at(list as usize, pos as usize);
        let base = dot(query, self.quantizer.centroid(list as usize));
        Some(match &self.codebook {
            Some(cb) => {
                let table = cb.lookup_table(query);
                let ip = code
                    .iter()
                    .enumerate()
                    .fold(base, |s, (sub, &c)| s + table[sub * CODEWORDS + c as usize]);
                corrected(ip, self.lists[list as usize].sq_norms[pos as usize])
            }
            None => dot(query, &bytemuck::pod_collect_to_vec::<u8, f32>(code)),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(Error::io(path))?;
        let mut w = BufWriter::new(file);
        let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            w.write_all(&MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(self.len() as u64).to_le_bytes())?;
            w.write_all(&(self.dim() as u32).to_le_bytes())?;
            w.write_all(&(self.n_lists() as u32).to_le_bytes())?;
            w.write_all(&(self.m() as u32).to_le_bytes())?;
            w.write_all(&(self.kind() as u32).to_le_bytes())?;
            let distortion = self.codebook.as_ref().map_or(0.0, |c| c.train_distortion);
            w.write_all(&distortion.to_le_bytes())?;
            w.write_all(&self.seed.to_le_bytes())?;
            w.write_all(bytemuck::cast_slice(&self.quantizer.centroids))?;
            if let Some(cb) = &self.codebook {
                w.write_all(bytemuck::cast_slice(&cb.codebooks))?;
            }
            for l in &self.lists {
                w.write_all(&(l.ids.len() as u64).to_le_bytes())?;
                w.write_all(bytemuck::cast_slice(&l.ids))?;
                w.write_all(&l.codes)?;
                w.write_all(bytemuck::cast_slice(&l.sq_norms))?;
            }
            w.flush()?;
            w.get_ref().sync_all()
        };
        write(&mut w).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::corrupt(path, "missing IVPQ magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let n = r.u64()?;
        let dim = r.u32()? as usize;
        let n_lists = r.u32()? as usize;
        let m = r.u32()? as usize;
        let kind = match r.u32()? {
            0 => CodeKind::Pq,
            1 => CodeKind::Flat,
            other => return Err(Error::corrupt(path, format!("unknown code kind {other}"))),
        };
        let train_distortion = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let seed = r.u64()?;
        if dim == 0 || n_lists == 0 || (kind == CodeKind::Pq && (m == 0 || dim % m != 0)) {
            return Err(Error::corrupt(path, "inconsistent header"));
        }
        let centroids = r.f32s(n_lists * dim)?;
        let codebook = match kind {
            CodeKind::Pq => Some(PqCodebook {
                m,
                sub_dim: dim / m,
                codebooks: r.f32s(m * CODEWORDS * (dim / m))?,
                train_distortion,
            }),
            CodeKind::Flat => None,
        };
        let quantizer = CoarseQuantizer {
            dim,
            centroids,
            inertia: f64::NAN,
        };
        let mut index = Self::new(quantizer, codebook, seed);
        let cs = index.code_size();
        for list in 0..n_lists {
            let len = r.u64()? as usize;
            let ids: Vec<u64> = bytemuck::pod_collect_to_vec(r.take(len * 8)?);
            let codes = r.take(len * cs)?;
            let sq_norms = match kind {
                CodeKind::Pq => r.f32s(len)?,
                CodeKind::Flat => Vec::new(),
            };
            for (pos, id) in ids.iter().enumerate() {
                if index.locations.insert(*id, (list as u32, pos as u32)).is_some() {
                    return Err(Error::corrupt(path, format!("id {id} appears twice")));
                }
            }
            index.lists[list] = InvertedList {
                ids,
                codes: codes.to_vec(),
                sq_norms,
            };
        }
        if r.pos != bytes.len() || index.len() as u64 != n {
            return Err(Error::corrupt(path, "list contents do not match header"));
        }
        Ok(index)
    }
}

/// `<q, x> - (|x|^2 - 1) / 2`, see the module docs.
fn corrected(ip: f32, sq_norm: f32) -> f32 {
    ip - 0.5 * (sq_norm - 1.0)
}

/// The PQ search score computed directly from a reconstructed vector.
pub fn reconstruction_score(query: &[f32], x: &[f32]) -> f32 {
    corrected(dot(query, x), dot(x, x))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::corrupt(self.path, "truncated file"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(bytemuck::pod_collect_to_vec(self.take(n * 4)?))
    }
}
