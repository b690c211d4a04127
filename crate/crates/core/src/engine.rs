//! The query pipeline over loaded artifacts: encode, ANN, optional exact
//! rerank, optional MMR, hydrate.

use std::borrow::Cow;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::api::{
    resolve, Bounds, CacheReport, Hit, Mode, RequestDefaults, ResolvedParams, SearchRequest,
    SearchResponse, Timings, BOUNDS,
};
use crate::corpus::ChunkStore;
use crate::embed::{dot, encoder_from_descriptor, Encoder, EncoderDescriptor, EncoderRole};
use crate::error::{Error, Result};
use crate::graph::{beam_search, BeamSearchParams, GraphView, MmapGraph};
use crate::ivfpq::{CodeKind, IvfPqIndex};
use crate::rerank::{
    exact_rerank, mmr_select, ranked, CacheStats, RerankCache, ScoredHit, Stage,
    DEFAULT_CACHE_CAPACITY,
};
use crate::vectors::{MmapVectors, VectorSource};
use crate::top_k;

fn default_cache_capacity() -> usize {
    DEFAULT_CACHE_CAPACITY
}

/// Artifact paths and encoders for one engine. At least one index is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// Chunk store directory.
    pub store: PathBuf,
    #[serde(default)]
    pub graph: Option<PathBuf>,
    #[serde(default)]
    pub ivfpq: Option<PathBuf>,
    /// Retrieval vectors; used for MMR when no graph is loaded.
    #[serde(default)]
    pub vectors: Option<PathBuf>,
    pub encoder: EncoderDescriptor,
    /// Defaults to the retrieval encoder.
    #[serde(default)]
    pub rerank_encoder: Option<EncoderDescriptor>,
    #[serde(default = "default_cache_capacity")]
    pub cache_capacity: usize,
    #[serde(default)]
    pub defaults: RequestDefaults,
}

impl EngineConfig {
    pub fn new(store: impl Into<PathBuf>, encoder: EncoderDescriptor) -> Self {
        Self {
            store: store.into(),
            graph: None,
            ivfpq: None,
            vectors: None,
            encoder,
            rerank_encoder: None,
            cache_capacity: DEFAULT_CACHE_CAPACITY,
            defaults: RequestDefaults::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphInfo {
    pub path: PathBuf,
    pub n: usize,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "L_build")]
    pub l_build: usize,
    pub alpha: f32,
    pub seed: u64,
    pub entry_point: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvfPqInfo {
    pub path: PathBuf,
    pub n: usize,
    pub n_lists: usize,
    pub m: usize,
    pub kind: CodeKind,
    pub seed: u64,
}

/// Static description of a loaded engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineInfo {
    pub corpus_size: u64,
    pub dim: usize,
    pub modes: Vec<Mode>,
    pub graph: Option<GraphInfo>,
    pub ivfpq: Option<IvfPqInfo>,
    pub encoder: EncoderDescriptor,
    pub rerank_encoder: EncoderDescriptor,
    pub defaults: RequestDefaults,
    pub bounds: Bounds,
}

pub struct Engine {
    store: ChunkStore,
    graph: Option<MmapGraph>,
    ivfpq: Option<(PathBuf, IvfPqIndex)>,
    vectors: Option<MmapVectors>,
    encoder: Arc<dyn Encoder>,
    reranker: Arc<dyn Encoder>,
    cache: RerankCache,
    defaults: RequestDefaults,
}

fn check_rows(artifact: &'static str, rows: usize, dim: usize, n: u64, want_dim: usize) -> Result<()> {
    let err = |msg: String| Error::artifact(artifact)(Error::Config(msg));
    if rows as u64 != n {
        return Err(err(format!("has {rows} rows but the chunk store has {n} chunks")));
    }
    if dim != want_dim {
        return Err(err(format!("has dim {dim} but the retrieval encoder has dim {want_dim}")));
    }
    Ok(())
}

fn elapsed_ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

impl Engine {
    /// Opens every configured artifact, failing on the first one that is
    /// missing, corrupt, or inconsistent with the others.
    pub fn open(config: &EngineConfig) -> Result<Self> {
        let encoder = encoder_from_descriptor(&config.encoder).map_err(Error::artifact("encoder"))?;
        let rerank_desc = config.rerank_encoder.clone().unwrap_or_else(|| EncoderDescriptor {
            role: EncoderRole::Rerank,
            ..config.encoder.clone()
        });
        let reranker =
            encoder_from_descriptor(&rerank_desc).map_err(Error::artifact("rerank encoder"))?;
        Self::with_encoders(config, encoder, reranker)
    }

    /// Like [`open`](Self::open) with caller-supplied encoders.
    pub fn with_encoders(
        config: &EngineConfig,
        encoder: Arc<dyn Encoder>,
        reranker: Arc<dyn Encoder>,
    ) -> Result<Self> {
        if config.graph.is_none() && config.ivfpq.is_none() {
            return Err(Error::Config("no index configured: need graph, ivfpq, or both".into()));
        }
        let store = ChunkStore::open(&config.store).map_err(Error::artifact("chunk store"))?;
        let (n, dim) = (store.len(), encoder.descriptor().dim);
        let graph = match &config.graph {
            Some(p) => {
                let g = MmapGraph::open(p).map_err(Error::artifact("graph index"))?;
                check_rows("graph index", g.len(), g.dim(), n, dim)?;
                Some(g)
            }
            None => None,
        };
        let ivfpq = match &config.ivfpq {
            Some(p) => {
                let idx = IvfPqIndex::load(p).map_err(Error::artifact("ivfpq index"))?;
                check_rows("ivfpq index", idx.len(), idx.dim(), n, dim)?;
                if let Some(id) = (0..n).find(|&id| idx.reconstruct(id).is_none()) {
                    return Err(Error::artifact("ivfpq index")(Error::Config(format!(
                        "chunk {id} is not indexed"
                    ))));
                }
                Some((p.clone(), idx))
            }
            None => None,
        };
        let vectors = match &config.vectors {
            Some(p) => {
                let v = MmapVectors::open(p).map_err(Error::artifact("vector file"))?;
                check_rows("vector file", v.len(), v.dim(), n, dim)?;
                Some(v)
            }
            None => None,
        };
        Ok(Self {
            store,
            graph,
            ivfpq,
            vectors,
            encoder,
            reranker,
            cache: RerankCache::new(config.cache_capacity),
            defaults: config.defaults,
        })
    }

    pub fn store(&self) -> &ChunkStore {
        &self.store
    }

    pub fn defaults(&self) -> &RequestDefaults {
        &self.defaults
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    pub fn modes(&self) -> Vec<Mode> {
        let mut modes = Vec::new();
        if self.graph.is_some() {
            modes.push(Mode::Graph);
        }
        if self.ivfpq.is_some() {
            modes.push(Mode::Ivfpq);
        }
        modes
    }

    pub fn info(&self) -> EngineInfo {
        EngineInfo {
            corpus_size: self.store.len(),
            dim: self.encoder.descriptor().dim,
            modes: self.modes(),
            graph: self.graph.as_ref().map(|g| {
                let p = g.params();
                GraphInfo {
                    path: g.path().to_path_buf(),
                    n: g.len(),
                    r: p.r,
                    l_build: p.l_build,
                    alpha: p.alpha,
                    seed: p.seed,
                    entry_point: g.entry_point(),
                }
            }),
            ivfpq: self.ivfpq.as_ref().map(|(path, idx)| IvfPqInfo {
                path: path.clone(),
                n: idx.len(),
                n_lists: idx.n_lists(),
                m: idx.m(),
                kind: idx.kind(),
                seed: idx.seed(),
            }),
            encoder: self.encoder.descriptor().clone(),
            rerank_encoder: self.reranker.descriptor().clone(),
            defaults: self.defaults,
            bounds: BOUNDS,
        }
    }

    /// Retrieval vector for MMR: graph record, then vector file, then the
    /// IVFPQ reconstruction.
    fn retrieval_vector(&self, id: u64) -> Cow<'_, [f32]> {
        if let Some(g) = &self.graph {
            return Cow::Borrowed(g.vector(id as u32));
        }
        if let Some(v) = &self.vectors {
            return Cow::Borrowed(v.row(id as usize));
        }
        let (_, idx) = self.ivfpq.as_ref().expect("an index is always loaded");
        Cow::Owned(idx.reconstruct(id).expect("every chunk is indexed"))
    }

    pub fn search(&self, request: &SearchRequest) -> Result<SearchResponse> {
        let start = Instant::now();
        let (mut params, mut warnings) =
            resolve(request, &self.defaults).map_err(Error::InvalidRequest)?;
        let n = self.store.len() as usize;
        let want = params.k.min(n);
        let ann_k = if params.exact || params.diverse {
            params.big_k
        } else {
            params.k
        }
        .min(n);

        let query = self.encoder.encode_one(&request.query)?;
        let q = query.as_slice();
        let ann = self.ann(q, ann_k, &mut params, &mut warnings)?;
        let ann_ms = elapsed_ms(start);

        let mut degraded = false;
        let mut cache = CacheReport::default();
        let mut hits: Vec<ScoredHit> = ranked(ann.iter().copied(), Stage::Ann);
        let mut exact_ms = 0.0;
        if params.exact {
            let t = Instant::now();
            let keep = if params.diverse { ann.len() } else { want };
            match exact_rerank(&request.query, &ann, keep.max(1), &*self.reranker, &self.cache, &self.store) {
                Ok(out) => {
                    cache = CacheReport {
                        hits: out.cache_hits,
                        misses: out.cache_misses,
                    };
                    hits = out.hits;
                }
                Err(Error::RerankUnavailable { reason, fallback }) => {
                    tracing::warn!(%reason, "exact rerank unavailable, returning ANN order");
                    warnings.push(format!("exact rerank unavailable: {reason}"));
                    degraded = true;
                    hits = fallback;
                }
                Err(e) => return Err(e),
            }
            exact_ms = elapsed_ms(t);
        }

        let mut mmr_ms = 0.0;
        if params.diverse && !hits.is_empty() {
            let t = Instant::now();
            let owned: Vec<(u64, Cow<'_, [f32]>)> = hits
                .iter()
                .map(|h| (h.chunk_id, self.retrieval_vector(h.chunk_id)))
                .collect();
            let pool: Vec<(u64, &[f32])> = owned.iter().map(|(id, v)| (*id, v.as_ref())).collect();
            hits = mmr_select(q, &pool, want, params.lambda)?;
            mmr_ms = elapsed_ms(t);
        }
        hits.truncate(want);

        let hits = hits
            .into_iter()
            .map(|h| {
                let chunk = self.store.lookup(h.chunk_id)?;
                Ok(Hit {
                    rank: h.rank,
                    chunk_id: h.chunk_id,
                    doc_id: chunk.doc_id,
                    source: chunk.source,
                    text: chunk.text,
                    score: h.score,
                    stage: h.stage,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SearchResponse {
            query_id: uuid::Uuid::new_v4().simple().to_string(),
            hits,
            timings: Timings {
                ann_ms,
                exact_ms,
                mmr_ms,
                total_ms: elapsed_ms(start),
            },
            cache,
            warnings,
            degraded,
            params,
        })
    }

    /// Runs the selected index, widening L or n_probe when needed to produce
    /// `ann_k` candidates and recording the effective values in `params`.
    fn ann(
        &self,
        q: &[f32],
        ann_k: usize,
        params: &mut ResolvedParams,
        warnings: &mut Vec<String>,
    ) -> Result<Vec<(u64, f32)>> {
        match params.mode {
            Mode::Graph => {
                let g = self.graph.as_ref().ok_or(Error::ModeUnavailable(Mode::Graph))?;
                let (l, w) = (params.l.expect("graph params"), params.w.expect("graph params"));
                if ann_k >= g.len() {
                    // the pool is the whole corpus; a traversal could miss
                    // nodes the graph does not reach
                    let all = (0..g.len() as u32).map(|id| (id as u64, dot(q, g.vector(id)))).collect();
                    return Ok(top_k(all, ann_k));
                }
                let l_eff = l.max(ann_k);
                if l_eff != l {
                    warnings.push(format!("L raised from {l} to {l_eff} to return {ann_k} candidates"));
                    params.l = Some(l_eff);
                }
                beam_search(g, q, &BeamSearchParams::new(l_eff, w, ann_k))
            }
            Mode::Ivfpq => {
                let (_, idx) = self.ivfpq.as_ref().ok_or(Error::ModeUnavailable(Mode::Ivfpq))?;
                let asked = params.n_probe.expect("ivfpq params");
                let mut n_probe = asked.min(idx.n_lists());
                if n_probe != asked {
                    warnings.push(format!("n_probe clamped to n_lists = {n_probe}"));
                }
                let filled = idx.probes_to_fill(q, n_probe, ann_k);
                if filled != n_probe {
                    warnings.push(format!(
                        "n_probe raised from {n_probe} to {filled} to return {ann_k} candidates"
                    ));
                    n_probe = filled;
                }
                params.n_probe = Some(n_probe);
                idx.search(q, ann_k, n_probe)
            }
        }
    }
}
