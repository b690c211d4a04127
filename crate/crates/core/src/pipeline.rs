//! Resumable batch embedding of a chunk store into a vector file.
//!
//! The output file is allocated at full size up front and row `i` always
//! holds chunk `i`. A manifest next to it (`<out>.manifest.json`) records how
//! many leading batches are durable; a rerun continues from there, so an
//! interrupted job ends with the same bytes as an uninterrupted one.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::ChunkStore;
use crate::embed::Encoder;
use crate::error::{Error, Result};
use crate::graph::{build_vamana, reachable_fraction, VamanaParams};
use crate::ivfpq::{IvfPqIndex, IvfPqParams};
use crate::vectors::{VectorHeader, VectorSet, HEADER_LEN};

pub const DEFAULT_BATCH: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedOptions {
    pub batch_size: usize,
    /// Stop after this many batches in this run, leaving the job resumable.
    pub stop_after: Option<usize>,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: u64,
    pub dim: usize,
    pub batch_size: usize,
    pub encoder: String,
    pub completed_batches: usize,
}

impl Manifest {
    pub fn total_batches(&self) -> usize {
        (self.count as usize).div_ceil(self.batch_size)
    }

    pub fn is_complete(&self) -> bool {
        self.completed_batches == self.total_batches()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedReport {
    pub total_batches: usize,
    /// Batches already done before this run.
    pub resumed_from: usize,
    pub encoded_batches: usize,
    pub complete: bool,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn read_manifest(path: &Path) -> Result<Option<Manifest>> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path)(e)),
    }
}

fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let mut f = File::create(&tmp).map_err(Error::io(&tmp))?;
    f.write_all(&serde_json::to_vec_pretty(m)?)
        .and_then(|_| f.sync_all())
        .map_err(Error::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(Error::io(path))
}

/// Opens an existing partial output, refusing it if its shape differs from
/// what this run would produce.
fn check_existing(out: &Path, expected: &Manifest) -> Result<()> {
    let mut head = [0u8; HEADER_LEN];
    File::open(out)
        .and_then(|mut f| f.read_exact(&mut head))
        .map_err(Error::io(out))?;
    let header = VectorHeader::parse(&head, out)?;
    if header.dim as usize != expected.dim {
        return Err(Error::Dimension {
            expected: expected.dim,
            actual: header.dim as usize,
        });
    }
    if header.count != expected.count {
        return Err(Error::Config(format!(
            "{} holds {} rows but the store has {} chunks",
            out.display(),
            header.count,
            expected.count
        )));
    }
    Ok(())
}

/// Encodes every chunk of `store` into the vector file `out`, resuming a
/// previous partial run when one is found.
pub fn embed_store(
    store: &ChunkStore,
    encoder: &dyn Encoder,
    out: &Path,
    options: &EmbedOptions,
) -> Result<EmbedReport> {
    if options.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let dim = encoder.descriptor().dim;
    let fresh = Manifest {
        count: store.len(),
        dim,
        batch_size: options.batch_size,
        encoder: encoder.descriptor().name.clone(),
        completed_batches: 0,
    };
    let mpath = manifest_path(out);
    let manifest = match read_manifest(&mpath)? {
        Some(m) => {
            if m.dim != dim {
                return Err(Error::Dimension {
                    expected: m.dim,
                    actual: dim,
                });
            }
            if (m.count, m.batch_size, &m.encoder) != (fresh.count, fresh.batch_size, &fresh.encoder) {
                return Err(Error::Config(format!(
                    "{} was started with a different store, batch size, or encoder; delete it to start over",
                    mpath.display()
                )));
            }
            check_existing(out, &m)?;
            m
        }
        None if out.exists() => {
            check_existing(out, &fresh)?;
            return Err(Error::Config(format!(
                "{} exists without a manifest; refusing to overwrite",
                out.display()
            )));
        }
        None => {
            let header = VectorHeader {
                count: fresh.count,
                dim: dim as u32,
            };
            let mut f = File::create(out).map_err(Error::io(out))?;
            f.write_all(&header.to_bytes())
                .and_then(|_| f.set_len(header.file_len()))
                .and_then(|_| f.sync_all())
                .map_err(Error::io(out))?;
            write_manifest(&mpath, &fresh)?;
            fresh
        }
    };

    let total = manifest.total_batches();
    let resumed_from = manifest.completed_batches;
    let mut report = EmbedReport {
        total_batches: total,
        resumed_from,
        encoded_batches: 0,
        complete: manifest.is_complete(),
    };
    if report.complete {
        return Ok(report);
    }
    let mut file = OpenOptions::new().write(true).open(out).map_err(Error::io(out))?;
    let mut manifest = manifest;
    let n = store.len();
    let row_bytes = (dim * 4) as u64;
    for batch in resumed_from..total {
        if options.stop_after.is_some_and(|s| report.encoded_batches >= s) {
            break;
        }
        let lo = (batch * manifest.batch_size) as u64;
        let hi = (lo + manifest.batch_size as u64).min(n);
        let texts = (lo..hi)
            .map(|id| store.lookup(id).map(|c| c.text))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let vectors = encoder.encode(&refs)?;
        let mut buf: Vec<u8> = Vec::with_capacity(refs.len() * row_bytes as usize);
        for v in &vectors {
            if v.dim() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: v.dim(),
                });
            }
            buf.extend_from_slice(bytemuck::cast_slice(v.as_slice()));
        }
        file.seek(SeekFrom::Start(HEADER_LEN as u64 + lo * row_bytes))
            .and_then(|_| file.write_all(&buf))
            .and_then(|_| file.sync_data())
            .map_err(Error::io(out))?;
        manifest.completed_batches = batch + 1;
        write_manifest(&mpath, &manifest)?;
        report.encoded_batches += 1;
        tracing::info!(batch = batch + 1, total, rows = hi, "embedded batch");
    }
    report.complete = manifest.is_complete();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphBuildReport {
    pub n: usize,
    pub max_degree: usize,
    pub reachable: f64,
}

/// Builds a graph index from a vector file and writes it to `out`.
pub fn build_graph_file(vectors: &Path, params: &VamanaParams, out: &Path) -> Result<GraphBuildReport> {
    let data = VectorSet::read(vectors)?;
    let graph = build_vamana(data, params)?;
    graph.save(out)?;
    Ok(GraphBuildReport {
        n: graph.adjacency().len(),
        max_degree: graph.max_degree(),
        reachable: reachable_fraction(&graph),
    })
}

/// Trains and fills an IVFPQ index from a vector file and writes it to `out`.
pub fn build_ivfpq_file(vectors: &Path, params: &IvfPqParams, out: &Path) -> Result<IvfPqIndex> {
    let data = crate::vectors::MmapVectors::open(vectors)?;
    let index = IvfPqIndex::build(&data, params)?;
    index.save(out)?;
    Ok(index)
}
