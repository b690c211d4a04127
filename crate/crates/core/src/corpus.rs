//! Document ingestion, whitespace-window chunking, and the on-disk chunk store.
//!
//! A store is a directory holding three files:
//!
//! ```text
//! chunks.bin       repeated [len: u32 LE][len bytes of UTF-8 JSON Chunk]
//! chunks.off       one u64 LE byte offset into chunks.bin per chunk
//! chunks.meta.json {"format_version", "count", "window_tokens", "overlap_tokens"}
//! ```
//!
//! Chunk ids are dense, 0-based, and assigned in encounter order so that
//! index rows and chunk ids coincide.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};

pub const PAYLOAD_FILE: &str = "chunks.bin";
pub const OFFSETS_FILE: &str = "chunks.off";
pub const META_FILE: &str = "chunks.meta.json";
pub const FORMAT_VERSION: u32 = 1;

/// One input document, as read from a JSON-lines corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: u64,
    pub doc_id: String,
    pub text: String,
    pub source: String,
    /// Half-open `(start, end)` offsets, counted in Unicode scalar values,
    /// into the source document's text.
    pub char_span: (u64, u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub window_tokens: usize,
    pub overlap_tokens: usize,
    /// Abort on malformed records instead of skipping them.
    pub strict: bool,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            window_tokens: 256,
            overlap_tokens: 32,
            strict: false,
        }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_tokens == 0 {
            return Err(Error::Config("window_tokens must be >= 1".into()));
        }
        if self.overlap_tokens >= self.window_tokens {
            return Err(Error::Config(format!(
                "overlap_tokens ({}) must be < window_tokens ({})",
                self.overlap_tokens, self.window_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub format_version: u32,
    pub count: u64,
    pub window_tokens: usize,
    pub overlap_tokens: usize,
}

/// Whitespace tokens of `text` as half-open char-offset spans.
fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut pos = 0;
    for (i, c) in text.chars().enumerate() {
        pos = i + 1;
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, pos));
    }
    spans
}

/// Token windows `[start, end)` covering `n_tokens` tokens.
pub fn windows(n_tokens: usize, config: &ChunkingConfig) -> Vec<(usize, usize)> {
    let stride = config.window_tokens - config.overlap_tokens;
    let mut out = Vec::new();
    let mut start = 0;
    while start < n_tokens {
        let end = (start + config.window_tokens).min(n_tokens);
        out.push((start, end));
        if end == n_tokens {
            break;
        }
        start += stride;
    }
    out
}

/// Split one document into chunks whose ids start at `next_id`.
pub fn chunk_document(doc: &Document, config: &ChunkingConfig, next_id: u64) -> Vec<Chunk> {
    let spans = token_spans(&doc.text);
    if spans.is_empty() {
        return Vec::new();
    }
    // char offset -> byte offset, with one extra entry for end-of-text
    let byte_at: Vec<usize> = doc
        .text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(doc.text.len()))
        .collect();
    windows(spans.len(), config)
        .into_iter()
        .enumerate()
        .map(|(i, (first, last))| {
            let start = spans[first].0;
            let end = spans[last - 1].1;
            Chunk {
                id: next_id + i as u64,
                doc_id: doc.doc_id.clone(),
                text: doc.text[byte_at[start]..byte_at[end]].to_string(),
                source: doc.source.clone(),
                char_span: (start as u64, end as u64),
            }
        })
        .collect()
}

/// Reads a JSON-lines corpus. Each item carries its 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<impl Iterator<Item = Result<Document>>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let path = path.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| {
            let line_no = i + 1;
            match line {
                Err(e) => Some(Err(Error::Io {
                    path: path.clone(),
                    source: e,
                })),
                Ok(l) if l.trim().is_empty() => None,
                Ok(l) => Some(serde_json::from_str::<Document>(&l).map_err(|e| {
                    Error::MalformedRecord {
                        line: line_no,
                        reason: e.to_string(),
                    }
                })),
            }
        }))
}

/// Chunk every document and persist the store under `dir`.
///
/// Malformed records (parse failures, documents without any tokens) are
/// skipped with a warning unless `config.strict` is set. I/O errors always
/// abort.
pub fn ingest<I>(documents: I, config: &ChunkingConfig, dir: &Path) -> Result<ChunkStore>
where
    I: IntoIterator<Item = Result<Document>>,
{
    config.validate()?;
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let payload_path = dir.join(PAYLOAD_FILE);
    let offsets_path = dir.join(OFFSETS_FILE);
    let mut payload = BufWriter::new(File::create(&payload_path).map_err(Error::io(&payload_path))?);
    let mut offsets = BufWriter::new(File::create(&offsets_path).map_err(Error::io(&offsets_path))?);

    let mut next_id = 0u64;
    let mut byte_pos = 0u64;
    for (n, doc) in documents.into_iter().enumerate() {
        let doc = match doc {
            Ok(d) => d,
            Err(e @ Error::Io { .. }) => return Err(e),
            Err(e) if config.strict => return Err(e),
            Err(e) => {
                warn!("skipping record: {e}");
                continue;
            }
        };
        let chunks = chunk_document(&doc, config, next_id);
        if chunks.is_empty() {
            let err = Error::MalformedRecord {
                line: n + 1,
                reason: format!("document {:?} has no tokens", doc.doc_id),
            };
            if config.strict {
                return Err(err);
            }
            warn!("skipping record: {err}");
            continue;
        }
        for chunk in &chunks {
            let json = serde_json::to_vec(chunk)?;
            let len = u32::try_from(json.len())
                .map_err(|_| Error::Config(format!("chunk {} exceeds 4 GiB", chunk.id)))?;
            offsets
                .write_all(&byte_pos.to_le_bytes())
                .map_err(Error::io(&offsets_path))?;
            payload
                .write_all(&len.to_le_bytes())
                .and_then(|_| payload.write_all(&json))
                .map_err(Error::io(&payload_path))?;
            byte_pos += 4 + json.len() as u64;
        }
        next_id += chunks.len() as u64;
    }
    if next_id == 0 {
        return Err(Error::EmptyCorpus);
    }
    payload
        .into_inner()
        .map_err(|e| e.into_error())
        .and_then(|f| f.sync_all())
        .map_err(Error::io(&payload_path))?;
    offsets
        .into_inner()
        .map_err(|e| e.into_error())
        .and_then(|f| f.sync_all())
        .map_err(Error::io(&offsets_path))?;

    let meta = StoreMeta {
        format_version: FORMAT_VERSION,
        count: next_id,
        window_tokens: config.window_tokens,
        overlap_tokens: config.overlap_tokens,
    };
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(Error::io(&meta_path))?;
    ChunkStore::open(dir)
}

/// A read-only, persisted chunk store. Cheap to share across threads.
#[derive(Debug)]
pub struct ChunkStore {
    dir: PathBuf,
    meta: StoreMeta,
    offsets: Vec<u64>,
    payload: Mmap,
}

impl ChunkStore {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: StoreMeta =
            serde_json::from_slice(&fs::read(&meta_path).map_err(Error::io(&meta_path))?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                path: meta_path,
                found: meta.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let offsets_path = dir.join(OFFSETS_FILE);
        let raw = fs::read(&offsets_path).map_err(Error::io(&offsets_path))?;
        if raw.len() as u64 != meta.count * 8 {
            return Err(Error::corrupt(
                &offsets_path,
                format!("expected {} offsets, file holds {} bytes", meta.count, raw.len()),
            ));
        }
        let offsets: Vec<u64> = raw
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::corrupt(&offsets_path, "offsets not strictly increasing"));
        }
        let payload_path = dir.join(PAYLOAD_FILE);
        let file = File::open(&payload_path).map_err(Error::io(&payload_path))?;
        // SAFETY: the store is immutable once written; nothing truncates it while open.
        let payload = unsafe { Mmap::map(&file) }.map_err(Error::io(&payload_path))?;
        if let Some(&last) = offsets.last() {
            if last + 4 > payload.len() as u64 {
                return Err(Error::corrupt(&payload_path, "offset past end of payload"));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
            offsets,
            payload,
        })
    }

    pub fn len(&self) -> u64 {
        self.meta.count
    }

    pub fn is_empty(&self) -> bool {
        self.meta.count == 0
    }

    pub fn meta(&self) -> &StoreMeta {
        &self.meta
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record(&self, id: u64) -> Result<&[u8]> {
        let Some(&off) = self.offsets.get(id as usize) else {
            return Err(Error::NotFound {
                id,
                size: self.meta.count,
            });
        };
        let off = off as usize;
        let bad = || Error::corrupt(self.dir.join(PAYLOAD_FILE), format!("bad record {id}"));
        let len_bytes = self.payload.get(off..off + 4).ok_or_else(bad)?;
        let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        self.payload.get(off + 4..off + 4 + len).ok_or_else(bad)
    }

    pub fn lookup(&self, id: u64) -> Result<Chunk> {
        Ok(serde_json::from_slice(self.record(id)?)?)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Chunk>> + '_ {
        (0..self.len()).map(|id| self.lookup(id))
    }
}
