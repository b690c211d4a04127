//! Flat vector storage and the on-disk vector file.
//!
//! ```text
//! magic "VECF" | version u32 | count u64 | dim u32 | reserved u32
//! count * dim f32, row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use memmap2::Mmap;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VECF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[cfg(target_endian = "big")]
compile_error!("on-disk formats are read by reinterpreting little-endian bytes");

/// Read access to a dense set of equal-length rows.
pub trait VectorSource: Send + Sync {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn row(&self, i: usize) -> &[f32];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VectorHeader {
    pub count: u64,
    pub dim: u32,
}

impl VectorHeader {
    pub fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&VERSION.to_le_bytes());
        b[8..16].copy_from_slice(&self.count.to_le_bytes());
        b[16..20].copy_from_slice(&self.dim.to_le_bytes());
        b
    }

    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || bytes[0..4] != MAGIC {
            return Err(Error::corrupt(path, "missing VECF header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        Ok(Self {
            count: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
            dim: u32::from_le_bytes(bytes[16..20].try_into().unwrap()),
        })
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN as u64 + self.count * self.dim as u64 * 4
    }
}

/// In-memory row-major vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    dim: usize,
    data: Vec<f32>,
}

impl VectorSet {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dim must be positive");
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Dimension {
                expected: dim,
                actual: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: impl IntoIterator<Item = R>) -> Result<Self> {
        let mut set = Self::new(dim);
        for r in rows {
            set.push(r.as_ref())?;
        }
        Ok(set)
    }

    pub fn push(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = VectorHeader {
            count: self.len() as u64,
            dim: self.dim as u32,
        };
        let file = File::create(path).map_err(Error::io(path))?;
        let mut w = BufWriter::new(file);
        w.write_all(&header.to_bytes())
            .and_then(|_| w.write_all(bytemuck::cast_slice(&self.data)))
            .and_then(|_| w.flush())
            .map_err(Error::io(path))?;
        w.get_ref().sync_all().map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(Error::io(path))?;
        let mut head = [0u8; HEADER_LEN];
        file.read_exact(&mut head).map_err(Error::io(path))?;
        let header = VectorHeader::parse(&head, path)?;
        let actual = file.metadata().map_err(Error::io(path))?.len();
        if actual != header.file_len() {
            return Err(Error::corrupt(
                path,
                format!("expected {} bytes, found {actual}", header.file_len()),
            ));
        }
        let mut data = vec![0f32; (header.count * header.dim as u64) as usize];
        file.read_exact(bytemuck::cast_slice_mut(&mut data))
            .map_err(Error::io(path))?;
        Self::from_flat(header.dim as usize, data)
    }
}

impl VectorSource for VectorSet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Memory-mapped vector file; rows are paged in on demand.
#[derive(Debug)]
pub struct MmapVectors {
    header: VectorHeader,
    map: Mmap,
}

impl MmapVectors {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::io(path))?;
        // SAFETY: vector files are written once and never modified in place while served.
        let map = unsafe { Mmap::map(&file) }.map_err(Error::io(path))?;
        let header = VectorHeader::parse(&map, path)?;
        if map.len() as u64 != header.file_len() {
            return Err(Error::corrupt(path, "length does not match header"));
        }
        Ok(Self { header, map })
    }

    pub fn header(&self) -> VectorHeader {
        self.header
    }
}

impl VectorSource for MmapVectors {
    fn dim(&self) -> usize {
        self.header.dim as usize
    }

    fn len(&self) -> usize {
        self.header.count as usize
    }

    #[inline]
    fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        let start = HEADER_LEN + i * d * 4;
        bytemuck::cast_slice(&self.map[start..start + d * 4])
    }
}
