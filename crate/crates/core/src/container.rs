//! Self-describing binary container shared by feature caches, standardization
//! statistics and network checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "OSAC"
//! version      u8       1
//! kind         u8       see `ArtifactKind`
//! fingerprint  u64      hash of the config that produced the artifact
//! meta_len     u32
//! meta         meta_len bytes of UTF-8 (JSON for checkpoints, may be empty)
//! n_tensors    u32
//! per tensor:  dtype u8 (0 = f32, 1 = f64), ndims u8, dims u32 * ndims, values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"OSAC";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Features = 1,
    Stats = 2,
    Checkpoint = 3,
}

impl ArtifactKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Self::Features),
            2 => Ok(Self::Stats),
            3 => Ok(Self::Checkpoint),
            other => Err(Error::CorruptFile(format!("unknown artifact kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl StoredTensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { dtype: DType::F32, shape, data }
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { dtype: DType::F64, shape, data }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ArtifactKind,
    pub fingerprint: u64,
    pub meta: String,
    pub tensors: Vec<StoredTensor>,
}

impl Container {
    pub fn new(kind: ArtifactKind, fingerprint: u64) -> Self {
        Self { kind, fingerprint, meta: String::new(), tensors: Vec::new() }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, self.kind as u8])?;
        w.write_all(&self.fingerprint.to_le_bytes())?;
        let meta = self.meta.as_bytes();
        w.write_all(&len_u32(meta.len())?.to_le_bytes())?;
        w.write_all(meta)?;
        w.write_all(&len_u32(self.tensors.len())?.to_le_bytes())?;
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::Shape(format!("tensor shape {:?} does not match {} values", t.shape, t.data.len())));
            }
            if t.shape.len() > u8::MAX as usize {
                return Err(Error::Shape("too many dimensions".into()));
            }
            let code = match t.dtype {
                DType::F32 => 0u8,
                DType::F64 => 1u8,
            };
            w.write_all(&[code, t.shape.len() as u8])?;
            for &d in &t.shape {
                w.write_all(&len_u32(d)?.to_le_bytes())?;
            }
            match t.dtype {
                DType::F32 => {
                    for &v in &t.data {
                        w.write_all(&(v as f32).to_le_bytes())?;
                    }
                }
                DType::F64 => {
                    for &v in &t.data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CorruptFile("bad magic".into()));
        }
        let mut head = [0u8; 2];
        read_exact(&mut r, &mut head)?;
        if head[0] != VERSION {
            return Err(Error::UnsupportedFormat(format!("container version {}", head[0])));
        }
        let kind = ArtifactKind::from_byte(head[1])?;
        let fingerprint = read_u64(&mut r)?;
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta)?;
        let meta = String::from_utf8(meta).map_err(|_| Error::CorruptFile("metadata is not UTF-8".into()))?;
        let n = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let mut th = [0u8; 2];
            read_exact(&mut r, &mut th)?;
            let dtype = match th[0] {
                0 => DType::F32,
                1 => DType::F64,
                other => return Err(Error::CorruptFile(format!("unknown dtype {other}"))),
            };
            let mut shape = Vec::with_capacity(th[1] as usize);
            for _ in 0..th[1] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let count: usize = shape.iter().product();
            let width = match dtype {
                DType::F32 => 4,
                DType::F64 => 8,
            };
            let mut raw = vec![0u8; count * width];
            read_exact(&mut r, &mut raw)?;
            let data = match dtype {
                DType::F32 => {
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect()
                }
                DType::F64 => {
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect()
                }
            };
            tensors.push(StoredTensor { dtype, shape, data });
        }
        Ok(Self { kind, fingerprint, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        self.write_to(BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_from(BufReader::new(file))
    }

    /// Fails with `PipelineMismatch` unless kind and fingerprint match.
    pub fn expect(&self, kind: ArtifactKind, fingerprint: u64) -> Result<()> {
        if self.kind != kind {
            return Err(Error::PipelineMismatch(format!("expected a {kind:?} artifact, found {:?}", self.kind)));
        }
        if self.fingerprint != fingerprint {
            return Err(Error::PipelineMismatch(format!(
                "artifact fingerprint {:016x} does not match expected {fingerprint:016x}",
                self.fingerprint
            )));
        }
        Ok(())
    }
}

/// First 8 bytes of the SHA-256 digest, little-endian.
pub fn fingerprint_bytes(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidParameter(format!("length {n} exceeds u32")))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::CorruptFile("truncated container".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
