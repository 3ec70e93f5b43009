//! Binary checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "ECNCKPT\x01"
//! dtype        u8       element width in bytes (4 = f32, 8 = f64)
//! reserved     3 bytes  zero
//! adam step    u64
//! beta1        f64
//! beta2        f64
//! eps          f64
//! meta len     u32, then that many bytes of UTF-8 metadata (free-form, JSON by convention)
//! param count  u32
//! per parameter, in store order:
//!   name len   u32, then UTF-8 name
//!   rank       u32
//!   dims       rank × u64
//!   values     numel × dtype
//!   adam m     numel × dtype
//!   adam v     numel × dtype
//! trailer      8 bytes  "ECNEND\0\0"
//! ```
//!
//! Files are written to a temporary sibling and renamed into place, so a
//! reader never sees a half-written checkpoint.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::adam::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::real::{DType, Real};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ECNCKPT\x01";
const TRAILER: &[u8; 8] = b"ECNEND\0\0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("checkpoint holds {found}-byte floats but {expected} was requested")]
    DType { expected: &'static str, found: u8 },
}

/// Parameters, optimizer state and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
    pub metadata: String,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.params.numel() * 3 * T::DTYPE.width());
        out.extend_from_slice(MAGIC);
        out.push(T::DTYPE.width() as u8);
        out.extend_from_slice(&[0, 0, 0]);
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        let cfg = self.adam.config;
        for x in [cfg.beta1, cfg.beta2, cfg.eps] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        put_str(&mut out, &self.metadata);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (id, name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for source in [t, &self.adam.m[id.index()], &self.adam.v[id.index()]] {
                for &x in source.data() {
                    x.write_le(&mut out);
                }
            }
        }
        out.extend_from_slice(TRAILER);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.fail_at(0, "bad magic"));
        }
        let width = r.take(1)?[0];
        if width as usize != T::DTYPE.width() {
            return Err(CheckpointError::DType {
                expected: T::DTYPE.name(),
                found: width,
            });
        }
        r.take(3)?;
        let step = r.u64()?;
        let config = AdamConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let metadata = r.string()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let name_at = r.at;
            let name = r.string()?;
            if params.id(&name).is_some() {
                return Err(r.fail_at(name_at, format!("duplicate parameter `{name}`")));
            }
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(r.fail(format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| r.fail("dimension overflow"))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.fail("element count overflow"))?;
            let read = |r: &mut Reader| -> Result<Tensor<T>, CheckpointError> {
                let raw = r.take(numel.checked_mul(T::DTYPE.width()).ok_or_else(|| r.fail("size overflow"))?)?;
                let data = raw.chunks_exact(T::DTYPE.width()).map(T::read_le).collect();
                Ok(Tensor::new(shape.clone(), data).expect("length computed from shape"))
            };
            let value = read(&mut r)?;
            m.push(read(&mut r)?);
            v.push(read(&mut r)?);
            params.insert(name, value);
        }
        if r.take(8)? != TRAILER {
            return Err(r.fail_at(r.at - 8, "bad trailer"));
        }
        if r.at != bytes.len() {
            return Err(r.fail("trailing bytes after checkpoint"));
        }
        Ok(Self {
            params,
            adam: AdamState::from_parts(config, step, m, v),
            metadata,
        })
    }

    /// Atomically writes the checkpoint to `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let mut file = std::fs::File::create(&tmp).map_err(io)?;
        file.write_all(&self.to_bytes()).map_err(io)?;
        file.sync_all().map_err(io)?;
        drop(file);
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Reads only the element width byte, to pick the precision before loading.
pub fn peek_dtype(path: &Path) -> Result<DType, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 9 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::Parse {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    match bytes[8] {
        4 => Ok(DType::F32),
        8 => Ok(DType::F64),
        w => Err(CheckpointError::Parse {
            offset: 8,
            reason: format!("unsupported element width {w}"),
        }),
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> CheckpointError {
        self.fail_at(self.at, reason)
    }

    fn fail_at(&self, offset: usize, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Parse {
            offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail(format!(
                "unexpected end of file: needed {n} bytes, {} left",
                self.bytes.len() - self.at
            )));
        };
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let start = self.at;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail_at(start, "invalid UTF-8"))
    }
}
