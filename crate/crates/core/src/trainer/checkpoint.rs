use std::fs;
use std::path::Path;

use crate::autodiff::{DenseArray, ParamSet};
use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"FDCK";
pub const VERSION: u32 = 1;

/// Parameters and loop position, stored at 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub step: u64,
    pub epochs_done: u32,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.epochs_done.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, entry) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.learnable as u8);
            let shape = entry.value.shape();
            out.push(shape.len() as u8);
            for &s in shape {
                out.extend_from_slice(&(s as u32).to_le_bytes());
            }
            for &v in entry.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], FormatError> {
            if pos + n > bytes.len() {
                return Err(FormatError::Truncated {
                    offset: pos,
                    needed: pos + n - bytes.len(),
                });
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let magic: [u8; 4] = take(4)?.try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("four bytes"));
        if version != VERSION {
            return Err(FormatError::Version {
                expected: VERSION,
                found: version,
            });
        }
        let config_hash: [u8; 32] = take(32)?.try_into().expect("32 bytes");
        let seed = u64::from_le_bytes(take(8)?.try_into().expect("eight bytes"));
        let step = u64::from_le_bytes(take(8)?.try_into().expect("eight bytes"));
        let epochs_done = u32::from_le_bytes(take(4)?.try_into().expect("four bytes"));
        let n = u32::from_le_bytes(take(4)?.try_into().expect("four bytes"));
        let mut params = ParamSet::new();
        for _ in 0..n {
            let len = u16::from_le_bytes(take(2)?.try_into().expect("two bytes")) as usize;
            let raw = take(len)?;
            let name = std::str::from_utf8(raw)
                .map_err(|e| FormatError::Invalid {
                    offset: 0,
                    reason: e.to_string(),
                })?
                .to_string();
            let head = take(2)?;
            let (learnable, ndim) = (head[0] != 0, head[1] as usize);
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(4)?.try_into().expect("four bytes")) as usize);
            }
            let count: usize = shape.iter().product();
            let raw = take(count * 4)?;
            let mut data = Vec::with_capacity(count);
            for c in raw.chunks_exact(4) {
                let v = f32::from_le_bytes(c.try_into().expect("four bytes"));
                if !v.is_finite() {
                    return Err(FormatError::NonFinite { offset: 0 });
                }
                data.push(v as f64);
            }
            let value = DenseArray::new(shape, data).map_err(|e| FormatError::Invalid {
                offset: 0,
                reason: e.to_string(),
            })?;
            params.insert(name, value, learnable);
        }
        if pos != bytes.len() {
            return Err(FormatError::TrailingBytes {
                offset: pos,
                count: bytes.len() - pos,
            });
        }
        Ok(Self {
            config_hash,
            seed,
            step,
            epochs_done,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|source| Error::Format {
            path: path.to_path_buf(),
            source,
        })
    }
}
