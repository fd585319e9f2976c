//! Binary checkpoint container.
//!
//! Layout: magic `EVQA`, u32 version, u32 tensor count, then per tensor a
//! u16 name length, the UTF-8 name, a u8 rank, one u32 per dim and the
//! payload as little-endian f64. All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EVQA";
pub const VERSION: u32 = 1;

/// An ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.push(name, Tensor::scalar(v));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format {
                offset: 0,
                reason: format!("missing tensor {name}"),
            })
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.numel() != 1 {
            return Err(Error::Dimension {
                name: name.to_string(),
                expected: vec![],
                found: t.shape().to_vec(),
            });
        }
        Ok(t.item())
    }

    /// Copies the stored values into `dst`, which must have the same shape.
    /// The destination keeps its own `requires_grad` flag.
    pub fn restore_into(&self, name: &str, dst: &mut Tensor) -> Result<()> {
        let src = self.get(name)?;
        if src.shape() != dst.shape() {
            return Err(Error::Dimension {
                name: name.to_string(),
                expected: dst.shape().to_vec(),
                found: src.shape().to_vec(),
            });
        }
        dst.data_mut().copy_from_slice(src.data());
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Contract(format!("rank too large: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Contract(format!("dimension too large: {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format {
                    offset: at + 2,
                    reason: "name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dim")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Format {
                    offset: r.pos,
                    reason: format!("payload size overflow for {name}"),
                })?;
            let data = r
                .take(n, "payload")?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                reason: "trailing bytes".into(),
            });
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
