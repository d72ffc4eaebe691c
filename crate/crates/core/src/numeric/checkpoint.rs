//! Versioned binary parameter file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "RLTRCKPT"
//! version    u32
//! config     u32 length + UTF-8 run-config text
//! count      u32 number of tensors
//! manifest   count × (u16 name length, name, u32 rows, u32 cols)
//! payload    Σ rows·cols f32 values in manifest order
//! crc32      u32 over every preceding byte
//! ```

use std::path::Path;

use super::{Matrix, Parameterized, Real};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RLTRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<TensorRecord>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl Checkpoint {
    /// Captures every tensor of `model`, buffers included, as `f32`.
    pub fn from_model<T: Real, M: Parameterized<T>>(model: &M, config: impl Into<String>) -> Self {
        let tensors = model
            .named_tensors(true)
            .into_iter()
            .map(|(name, m)| TensorRecord {
                name,
                rows: m.rows(),
                cols: m.cols(),
                data: m.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Checkpoint {
            config: config.into(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        }
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 4 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        if &body[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("CRC mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_len = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?
            .to_string();
        let count = r.u32()? as usize;
        // Each manifest entry occupies at least 10 bytes.
        if count > r.remaining() / 10 {
            return Err(Error::Checkpoint(format!("tensor count {count} exceeds file size")));
        }
        let mut manifest = Vec::with_capacity(count);
        let mut total: usize = 0;
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` too large")))?;
            total = total
                .checked_add(n)
                .ok_or_else(|| Error::Checkpoint("payload size overflow".into()))?;
            manifest.push((name, rows, cols, n));
        }
        if total.checked_mul(4) != Some(r.remaining()) {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, manifest requires {} values",
                r.remaining(),
                total
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, rows, cols, n) in manifest {
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(TensorRecord { name, rows, cols, data });
        }
        Ok(Checkpoint { config, tensors })
    }

    /// Copies the stored tensors into `model`; names, order and shapes must
    /// match exactly and every value must be finite.
    pub fn load_into<T: Real, M: Parameterized<T>>(&self, model: &mut M) -> Result<()> {
        let names: Vec<(String, (usize, usize))> = model
            .named_tensors(true)
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        if names.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for ((name, shape), rec) in names.iter().zip(&self.tensors) {
            if *name != rec.name || *shape != (rec.rows, rec.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {}x{} does not match model tensor `{name}` {}x{}",
                    rec.name, rec.rows, rec.cols, shape.0, shape.1
                )));
            }
            if rec.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("tensor `{name}` holds non-finite values")));
            }
        }
        let mut targets = Vec::new();
        model.tensors_mut(true, &mut targets);
        for (dst, rec) in targets.into_iter().zip(&self.tensors) {
            *dst = Matrix::from_vec(rec.rows, rec.cols, rec.data.iter().map(|&v| T::of(v as f64)).collect())?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
