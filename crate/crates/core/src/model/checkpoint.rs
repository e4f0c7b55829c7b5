//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "HITC" | u32 version | u32 config_len | canonical JSON config
//! u32 param_count
//! repeated: u32 name_len | name | u32 rank | rank x u32 extent | f64 values
//! ```

use std::io::Write;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{HitError, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HITC";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ModelConfig {
    /// JSON with object keys in sorted order.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(HitError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl<T: Scalar> Model<T> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = self.cfg.to_canonical_json();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (name, t) in self.store.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(HitError::Checkpoint("missing HITC magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(HitError::Checkpoint(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = r.u32()? as usize;
        let cfg: ModelConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| HitError::Checkpoint(format!("config: {e}")))?;
        cfg.validate()?;
        let mut model = Self::build(&cfg, 0)?;
        let count = r.u32()? as usize;
        if count != model.store.len() {
            return Err(HitError::Checkpoint(format!(
                "{count} parameter tensors stored, config defines {}",
                model.store.len()
            )));
        }
        for i in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| HitError::Checkpoint("parameter name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let id = crate::nn::ParamId(i);
            let slot = model.store.get(id);
            if model.store.name(id) != name || slot.shape() != shape.as_slice() {
                return Err(HitError::Checkpoint(format!(
                    "parameter {i}: stored {name} {shape:?}, expected {} {:?}",
                    model.store.name(id),
                    slot.shape()
                )));
            }
            let n = slot.numel();
            let raw = r.take(8 * n)?;
            let dst = model.store.get_mut(id).data_mut();
            for (d, b) in dst.iter_mut().zip(raw.chunks_exact(8)) {
                *d = T::c(f64::from_le_bytes(b.try_into().unwrap()));
            }
        }
        if r.at != buf.len() {
            return Err(HitError::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}
