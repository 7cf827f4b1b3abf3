//! Binary checkpoint: `PBCK`, u32 version, u32 config length, config JSON,
//! u64 scalar count, then every stored tensor's f64 values (little-endian)
//! in build order. Shapes are implied by the config.

use std::fs;
use std::path::Path;

use super::{ArchConfig, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    let entries = model.store().entries();
    let total: usize = entries.iter().map(|e| e.value.len()).sum();
    let mut buf = Vec::with_capacity(16 + cfg.len() + 8 * total);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(total as u64).to_le_bytes());
    for e in entries {
        for v in e.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4).ok_or_else(|| bad("truncated header"))? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let cfg_bytes = cur.take(cfg_len).ok_or_else(|| bad("truncated config"))?;
    let cfg: ArchConfig =
        serde_json::from_slice(cfg_bytes).map_err(|e| bad(&format!("config: {e}")))?;
    let mut model = Model::build(&cfg, 0)?;
    let total = cur.u64().ok_or_else(|| bad("truncated payload count"))? as usize;
    let expected: usize = model.store().entries().iter().map(|e| e.value.len()).sum();
    if total != expected {
        return Err(bad(&format!(
            "payload holds {total} values, config needs {expected}"
        )));
    }
    let mut values = Vec::with_capacity(model.store().len());
    for e in model.store().entries() {
        let mut data = Vec::with_capacity(e.value.len());
        for _ in 0..e.value.len() {
            data.push(f64::from_le_bytes(
                cur.take(8)
                    .ok_or_else(|| bad("truncated payload"))?
                    .try_into()
                    .unwrap(),
            ));
        }
        values.push(Tensor::new(e.value.shape().to_vec(), data)?);
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    model.store_mut().load_values(values)?;
    Ok(model)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
