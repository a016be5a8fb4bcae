//! Binary checkpoint format.
//!
//! ```text
//! "CAFCKPT1"
//! u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
//!             numel x f32 values
//! u32 metadata length, UTF-8 JSON metadata
//! ```
//!
//! All integers and floats are little-endian. Values are stored as `f32`,
//! so a round trip is exact to about 6e-8 relative.

use std::io::Write;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::{ModelMeta, ModelState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CAFCKPT1";

pub fn encode(model: &ModelState) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * model.params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("parameter name `{}` too long", p.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(&model.meta)
        .map_err(|e| Error::Contract(format!("cannot serialise metadata: {e}")))?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated at byte {}: need {n} bytes for {what}, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn fail(&self, at: usize, detail: impl std::fmt::Display) -> Error {
        Error::format(self.path, format!("at byte {at}: {detail}"))
    }
}

/// Parses a checkpoint buffer. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelState> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(r.fail(0, format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for i in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.fail(at, format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.ok_or_else(|| r.fail(at, format!("tensor `{name}`: shape {shape:?} overflows")))?;
        let raw = r.take(numel.checked_mul(4).unwrap_or(usize::MAX), "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.fail(at, format!("tensor `{name}`: {e}")))?;
        params
            .insert(name.clone(), t)
            .map_err(|e| r.fail(at, format!("tensor `{name}`: {e}")))?;
    }
    let at = r.pos;
    let len = r.u32("metadata length")? as usize;
    let meta_bytes = r.take(len, "metadata")?;
    let meta: ModelMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| r.fail(at + 4, format!("bad metadata: {e}")))?;
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ModelState { params, meta })
}

/// Writes `model` to `path` via a temporary file and a rename.
pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
