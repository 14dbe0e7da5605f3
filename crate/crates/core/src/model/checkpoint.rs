use std::fs;
use std::path::Path;

use crate::error::{Result, SateError};
use crate::nn::ParamStore;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 9] = b"SATECKPT1";

/// Ordered named tensors, serialized as `MAGIC` followed by records of
/// `u32 name length, name, u32 rank, u32 extents…, f32 data…`, all
/// little-endian.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            entries: store
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid")))
                .collect(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Copies every entry into `store`, which must hold exactly the same
    /// names and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.len() != store.len() {
            let missing = store
                .iter()
                .map(|(n, _)| n)
                .find(|n| self.get(n).is_none())
                .or_else(|| self.iter().map(|(n, _)| n).find(|n| store.id(n).is_none()))
                .unwrap_or("?")
                .to_string();
            return Err(SateError::Checkpoint {
                name: missing,
                detail: format!("{} entries for {} parameters", self.len(), store.len()),
            });
        }
        for (name, t) in self.iter() {
            store.assign(name, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, t) in &self.entries {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend((e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| SateError::format("checkpoint", "missing SATECKPT1 header"))?;
        let mut cur = Cursor { buf: body, pos: 0 };
        let mut ck = Checkpoint::new();
        while cur.pos < body.len() {
            let name_len = cur.u32()?;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| SateError::format("checkpoint", "name is not UTF-8"))?
                .to_string();
            let rank = cur.u32()?;
            let shape = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let n = n.and_then(|n| n.checked_mul(4)).ok_or_else(|| SateError::format("checkpoint", "extents overflow"))?;
            let data: Vec<f32> = cur
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| SateError::format("checkpoint", format!("{name}: {e}")))?;
            ck.entries.push((name, t));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| SateError::format("checkpoint", "truncated record"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}
