//! Named-tensor checkpoint container (format version 2).
//!
//! ```text
//! "CGFG"  u16 version=2  u32 descriptor_len  descriptor (UTF-8 JSON)
//! u32 tensor_count
//! tensor_count × { u16 name_len  name  u32 ndim  ndim × u32 dim  f32 payload }
//! ```

use std::path::Path;

use crate::bytes::{header, put_f32s, Cursor};
use crate::capture::MAGIC;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BUNDLE_VERSION: u16 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub descriptor: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Bundle {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let desc = serde_json::to_vec(&self.descriptor).map_err(|e| Error::Malformed(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(&desc);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len =
                u16::try_from(nb.len()).map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(buf);
        header(&mut cur, MAGIC, BUNDLE_VERSION)?;
        let dlen = cur.u32("descriptor length")? as usize;
        let descriptor = serde_json::from_slice(cur.take(dlen, "descriptor")?)
            .map_err(|e| Error::Malformed(format!("descriptor: {e}")))?;
        let count = cur.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = cur.u16("name length")? as usize;
            let name = String::from_utf8(cur.take(nlen, "tensor name")?.to_vec())
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
            let ndim = cur.u32("rank")? as usize;
            if ndim > 8 {
                return Err(Error::Malformed(format!("tensor `{name}` has rank {ndim}")));
            }
            let shape = (0..ndim).map(|_| cur.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Malformed(format!("tensor `{name}` too large")))?;
            let data = cur.f32s(numel, &format!("tensor `{name}`"))?;
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if cur.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes", cur.remaining())));
        }
        Ok(Self { descriptor, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
