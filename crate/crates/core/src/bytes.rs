//! Little-endian cursor shared by the binary formats.

use crate::error::{Error, Result};

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Truncated(format!("{what}: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes =
            self.take(n.checked_mul(4).ok_or_else(|| Error::Malformed(format!("{what}: size overflow")))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(data.len() * 4);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Checks the 4-byte magic and the version that follows it.
pub(crate) fn header(cur: &mut Cursor<'_>, magic: [u8; 4], version: u16) -> Result<()> {
    let m: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if m != magic {
        return Err(Error::BadMagic { expected: magic, found: m });
    }
    let v = cur.u16("version")?;
    if v != version {
        return Err(Error::VersionMismatch { expected: version, found: v });
    }
    Ok(())
}
