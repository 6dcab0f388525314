//! Little-endian helpers shared by the on-disk formats.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{}: need {n} bytes at offset {}, {} left",
                self.what,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Checks a 4-byte magic followed by a u16 version.
    pub fn header(&mut self, magic: &[u8; 4], version: u16) -> Result<()> {
        let found: [u8; 4] = self.take(4).map_err(|_| Error::BadMagic { expected: *magic, found: [0; 4] })?.try_into().unwrap();
        if &found != magic {
            return Err(Error::BadMagic { expected: *magic, found });
        }
        let v = self.u16()?;
        if v != version {
            return Err(Error::VersionMismatch { expected: version, found: v });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Truncated(format!("{}: length overflow", self.what)))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn string_u16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        self.utf8(n)
    }

    pub fn string_u32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        self.utf8(n)
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        let what = self.what;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Truncated(format!("{what}: invalid UTF-8 ({e})")))
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn header(&mut self, magic: &[u8; 4], version: u16) {
        self.buf.extend_from_slice(magic);
        self.u16(version);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn string_u16(&mut self, s: &str) -> Result<()> {
        let n = u16::try_from(s.len()).map_err(|_| Error::InvalidConfig(format!("string too long: {} bytes", s.len())))?;
        self.u16(n);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    pub fn string_u32(&mut self, s: &str) -> Result<()> {
        let n = u32::try_from(s.len()).map_err(|_| Error::InvalidConfig(format!("string too long: {} bytes", s.len())))?;
        self.u32(n);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
}
