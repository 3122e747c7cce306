//! Little-endian binary helpers shared by the archive and checkpoint formats.

use crate::error::{Error, Result};

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.f32(*v);
        }
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    /// Checks magic and version and positions the reader after them.
    pub fn open(buf: &'a [u8], kind: &'static str, version: u32) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, kind };
        let magic = r.take(4)?;
        if magic != kind.as_bytes() {
            return Err(r.error_at(0, format!("bad magic {magic:?}, expected {kind}")));
        }
        let v = r.u32()?;
        if v != version {
            return Err(r.error_at(4, format!("unsupported {kind} version {v}, expected {version}")));
        }
        Ok(r)
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn error_at(&self, offset: usize, message: String) -> Error {
        Error::Format { kind: self.kind, offset: offset as u64, message }
    }

    pub fn error(&self, message: String) -> Error {
        self.error_at(self.pos, message)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            self.error(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.error(format!("length {n} overflows")))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<&'a str> {
        let at = self.pos;
        let b = self.bytes()?;
        std::str::from_utf8(b).map_err(|e| self.error_at(at, format!("invalid utf-8: {e}")))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.error(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let mut w = Writer::new(b"TEST", 3);
        w.u32(7);
        w.f32s(&[1.5, -2.0]);
        w.str("hi");
        let mut r = Reader::open(&w.buf, "TEST", 3).unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.f32s(2).unwrap(), vec![1.5, -2.0]);
        assert_eq!(r.str().unwrap(), "hi");
        r.finish().unwrap();

        let cut = &w.buf[..w.buf.len() - 1];
        let mut r = Reader::open(cut, "TEST", 3).unwrap();
        r.u32().unwrap();
        r.f32s(2).unwrap();
        let err = r.str().unwrap_err().to_string();
        assert!(err.contains("offset 24"), "{err}");
        assert!(Reader::open(&w.buf, "TEST", 4).is_err());
        assert!(Reader::open(&w.buf, "NOPE", 3).err().unwrap().to_string().contains("NOPE"));
    }
}
