//! Little-endian binary encoding helpers with byte-offset-aware errors,
//! shared by the volume/velocity file formats and checkpoints.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BinError {
    #[error("truncated input at byte offset {offset}: needed {needed} more bytes for {what}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: &'static str,
    },
    #[error("bad magic at byte offset {offset}: expected {expected:?}")]
    BadMagic { offset: usize, expected: [u8; 4] },
    #[error("unsupported {what} value {value} at byte offset {offset}")]
    Unsupported {
        offset: usize,
        what: &'static str,
        value: u64,
    },
    #[error("invalid utf-8 in {what} at byte offset {offset}")]
    BadUtf8 { offset: usize, what: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type BinResult<T> = Result<T, BinError>;

/// Sequential little-endian writer.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
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

    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Length-prefixed (u32) UTF-8 string.
    pub fn text(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.raw(s.as_bytes());
    }
}

/// Sequential little-endian reader tracking its byte offset.
pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &'static str) -> BinResult<&'a [u8]> {
        if self.remaining() < n {
            return Err(BinError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
                what,
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> BinResult<()> {
        let offset = self.pos;
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(BinError::BadMagic { offset, expected });
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &'static str) -> BinResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &'static str) -> BinResult<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &'static str) -> BinResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &'static str) -> BinResult<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn u128(&mut self, what: &'static str) -> BinResult<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &'static str) -> BinResult<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn text(&mut self, what: &'static str) -> BinResult<String> {
        let len = self.u32(what)? as usize;
        let offset = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| BinError::BadUtf8 { offset, what })
    }
}

/// Atomic file write: temp file in the same directory, then rename.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| std::path::Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "out".into())
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation_offset() {
        let mut w = Writer::new();
        w.raw(b"HNRG");
        w.u16(3);
        w.text("hello");
        w.f64(2.5);
        let bytes = w.bytes();

        let mut r = Reader::new(&bytes);
        r.magic(*b"HNRG").unwrap();
        assert_eq!(r.u16("version").unwrap(), 3);
        assert_eq!(r.text("meta").unwrap(), "hello");
        assert_eq!(r.f64("x").unwrap(), 2.5);

        let mut r2 = Reader::new(&bytes[..7]);
        r2.magic(*b"HNRG").unwrap();
        r2.u16("version").unwrap();
        match r2.u32("len") {
            Err(BinError::Truncated { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut r = Reader::new(b"XXXXrest");
        match r.magic(*b"HNRG") {
            Err(BinError::BadMagic { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected bad magic, got {other:?}"),
        }
    }
}
