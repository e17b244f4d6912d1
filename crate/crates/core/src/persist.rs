//! Little-endian byte codecs and the tagged-section model container.
//!
//! Container layout: magic `RTFM`, version (u32), section count (u32), then
//! per section a 4-byte tag, payload length (u64) and payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"RTFM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Default, Clone)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a byte slice whose errors carry absolute file offsets.
pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self::with_base(data, 0)
    }

    pub fn with_base(data: &'a [u8], base: u64) -> Self {
        ByteReader { data, pos: 0, base }
    }

    pub fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.offset(),
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.remaining()
                ),
            ));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.offset(), "length overflow"))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.offset(), "length overflow"))?, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn expect_end(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes after {what}", self.remaining()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub payload: Vec<u8>,
    /// Absolute offset of the payload in the file it was read from.
    pub offset: u64,
}

impl Section {
    pub fn new(tag: [u8; 4], payload: Vec<u8>) -> Self {
        Section {
            tag,
            payload,
            offset: 0,
        }
    }

    pub fn reader(&self) -> ByteReader<'_> {
        ByteReader::with_base(&self.payload, self.offset)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub sections: Vec<Section>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(&MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.u32(self.sections.len() as u32);
        for s in &self.sections {
            w.bytes(&s.tag);
            w.u64(s.payload.len() as u64);
            w.bytes(&s.payload);
        }
        w.into_inner()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data);
        let magic = r.take(4, "magic")?;
        if magic != MODEL_MAGIC {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected \"RTFM\"",
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let version = r.u32("version")?;
        if version != MODEL_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported model version {version}, expected {MODEL_VERSION}"),
            ));
        }
        let count = r.u32("section count")?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4, "section tag")?.try_into().unwrap();
            let len = r.u64("section length")?;
            let offset = r.offset();
            let len = usize::try_from(len)
                .map_err(|_| Error::format(offset, "section length overflow"))?;
            let payload = r.take(len, "section payload")?.to_vec();
            sections.push(Section {
                tag,
                payload,
                offset,
            });
        }
        r.expect_end("last section")?;
        Ok(Container { sections })
    }

    pub fn section(&self, tag: &[u8; 4]) -> Result<&Section> {
        self.sections.iter().find(|s| &s.tag == tag).ok_or_else(|| {
            Error::format(
                0,
                format!("missing section {:?}", String::from_utf8_lossy(tag)),
            )
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes to a sibling temporary file and renames it into place, so a
/// failed write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let name = path
        .file_name()
        .ok_or_else(|| Error::Data(format!("not a file path: {}", path.display())))?;
    let tmp_name = format!(".{}.tmp{}", name.to_string_lossy(), std::process::id());
    let tmp = match dir {
        Some(d) => d.join(tmp_name),
        None => tmp_name.into(),
    };
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
