//! Record container shared by every artifact file.
//!
//! Layout: the magic line `TOKLM1`, one JSON header line, then a stream of
//! binary records. Each record is a little-endian `u32` byte length
//! followed by the payload. Numbers inside payloads are little-endian.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &str = "TOKLM1";

/// Append-only payload builder.
#[derive(Debug, Default, Clone)]
pub struct RecordBuf {
    bytes: Vec<u8>,
}

impl RecordBuf {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn opt_u32s(&mut self, v: Option<&[u32]>) -> &mut Self {
        match v {
            None => self.u32(u32::MAX),
            Some(v) => self.u32s(v),
        }
    }

    pub fn u32s(&mut self, v: &[u32]) -> &mut Self {
        self.u32(v.len() as u32);
        for &x in v {
            self.u32(x);
        }
        self
    }

    pub fn f32s(&mut self, v: &[f32]) -> &mut Self {
        self.u32(v.len() as u32);
        for &x in v {
            self.bytes.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn f64s(&mut self, v: &[f64]) -> &mut Self {
        self.u32(v.len() as u32);
        for &x in v {
            self.bytes.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

/// Cursor over one record's payload. Every read is bounds-checked and
/// reports the record index on failure.
pub struct RecordCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> RecordCursor<'a> {
    pub fn new(bytes: &'a [u8], record: usize) -> Self {
        Self {
            bytes,
            pos: 0,
            record,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(format!("record {}", self.record), msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!(
                "payload truncated: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn len(&mut self, width: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(width) > self.bytes.len() - self.pos {
            return Err(self.err(format!("declared length {n} exceeds payload")));
        }
        Ok(n)
    }

    pub fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.len(4)?;
        (0..n).map(|_| self.u32()).collect()
    }

    pub fn opt_u32s(&mut self) -> Result<Option<Vec<u32>>> {
        let save = self.pos;
        if self.u32()? == u32::MAX {
            return Ok(None);
        }
        self.pos = save;
        self.u32s().map(Some)
    }

    pub fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len(4)?;
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn write_container<H: Serialize>(
    path: &Path,
    header: &H,
    records: impl IntoIterator<Item = RecordBuf>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, header, records)?;
    w.flush()?;
    Ok(())
}

pub fn write_to<W: Write, H: Serialize>(
    w: &mut W,
    header: &H,
    records: impl IntoIterator<Item = RecordBuf>,
) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    serde_json::to_writer(&mut *w, header)?;
    writeln!(w)?;
    for rec in records {
        w.write_all(&(rec.bytes.len() as u32).to_le_bytes())?;
        w.write_all(&rec.bytes)?;
    }
    Ok(())
}

/// Reads the magic line, the header, and all raw record payloads.
pub fn read_container<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<Vec<u8>>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_from(&mut r)
}

pub fn read_from<R: BufRead, H: DeserializeOwned>(r: &mut R) -> Result<(H, Vec<Vec<u8>>)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end_matches('\n') != MAGIC {
        return Err(Error::parse("line 1", format!("expected magic `{MAGIC}`")));
    }
    line.clear();
    if r.read_line(&mut line)? == 0 || !line.ends_with('\n') {
        return Err(Error::parse("line 2", "missing JSON header line"));
    }
    let header: H = serde_json::from_str(&line)
        .map_err(|e| Error::parse("line 2", format!("bad header: {e}")))?;
    let mut records = Vec::new();
    loop {
        let mut len = [0u8; 4];
        let got = read_full(r, &mut len)?;
        if got == 0 {
            break;
        }
        let idx = records.len();
        if got < 4 {
            return Err(Error::parse(
                format!("record {idx}"),
                "truncated length prefix",
            ));
        }
        let n = u32::from_le_bytes(len) as usize;
        let mut buf = vec![0u8; n];
        if read_full(r, &mut buf)? < n {
            return Err(Error::parse(format!("record {idx}"), "truncated payload"));
        }
        records.push(buf);
    }
    Ok((header, records))
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

/// Checks that the header declares `expected` as its `kind` and the
/// record count matches.
pub fn check_kind(kind: &str, expected: &str, declared: usize, found: usize) -> Result<()> {
    if kind != expected {
        return Err(Error::parse(
            "line 2",
            format!("expected a `{expected}` file, found `{kind}`"),
        ));
    }
    if declared != found {
        return Err(Error::parse(
            format!("record {found}"),
            format!("header declares {declared} records, file holds {found}"),
        ));
    }
    Ok(())
}
