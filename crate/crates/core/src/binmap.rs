//! Self-describing binary maps and the record container that holds them.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "TGDP" | version: u16 | { len: u32 | payload[len] | crc32(payload): u32 }*
//! ```
//!
//! A payload is a map of named fields:
//!
//! ```text
//! count: u32 | { name_len: u16 | name | tag: u8 | body }*
//! tag 0  string      len: u32 | utf-8 bytes
//! tag 1  u32 list    n: u32 | n x u32
//! tag 2  f32 array   rank: u32 | rank x u32 dims | prod(dims) x f32 (row-major)
//! tag 3  i64 scalar  8 bytes
//! ```
//!
//! Shards, checkpoints and embedding exports all use this container.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TGDP";
pub const FORMAT_VERSION: u16 = 1;

const TAG_STR: u8 = 0;
const TAG_U32: u8 = 1;
const TAG_F32: u8 = 2;
const TAG_I64: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Str(String),
    U32List(Vec<u32>),
    F32Array { shape: Vec<usize>, data: Vec<f32> },
    I64(i64),
}

/// Named fields, serialized in sorted key order so equal maps encode to equal bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BinMap {
    fields: BTreeMap<String, Value>,
}

impl BinMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Value) {
        self.fields.insert(name.into(), value);
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.insert(
            name,
            Value::F32Array {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.fields.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Value> {
        self.fields.remove(name)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.fields.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.fields.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn str(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Value::Str(s)) => Ok(s),
            Some(_) => Err(Error::Format(format!("field `{name}` is not a string"))),
            None => Err(Error::Format(format!("missing field `{name}`"))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        match self.get(name) {
            Some(Value::U32List(v)) => Ok(v),
            Some(_) => Err(Error::Format(format!("field `{name}` is not a u32 list"))),
            None => Err(Error::Format(format!("missing field `{name}`"))),
        }
    }

    pub fn f32s(&self, name: &str) -> Result<(&[usize], &[f32])> {
        match self.get(name) {
            Some(Value::F32Array { shape, data }) => Ok((shape, data)),
            Some(_) => Err(Error::Format(format!("field `{name}` is not an f32 array"))),
            None => Err(Error::Format(format!("missing field `{name}`"))),
        }
    }

    pub fn i64(&self, name: &str) -> Result<i64> {
        match self.get(name) {
            Some(Value::I64(v)) => Ok(*v),
            Some(_) => Err(Error::Format(format!("field `{name}` is not an i64"))),
            None => Err(Error::Format(format!("missing field `{name}`"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.fields.len() as u32).to_le_bytes());
        for (name, value) in &self.fields {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match value {
                Value::Str(s) => {
                    out.push(TAG_STR);
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
                Value::U32List(v) => {
                    out.push(TAG_U32);
                    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Value::F32Array { shape, data } => {
                    out.push(TAG_F32);
                    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                    for d in shape {
                        out.extend_from_slice(&(*d as u32).to_le_bytes());
                    }
                    out.reserve(data.len() * 4);
                    for x in data {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Value::I64(v) => {
                    out.push(TAG_I64);
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        let count = cur.u32()? as usize;
        let mut fields = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Format("field name is not utf-8".into()))?
                .to_string();
            let value = match cur.u8()? {
                TAG_STR => {
                    let n = cur.u32()? as usize;
                    let s = std::str::from_utf8(cur.take(n)?)
                        .map_err(|_| Error::Format(format!("field `{name}` is not utf-8")))?;
                    Value::Str(s.to_string())
                }
                TAG_U32 => {
                    let n = cur.u32()? as usize;
                    let raw = cur.take(n.checked_mul(4).ok_or_else(overflow)?)?;
                    Value::U32List(
                        raw.chunks_exact(4)
                            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                TAG_F32 => {
                    let rank = cur.u32()? as usize;
                    let mut shape = Vec::with_capacity(rank);
                    for _ in 0..rank {
                        shape.push(cur.u32()? as usize);
                    }
                    let n = shape
                        .iter()
                        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                        .ok_or_else(overflow)?;
                    let raw = cur.take(n.checked_mul(4).ok_or_else(overflow)?)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Value::F32Array { shape, data }
                }
                TAG_I64 => Value::I64(i64::from_le_bytes(cur.take(8)?.try_into().unwrap())),
                tag => return Err(Error::Format(format!("field `{name}`: unknown tag {tag}"))),
            };
            fields.insert(name, value);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after map",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { fields })
    }
}

fn overflow() -> Error {
    Error::Format("field size overflows".into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("map payload ends early".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub struct RecordWriter<W: Write> {
    inner: W,
    records: usize,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(mut inner: W) -> io::Result<Self> {
        inner.write_all(MAGIC)?;
        inner.write_all(&FORMAT_VERSION.to_le_bytes())?;
        Ok(Self { inner, records: 0 })
    }

    pub fn write_payload(&mut self, payload: &[u8]) -> io::Result<()> {
        let len = u32::try_from(payload.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "record exceeds 4 GiB"))?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(payload)?;
        self.inner
            .write_all(&crc32fast::hash(payload).to_le_bytes())?;
        self.records += 1;
        Ok(())
    }

    pub fn write_map(&mut self, map: &BinMap) -> io::Result<()> {
        self.write_payload(&map.encode())
    }

    pub fn records(&self) -> usize {
        self.records
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// One step of a container scan.
#[derive(Debug)]
pub enum RecordEvent {
    Payload(Vec<u8>),
    /// The stored CRC does not match; the record was skipped.
    ChecksumMismatch { index: usize },
}

pub struct RecordReader<R: Read> {
    inner: R,
    index: usize,
    done: bool,
}

impl<R: Read> RecordReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut header = [0u8; 6];
        inner
            .read_exact(&mut header)
            .map_err(|_| Error::Format("container shorter than its header".into()))?;
        if &header[..4] != MAGIC {
            return Err(Error::Format("bad magic bytes (expected TGDP)".into()));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        Ok(Self {
            inner,
            index: 0,
            done: false,
        })
    }

    fn read_full(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        Ok(filled)
    }

    fn next_event(&mut self) -> Result<Option<RecordEvent>> {
        let mut len = [0u8; 4];
        let got = self
            .read_full(&mut len)
            .map_err(|e| Error::Data(e.to_string()))?;
        if got == 0 {
            return Ok(None);
        }
        let truncated = |index| Error::Data(format!("record {index}: container is truncated"));
        if got < 4 {
            return Err(truncated(self.index));
        }
        let len = u32::from_le_bytes(len) as usize;
        let mut payload = vec![0u8; len];
        if self
            .read_full(&mut payload)
            .map_err(|e| Error::Data(e.to_string()))?
            < len
        {
            return Err(truncated(self.index));
        }
        let mut crc = [0u8; 4];
        if self
            .read_full(&mut crc)
            .map_err(|e| Error::Data(e.to_string()))?
            < 4
        {
            return Err(truncated(self.index));
        }
        let index = self.index;
        self.index += 1;
        if crc32fast::hash(&payload) != u32::from_le_bytes(crc) {
            return Ok(Some(RecordEvent::ChecksumMismatch { index }));
        }
        Ok(Some(RecordEvent::Payload(payload)))
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<RecordEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_event() {
            Ok(Some(ev)) => Some(Ok(ev)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Write a single map as a one-record container file.
pub fn write_single(path: &std::path::Path, map: &BinMap) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = RecordWriter::new(io::BufWriter::new(file)).map_err(|e| Error::io(path, e))?;
    w.write_map(map).map_err(|e| Error::io(path, e))?;
    w.finish().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a one-record container file.
pub fn read_single(path: &std::path::Path) -> Result<BinMap> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = RecordReader::new(io::BufReader::new(file))?;
    match reader.next() {
        Some(Ok(RecordEvent::Payload(p))) => BinMap::decode(&p),
        Some(Ok(RecordEvent::ChecksumMismatch { .. })) => Err(Error::Data(format!(
            "{}: checksum mismatch",
            path.display()
        ))),
        Some(Err(e)) => Err(e),
        None => Err(Error::Data(format!("{}: no records", path.display()))),
    }
}
