//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "RVCL" | u16 version | u32 json_len | json record
//! | u32 param_count | params... | u32 crc32
//! ```
//!
//! Each parameter: `u32 name_len | name | u8 rank | u32 dims... | f64 data`.
//! The JSON record holds the model name, frozen flag, and [`ArchSpec`]
//! (including any quantization record). The checksum covers everything
//! after the magic. Round trips are bit-identical.

use crate::error::{Error, Result};
use crate::model::{ArchSpec, Model};
use crate::{Params, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"RVCL";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Record {
    name: String,
    frozen: bool,
    arch: ArchSpec,
}

/// Wraps `body` in magic + trailing CRC32 and writes it out.
pub(crate) fn write_envelope(magic: &[u8; 4], body: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(4 + body.len() + 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(body);
    out.extend_from_slice(&crc32fast::hash(body).to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

/// Strips and verifies the magic + CRC32 envelope, returning the body.
pub(crate) fn read_envelope<'a>(magic: &[u8; 4], buf: &'a [u8], kind: &str) -> Result<&'a [u8]> {
    if buf.len() < 10 || &buf[..4] != magic {
        return Err(Error::format(format!("not a {kind} file (bad magic)")));
    }
    let body = &buf[4..buf.len() - 4];
    let stored_crc = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::format(format!("{kind} file checksum mismatch")));
    }
    Ok(body)
}

pub(crate) fn write_tensor(body: &mut Vec<u8>, t: &Tensor) {
    body.push(t.rank() as u8);
    for d in t.shape() {
        body.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        body.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(r.f64()?);
    }
    Tensor::from_vec(shape, data)
}

/// Serializes a model to `path`.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let record = Record {
        name: model.name().to_string(),
        frozen: model.frozen(),
        arch: model.arch().clone(),
    };
    let json = serde_json::to_vec(&record)
        .map_err(|e| Error::format(format!("encoding model record: {e}")))?;

    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(&VERSION.to_le_bytes());
    body.extend_from_slice(&(json.len() as u32).to_le_bytes());
    body.extend_from_slice(&json);
    body.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, p) in model.params() {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        write_tensor(&mut body, p);
    }
    write_envelope(MAGIC, &body, path)
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("file is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::format("string field is not UTF-8"))
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Loads a model saved by [`save_model`], verifying the checksum.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let buf = fs::read(&path)?;
    let body = read_envelope(MAGIC, &buf, "model")?;

    let mut r = Reader::new(body);
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported model version {version}")));
    }
    let json_len = r.u32()? as usize;
    let record: Record = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::format(format!("bad model record: {e}")))?;

    let count = r.u32()? as usize;
    let mut params = Params::new();
    for _ in 0..count {
        let name = r.string()?;
        params.insert(name, read_tensor(&mut r)?);
    }
    if !r.done() {
        return Err(Error::format("trailing bytes after parameters"));
    }
    Ok(Model::from_parts(record.name, record.arch, params, record.frozen))
}
