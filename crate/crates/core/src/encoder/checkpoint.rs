//! Binary checkpoints.
//!
//! Layout (little-endian): magic `b"GCCK"`, version `u32`, seed `u64`, config
//! text length `u32` and `key=value` lines, parameter count `u32`, then per
//! parameter: name length `u32`, name bytes, rank `u32`, dims `u32 × rank`,
//! `f32` payload. Values are stored as `f32`, so parameters that already hold
//! `f32`-representable values round-trip bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GCCK";
pub const VERSION: u32 = 1;

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| schema("truncated checkpoint"))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| schema("non-UTF-8 text in checkpoint"))
    }
}

/// Writes every parameter as a named `f32` blob.
pub fn write_params(w: &mut impl Write, store: &ParamStore) -> std::io::Result<()> {
    put_u32(w, store.len())?;
    for p in store.iter() {
        put_u32(w, p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        let shape = p.value().shape();
        put_u32(w, shape.len())?;
        for &d in shape {
            put_u32(w, d)?;
        }
        for v in p.value().data() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_params(c: &mut Cursor<'_>, store: &mut ParamStore) -> Result<()> {
    let n = c.u32()?;
    if n != store.len() {
        return Err(schema(format!("checkpoint has {n} parameters, model has {}", store.len())));
    }
    for _ in 0..n {
        let name = c.string()?;
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = c
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let id = store
            .id(&name)
            .ok_or_else(|| schema(format!("unknown parameter `{name}`")))?;
        store.set_value(id, Tensor::new(shape, data)?)?;
    }
    Ok(())
}

/// Reads blobs written by [`write_params`] into an existing store with the same names and shapes.
pub fn read_params_into(bytes: &[u8], store: &mut ParamStore) -> Result<()> {
    let mut c = Cursor { buf: bytes, at: 0 };
    read_params(&mut c, store)?;
    if c.at != bytes.len() {
        return Err(schema("trailing bytes after parameters"));
    }
    Ok(())
}

pub fn encode_checkpoint(enc: &Encoder) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&enc.seed.to_le_bytes());
    let text: String = enc
        .config
        .to_pairs()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    put_u32(&mut out, text.len()).unwrap();
    out.extend_from_slice(text.as_bytes());
    write_params(&mut out, &enc.params).unwrap();
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Encoder> {
    let mut c = Cursor { buf: bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(schema("not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(schema(format!("unsupported checkpoint version {version}")));
    }
    let seed = c.u64()?;
    let text = c.string()?;
    let mut config = EncoderConfig::default();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| schema(format!("bad config line `{line}`")))?;
        if !config.set(k, v)? {
            return Err(schema(format!("unknown config key `{k}` in checkpoint")));
        }
    }
    let mut enc = Encoder::new(config, seed)?;
    read_params(&mut c, &mut enc.params)?;
    if c.at != bytes.len() {
        return Err(schema("trailing bytes after checkpoint"));
    }
    Ok(enc)
}

pub fn save_checkpoint(path: &Path, enc: &Encoder) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(enc)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Encoder> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut enc = Encoder::new(EncoderConfig::tiny(9), 42).unwrap();
        enc.params.round_to_f32();
        let bytes = encode_checkpoint(&enc);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, enc.config);
        assert_eq!(back.seed, 42);
        assert_eq!(back.params.fingerprint(), enc.params.fingerprint());
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let enc = Encoder::new(EncoderConfig::tiny(3), 1).unwrap();
        let bytes = encode_checkpoint(&enc);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Schema(_))));
    }
}
