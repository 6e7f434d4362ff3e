//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! b"HTOK" | version u32 | config_len u32 | config key=value text
//! record_count u32
//! per record: name_len u32 | name | rank u32 | dims u32 × rank | f32 × numel
//! ```

use std::fs;
use std::path::Path;

use super::{TokenizerConfig, TokenizerModel};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HTOK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format { offset: out.len(), message: format!("{v} exceeds u32") })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a model; values are stored as f32.
pub fn write_checkpoint<T: Real>(model: &TokenizerModel<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = model.config.to_kv();
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, model.params.len())?;
    for (name, t) in model.params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<V>(&self, message: impl Into<String>) -> Result<V> {
        Err(Error::Format { offset: self.pos, message: message.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let start = self.pos;
        let b = self.take(n, what)?;
        std::str::from_utf8(b).map_err(|_| Error::Format { offset: start, message: format!("{what} is not UTF-8") })
    }
}

/// Parses checkpoint bytes into a model of element type `T`.
pub fn read_checkpoint<T: Real>(bytes: &[u8]) -> Result<TokenizerModel<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        cur.pos = 0;
        return cur.fail("bad magic, expected HTOK");
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        cur.pos -= 4;
        return cur.fail(format!("unsupported version {version}"));
    }
    let len = cur.u32("config length")?;
    let text_at = cur.pos;
    let text = cur.text(len, "config")?;
    let config = TokenizerConfig::from_kv(text).map_err(|e| Error::Format { offset: text_at, message: e.to_string() })?;
    let count = cur.u32("record count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let record_at = cur.pos;
        let n = cur.u32("name length")?;
        let name = cur.text(n, "name")?.to_string();
        let rank = cur.u32("rank")?;
        if rank > 8 {
            return cur.fail(format!("rank {rank} of {name} is implausible"));
        }
        let dims = (0..rank).map(|_| cur.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = match numel {
            Some(n) if n > 0 => n,
            _ => return cur.fail(format!("invalid dimensions {dims:?} for {name}")),
        };
        let payload = cur.take(numel.checked_mul(4).unwrap_or(usize::MAX), "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        params
            .insert(name, data, &dims)
            .map_err(|e| Error::Format { offset: record_at, message: e.to_string() })?;
    }
    if cur.pos != bytes.len() {
        return cur.fail("trailing bytes after last record");
    }
    TokenizerModel::from_params(config, params).map_err(|e| Error::Format { offset: cur.pos, message: e.to_string() })
}

pub fn save_checkpoint<T: Real>(model: &TokenizerModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = write_checkpoint(model)?;
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<TokenizerModel<T>> {
    read_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TokenizerConfig {
        TokenizerConfig {
            image_size: 8,
            patch: 4,
            enc_layers: 1,
            dec_layers: 1,
            enc_width: 8,
            dec_width: 8,
            heads: 2,
            latent_dim: 4,
            scales: vec![1, 2],
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let m = TokenizerModel::<f32>::new(small()).unwrap();
        let bytes = write_checkpoint(&m).unwrap();
        assert_eq!(&bytes[..4], b"HTOK");
        let back = read_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        for ((a, x), (b, y)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a, b);
            assert_eq!(x.shape(), y.shape());
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(write_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let bytes = write_checkpoint(&TokenizerModel::<f32>::new(small()).unwrap()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f32>(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_checkpoint::<f32>(&bad), Err(Error::Format { offset: 4, .. })));
        let cut = &bytes[..bytes.len() - 3];
        match read_checkpoint::<f32>(cut) {
            Err(Error::Format { offset, message }) => {
                assert!(message.contains("truncated"));
                assert!(offset < cut.len());
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_checkpoint::<f32>(&long), Err(Error::Format { .. })));
    }
}
