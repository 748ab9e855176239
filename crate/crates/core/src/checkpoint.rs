//! Binary model container: magic, format version, model configuration as
//! `key = value` text, then named float32 parameter records.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Muse};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MUSECKPT";
pub const VERSION: u32 = 1;

/// Configuration keys stored in a checkpoint.
const MODEL_KEYS: usize = 15;

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn model_text(cfg: &ModelConfig) -> String {
    let run = RunConfig {
        model: cfg.clone(),
        ..RunConfig::default()
    };
    RunConfig::KEYS[..MODEL_KEYS]
        .iter()
        .map(|k| format!("{k} = {}\n", run.get(k).expect("model key")))
        .collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| ck(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(cfg: &ModelConfig, store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = model_text(cfg);
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, store.len())?;
    for (name, t) in store.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.ndim())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ck(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes"))).map_err(|_| ck(format!("{what} too large")))
    }
}

/// Decoded container contents, before being matched against a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(ck("bad magic; not a model checkpoint"));
    }
    let version = c.u32("version")?;
    if version != VERSION as usize {
        return Err(ck(format!("unsupported format version {version} (expected {VERSION})")));
    }
    let text_len = c.u32("config length")?;
    let text = std::str::from_utf8(c.take(text_len, "config")?).map_err(|_| ck("config block is not UTF-8"))?;
    let config = RunConfig::parse(text)?.model;
    let count = c.u32("parameter count")?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = c.u32("name length")?;
        let name = String::from_utf8(c.take(n, "name")?.to_vec()).map_err(|_| ck("parameter name is not UTF-8"))?;
        let ndim = c.u32("ndim")?;
        let shape = (0..ndim).map(|_| c.u64("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| ck("shape overflow"))?;
        let raw = c.take(numel.checked_mul(4).ok_or_else(|| ck("shape overflow"))?, &name)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(ck(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(Checkpoint { config, params })
}

impl Checkpoint {
    /// Builds the model described by the stored configuration and fills in
    /// the stored parameters, which must match it exactly.
    pub fn into_model(self) -> Result<(Muse, ParamStore)> {
        let (model, mut store) = Muse::new(self.config, 0)?;
        if self.params.len() != store.len() {
            return Err(ck(format!("{} parameters stored, model has {}", self.params.len(), store.len())));
        }
        for (name, t) in self.params {
            let slot = store.by_name_mut(&name).ok_or_else(|| ck(format!("unknown parameter `{name}`")))?;
            if slot.shape() != t.shape() {
                return Err(ck(format!("`{name}`: stored shape {:?}, model expects {:?}", t.shape(), slot.shape())));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok((model, store))
    }
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let bytes = encode_checkpoint(cfg, store)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Muse, ParamStore)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_config_and_f32_values() {
        let cfg = ModelConfig::micro();
        let (_, store) = Muse::new(cfg.clone(), 3).unwrap();
        let bytes = encode_checkpoint(&cfg, &store).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let (model, loaded) = decode_checkpoint(&bytes).unwrap().into_model().unwrap();
        assert_eq!(model.cfg, cfg);
        for ((n1, a), (n2, b)) in store.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
        assert_eq!(encode_checkpoint(&cfg, &loaded).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_containers() {
        let cfg = ModelConfig::micro();
        let (_, store) = Muse::new(cfg.clone(), 3).unwrap();
        let bytes = encode_checkpoint(&cfg, &store).unwrap();
        let mut v2 = bytes.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(decode_checkpoint(&v2).unwrap_err().to_string().contains("version 2"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
