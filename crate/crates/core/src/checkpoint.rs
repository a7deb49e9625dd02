//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! magic `GLIED1`; `u32` config length and config record; `u32` entry count;
//! entries sorted by name. An entry is a kind byte (0 tensor, 1 alias), a
//! `u32`-prefixed name, then either `u32` rank, `u64` dims and `f64`
//! payload, or a `u32`-prefixed alias target.

use std::path::Path;

use glied_tensor::{ParamStore, Tensor};

use crate::config::{AblationFlags, ModelConfig};
use crate::error::{CoreError, Result};
use crate::model::GliedModel;

pub const MAGIC: &[u8; 6] = b"GLIED1";

const TENSOR: u8 = 0;
const ALIAS: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| CoreError::Contract(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn config_record(c: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [c.vocab_size, c.d_e, c.d_h, c.d_r, c.d_f, c.heads] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&c.dropout.to_le_bytes());
    out.extend_from_slice(&(c.max_len as u64).to_le_bytes());
    let f = c.flags;
    out.extend([
        f.global_visual as u8,
        f.global_attribute as u8,
        f.local_distill as u8,
    ]);
    out
}

pub fn encode(model: &GliedModel) -> Result<Vec<u8>> {
    let store = model.store();
    let mut out = MAGIC.to_vec();
    let cfg = config_record(model.config());
    put_u32(&mut out, cfg.len())?;
    out.extend(cfg);

    let mut entries: Vec<(&str, Option<&Tensor>, Option<&str>)> = store
        .iter()
        .map(|(_, name, t)| (name, Some(t), None))
        .chain(store.aliases().map(|(a, target)| (a, None, Some(target))))
        .collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    put_u32(&mut out, entries.len())?;
    for (name, tensor, target) in entries {
        match (tensor, target) {
            (Some(t), _) => {
                out.push(TENSOR);
                put_str(&mut out, name)?;
                put_u32(&mut out, t.rank())?;
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            (None, Some(target)) => {
                out.push(ALIAS);
                put_str(&mut out, name)?;
                put_str(&mut out, target)?;
            }
            (None, None) => unreachable!(),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CoreError::Corrupt(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| CoreError::Corrupt(format!("size {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(CoreError::Corrupt(format!("flag byte {b}"))),
        }
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CoreError::Corrupt("name is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<GliedModel> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        let head = &bytes[..bytes.len().min(MAGIC.len())];
        return Err(CoreError::Version(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(MAGIC),
            String::from_utf8_lossy(head)
        )));
    }
    let mut r = Reader {
        bytes,
        at: MAGIC.len(),
    };
    let cfg_len = r.u32()?;
    let cfg_start = r.at;
    let config = ModelConfig {
        vocab_size: r.u64()?,
        d_e: r.u64()?,
        d_h: r.u64()?,
        d_r: r.u64()?,
        d_f: r.u64()?,
        heads: r.u64()?,
        dropout: r.f64()?,
        max_len: r.u64()?,
        flags: AblationFlags {
            global_visual: r.flag()?,
            global_attribute: r.flag()?,
            local_distill: r.flag()?,
        },
    };
    if r.at - cfg_start != cfg_len {
        return Err(CoreError::Corrupt(format!(
            "config record of {cfg_len} bytes, expected {}",
            r.at - cfg_start
        )));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    let mut aliases = Vec::new();
    for _ in 0..count {
        let kind = r.u8()?;
        let name = r.string()?;
        match kind {
            TENSOR => {
                let rank = r.u32()?;
                let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
                let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                let n = n
                    .filter(|&n| n.saturating_mul(8) <= bytes.len())
                    .ok_or_else(|| CoreError::Corrupt(format!("implausible shape {shape:?}")))?;
                let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let t = Tensor::new(shape, data)
                    .map_err(|e| CoreError::Corrupt(format!("tensor `{name}`: {e}")))?;
                store
                    .insert(name, t)
                    .map_err(|e| CoreError::Corrupt(e.to_string()))?;
            }
            ALIAS => aliases.push((name, r.string()?)),
            k => return Err(CoreError::Corrupt(format!("unknown entry kind {k}"))),
        }
    }
    for (alias, target) in aliases {
        store
            .alias(alias, &target)
            .map_err(|e| CoreError::Corrupt(e.to_string()))?;
    }
    if r.at != bytes.len() {
        return Err(CoreError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }
    GliedModel::from_parts(config, store)
}

pub fn save(model: &GliedModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<GliedModel> {
    decode(&std::fs::read(path)?)
}
