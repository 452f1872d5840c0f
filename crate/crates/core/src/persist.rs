//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RZCK" | version u32 | config_len u32 | config text (key=value lines)
//! | tensor_count u32 | per tensor: name_len u16, name, rank u8, dims u32 × rank, f64 × numel
//! | crc32 u32 of everything before it
//! ```

use std::fs;
use std::path::Path;

use crate::error::{RazorError, Result};
use crate::model::{Checkpoint, CheckpointMeta, ModelConfig, ParamMap, CHECKPOINT_FORMAT_VERSION};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RZCK";

/// Canonical text form of the model config and metadata.
pub fn config_text(config: &ModelConfig, meta: &CheckpointMeta) -> String {
    let quant = meta.quant_bits.map_or_else(|| "none".to_string(), |b| b.to_string());
    format!(
        "embed_dim={}\nn_blocks={}\nn_heads={}\nmlp_hidden={}\nvocab_size={}\nn_patches={}\npatch_dim={}\nmax_text_len={}\nseed={}\nstep={}\nquant_bits={}\n",
        config.embed_dim,
        config.n_blocks,
        config.n_heads,
        config.mlp_hidden,
        config.vocab_size,
        config.n_patches,
        config.patch_dim,
        config.max_text_len,
        meta.seed,
        meta.step,
        quant,
    )
}

fn corrupt(msg: impl Into<String>) -> RazorError {
    RazorError::Integrity(msg.into())
}

fn parse_config_text(text: &str, version: u32) -> Result<(ModelConfig, CheckpointMeta)> {
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| corrupt(format!("bad config line {line:?}")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| -> Result<u64> {
        let v = kv.get(k).ok_or_else(|| corrupt(format!("config block lacks {k}")))?;
        v.parse().map_err(|_| corrupt(format!("bad value for {k}: {v}")))
    };
    let usize_of = |k: &str| get(k).map(|v| v as usize);
    let config = ModelConfig {
        embed_dim: usize_of("embed_dim")?,
        n_blocks: usize_of("n_blocks")?,
        n_heads: usize_of("n_heads")?,
        mlp_hidden: usize_of("mlp_hidden")?,
        vocab_size: usize_of("vocab_size")?,
        n_patches: usize_of("n_patches")?,
        patch_dim: usize_of("patch_dim")?,
        max_text_len: usize_of("max_text_len")?,
    };
    let quant_bits = match kv.get("quant_bits").copied() {
        None | Some("none") => None,
        Some(v) => Some(v.parse().map_err(|_| corrupt(format!("bad quant_bits {v}")))?),
    };
    let meta = CheckpointMeta { seed: get("seed")?, step: get("step")?, format_version: version, quant_bits };
    Ok((config, meta))
}

pub fn to_bytes(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    let text = config_text(c.config(), &c.meta);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(c.params().len() as u32).to_le_bytes());
    for (name, t) in c.params() {
        let name_len = u16::try_from(name.len()).map_err(|_| RazorError::Input(format!("name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(corrupt("file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(corrupt(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let text_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| corrupt("config block is not UTF-8"))?;
    let (config, meta) = parse_config_text(text, version)?;
    let count = r.u32()?;
    let mut params = ParamMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| corrupt("tensor name is not UTF-8"))?.to_string();
        let rank = r.u8()?;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        if numel.saturating_mul(8) > body.len() - r.pos {
            return Err(corrupt(format!("tensor {name} overruns the file")));
        }
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after tensor table"));
    }
    Checkpoint::new(config, params, meta).map_err(|e| corrupt(e.to_string()))
}

pub fn save(c: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(c)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
