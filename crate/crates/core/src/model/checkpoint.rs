//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "IRISCKPT"
//! version    u32       CHECKPOINT_VERSION
//! header_len u32       length of the UTF-8 header that follows
//! header     bytes     `key=value` lines: variant, sizes, conventions,
//!                      then every hyper-parameter
//! n_tensors  u32
//! per tensor:
//!   name_len u16, name bytes (UTF-8)
//!   ndim     u8, then ndim × u64 dims
//!   payload  prod(dims) × f64, row-major
//! crc32      u32       over every preceding byte
//! ```
//!
//! Header and tensor order are deterministic, so identical parameters give
//! byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Hyperparams, ModelParams, ModelShape, Variant};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"IRISCKPT";

/// Conventions baked into every checkpoint.
const EMBEDDING_INIT: &str = "gaussian(mean=0,std=0.01)";
const LOSS_SCALE: &str = "mse=0.5*sum;log=sum;bpr=sum";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub hp: Hyperparams,
    pub num_users: usize,
    /// Loss the parameters were trained with.
    pub loss: String,
    /// Remaining header entries, for reporting.
    pub meta: BTreeMap<String, String>,
}

fn header_text(ckpt: &Checkpoint) -> String {
    let shape = ckpt.params.shape();
    let mut lines = vec![
        format!("variant={}", ckpt.params.variant),
        format!("num_users={}", ckpt.num_users),
        format!("num_items={}", shape.num_items),
        format!("visual_dim={}", shape.visual_dim),
        format!("hidden_dim={}", shape.hidden_dim),
        format!("loss={}", ckpt.loss),
        format!("embedding_init={EMBEDDING_INIT}"),
        format!("loss_scale={LOSS_SCALE}"),
    ];
    lines.extend(ckpt.hp.to_pairs().into_iter().map(|(k, v)| format!("hp.{k}={v}")));
    let mut text = lines.join("\n");
    text.push('\n');
    text
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = header_text(ckpt);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    let tensors = ckpt.params.tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.shape.len() as u8);
        for d in &t.shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_owned());
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc_bytes.try_into().unwrap()) {
        return Err(bad("checksum mismatch (file corrupted)"));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(header_len)?).map_err(|_| bad("header is not UTF-8"))?;
    let mut meta = BTreeMap::new();
    for line in header.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad("malformed header line"))?;
        meta.insert(k.to_owned(), v.to_owned());
    }
    let take = |meta: &mut BTreeMap<String, String>, key: &str| {
        meta.remove(key)
            .ok_or_else(|| Error::Checkpoint(format!("header lacks '{key}'")))
    };
    let num = |s: String, key: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Checkpoint(format!("bad value for '{key}'")))
    };
    let variant: Variant = take(&mut meta, "variant")?.parse().map_err(Error::Checkpoint)?;
    let num_users = num(take(&mut meta, "num_users")?, "num_users")?;
    let num_items = num(take(&mut meta, "num_items")?, "num_items")?;
    let visual_dim = num(take(&mut meta, "visual_dim")?, "visual_dim")?;
    let hidden_dim = num(take(&mut meta, "hidden_dim")?, "hidden_dim")?;
    let loss = take(&mut meta, "loss")?;
    let mut hp = Hyperparams::default();
    for key in Hyperparams::KEYS {
        let value = take(&mut meta, &format!("hp.{key}"))?;
        hp.set(key, &value).map_err(Error::Checkpoint)?;
    }

    let mut params = ModelParams::zeros(ModelShape {
        variant,
        num_users,
        num_items,
        embedding_dim: hp.embedding_dim,
        attention_dim: hp.attention_dim,
        visual_dim,
        hidden_dim,
    });
    let expected: Vec<(&'static str, Vec<usize>)> = params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors for {variant}, found {count}",
            expected.len()
        )));
    }
    for (name, shape) in expected {
        let name_len = r.u16()? as usize;
        let found = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        if found != name {
            return Err(Error::Checkpoint(format!("expected tensor '{name}', found '{found}'")));
        }
        let ndim = r.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {dims:?}, expected {shape:?}"
            )));
        }
        let dst = params.tensor_mut(name).expect("layout built from the same params");
        for v in dst.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes after tensors"));
    }
    if let Some(name) = params.first_non_finite() {
        return Err(Error::Checkpoint(format!("tensor '{name}' holds non-finite values")));
    }
    Ok(Checkpoint {
        params,
        hp,
        num_users,
        loss,
        meta,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ModelParams::zeros(ModelShape {
            variant: Variant::MultimodalIris,
            num_users: 4,
            num_items: 6,
            embedding_dim: 3,
            attention_dim: 2,
            visual_dim: 5,
            hidden_dim: 4,
        });
        for (k, (_, t)) in params.tensors_mut().into_iter().enumerate() {
            for (i, v) in t.iter_mut().enumerate() {
                *v = (k as f64 + 1.0) * 0.1 + i as f64 * 1e-3;
            }
        }
        let hp = Hyperparams {
            embedding_dim: 3,
            attention_dim: 2,
            feature_hidden_dim: 4,
            ..Hyperparams::default()
        };
        Checkpoint {
            params,
            hp,
            num_users: 4,
            loss: "pointwise_log".into(),
            meta: BTreeMap::new(),
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let ckpt = sample();
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.params, ckpt.params);
        assert_eq!(back.hp, ckpt.hp);
        assert_eq!(back.loss, "pointwise_log");
        assert_eq!(back.meta["embedding_init"], EMBEDDING_INIT);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn flipped_byte_is_detected() {
        let mut bytes = encode_checkpoint(&sample());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode_checkpoint(&sample());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 9]).is_err());
        assert!(decode_checkpoint(b"garbage").is_err());
    }
}
