//! Versioned binary checkpoints with a CRC-32 trailer.
//!
//! Layout (little endian):
//!
//! ```text
//! magic      8 bytes  "TCSMCKPT"
//! version    u32
//! epoch      u64
//! config     u32 length + UTF-8 JSON {"model": .., "train": ..}
//! tensors    u32 count, then per tensor: u16 name length, name, u64 length, f64 values
//! momentum   u64 length, f64 values
//! crc32      u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegModel};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"TCSMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SegModel,
    pub velocity: Vec<f64>,
    pub epoch: usize,
    pub train_config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct ConfigEcho {
    model: ModelConfig,
    train: TrainConfig,
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    encode_with_version(ckpt, VERSION)
}

fn encode_with_version(ckpt: &Checkpoint, version: u32) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&version.to_le_bytes());
    buf.extend_from_slice(&(ckpt.epoch as u64).to_le_bytes());
    let echo = serde_json::to_vec(&ConfigEcho {
        model: ckpt.model.config().clone(),
        train: ckpt.train_config.clone(),
    })?;
    buf.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    buf.extend_from_slice(&echo);

    let named = ckpt.model.named_params();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, values) in named {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_f64s(&mut buf, values);
    }
    write_f64s(&mut buf, &ckpt.velocity);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn write_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Integrity("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = usize::try_from(self.u64()?)
            .map_err(|_| Error::Integrity("array length overflow".into()))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("array length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let epoch = r.u64()? as usize;
    let echo_len = r.u32()? as usize;
    let echo: ConfigEcho = serde_json::from_slice(r.take(echo_len)?)?;

    let count = r.u32()?;
    let mut params = Vec::new();
    let mut names = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
            .to_string();
        names.push(name);
        params.extend(r.f64s()?);
    }
    let velocity = r.f64s()?;
    if r.pos != body.len() {
        return Err(Error::Integrity("trailing bytes".into()));
    }

    let model = SegModel::from_params(echo.model, params)?;
    let expected: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if expected != names {
        return Err(Error::Integrity("tensor names do not match the architecture".into()));
    }
    if velocity.len() != model.param_count() {
        return Err(Error::Integrity("momentum length does not match parameters".into()));
    }
    Ok(Checkpoint {
        model,
        velocity,
        epoch,
        train_config: echo.train,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
