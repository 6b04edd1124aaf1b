//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `TKSPLAT\0`, `u32` version, 32-byte SHA-256
//! of the config text, `u64` optimizer step, `u64` config length and the
//! config TOML, `u32` blob count, then per blob: `u32` name length, name,
//! `u8` dtype (1 = f64), `u32` rank, `u64` dims, data. Every parameter `p`
//! is stored as `p` plus its Adam moments `p#m` and `p#v`.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 8] = b"TKSPLAT\0";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

fn put_blob(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(DTYPE_F64);
    out.extend((t.shape().len() as u32).to_le_bytes());
    for d in t.shape() {
        out.extend((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &Model, run: &RunConfig) -> Result<Vec<u8>> {
    let config = run.to_toml()?;
    let mut out = MAGIC.to_vec();
    out.extend(VERSION.to_le_bytes());
    out.extend(Sha256::digest(config.as_bytes()));
    out.extend(model.store.step.to_le_bytes());
    out.extend((config.len() as u64).to_le_bytes());
    out.extend(config.as_bytes());
    let params = model.store.params();
    out.extend(((params.len() * 3) as u32).to_le_bytes());
    for p in params {
        put_blob(&mut out, &p.name, &p.value);
        put_blob(&mut out, &format!("{}#m", p.name), &p.first_moment);
        put_blob(&mut out, &format!("{}#v", p.name), &p.second_moment);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| Error::format("checkpoint is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format("checkpoint length overflows"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(RunConfig, Model)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let hash = r.take(32)?.to_vec();
    let step = r.u64()?;
    let n = r.len()?;
    let config = std::str::from_utf8(r.take(n)?).map_err(|_| Error::format("checkpoint config is not UTF-8"))?;
    if Sha256::digest(config.as_bytes()).as_slice() != hash {
        return Err(Error::format("checkpoint config hash mismatch"));
    }
    let run = RunConfig::from_toml(config)?;
    let mut blobs = HashMap::new();
    for _ in 0..r.u32()? {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::format("blob name is not UTF-8"))?;
        if r.u8()? != DTYPE_F64 {
            return Err(Error::format(format!("blob {name} has an unsupported dtype")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| Error::format("blob size overflows"))?;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::format("blob size overflows"))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if blobs.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(Error::format(format!("duplicate blob {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after the last blob"));
    }
    let mut model = Model::new(run.model(), 0)?;
    let names: Vec<String> = model.store.params().iter().map(|p| p.name.clone()).collect();
    for name in names {
        let id = model.store.id(&name).expect("registered name");
        let mut get = |suffix: &str| {
            let key = format!("{name}{suffix}");
            blobs.remove(&key).ok_or_else(|| Error::format(format!("checkpoint lacks blob {key}")))
        };
        let (value, m, v) = (get("")?, get("#m")?, get("#v")?);
        model.store.set_value(id, value)?;
        model.store.set_moments(id, m, v)?;
    }
    if let Some(extra) = blobs.keys().next() {
        return Err(Error::format(format!("checkpoint has unknown blob {extra}")));
    }
    model.store.step = step;
    Ok((run, model))
}

pub fn save(path: &Path, model: &Model, run: &RunConfig) -> Result<()> {
    super::write_atomic(path, &encode_checkpoint(model, run)?)
}

pub fn load(path: &Path) -> Result<(RunConfig, Model)> {
    decode_checkpoint(&super::read_file(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn small() -> (RunConfig, Model) {
        let mut run = RunConfig::default();
        run.encoder = EncoderConfig { latents: 4, width: 8, blocks: 1, self_layers: 1, heads: 2, rgb_width: 8, ray_width: 8, registers: 1, ..EncoderConfig::default() };
        let mut model = Model::new(run.model(), 5).unwrap();
        model.store.step = 17;
        (run, model)
    }

    #[test]
    fn roundtrip_is_exact() {
        let (run, model) = small();
        let bytes = encode_checkpoint(&model, &run).unwrap();
        let (run2, back) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(run, run2);
        assert_eq!(back.store.step, 17);
        for (a, b) in model.store.params().iter().zip(back.store.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.first_moment, b.first_moment);
        }
        assert_eq!(encode_checkpoint(&back, &run2).unwrap(), bytes);
    }

    #[test]
    fn corruption_detected() {
        let (run, model) = small();
        let bytes = encode_checkpoint(&model, &run).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes.clone();
        bad[60] ^= 1;
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
