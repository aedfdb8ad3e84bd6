//! `ABOV` checkpoints.
//!
//! Layout: magic, `u32` version, `u32` record count, then per record
//! `[u32 name length][name][u32 rank][u32 dims...][f32 values]`, and finally
//! a CRC32 of every preceding byte. All integers and floats little-endian.
//! The first record, `__config__`, holds the model hyperparameters.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AdaBovDenoiser, DenoiserConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ABOV";
pub const VERSION: u32 = 1;
const CONFIG_RECORD: &str = "__config__";

fn config_tensor(c: &DenoiserConfig) -> Tensor<f32> {
    let v = [
        c.frame_h,
        c.frame_w,
        c.channels,
        c.patch_h,
        c.patch_w,
        c.hidden,
        c.depth,
        c.heads,
        c.window,
        c.bov_enabled as usize,
    ];
    Tensor::from_vec(vec![v.len()], v.iter().map(|&x| x as f32).collect()).expect("fixed length")
}

fn config_from_tensor(t: &Tensor<f32>) -> Result<DenoiserConfig> {
    let d = t.data();
    if d.len() != 10 || d.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
        return Err(Error::Format(format!("bad {CONFIG_RECORD} record {d:?}")));
    }
    let u = |i: usize| d[i] as usize;
    let cfg = DenoiserConfig {
        frame_h: u(0),
        frame_w: u(1),
        channels: u(2),
        patch_h: u(3),
        patch_w: u(4),
        hidden: u(5),
        depth: u(6),
        heads: u(7),
        window: u(8),
        bov_enabled: u(9) != 0,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(model: &AdaBovDenoiser<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * model.params().num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, model.params().len() + 1)?;
    put_record(&mut out, CONFIG_RECORD, &config_tensor(model.config()))?;
    for (name, t) in model.params().iter() {
        put_record(&mut out, name, t)?;
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Tensor::from_vec(shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AdaBovDenoiser<f32>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an ABOV checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::CorruptCheckpoint(format!("CRC32 {actual:08x} does not match stored {stored:08x}")));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(e.to_string()))?.to_string();
        records.push((name, r.tensor()?));
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    if records.first().map(|(n, _)| n.as_str()) != Some(CONFIG_RECORD) {
        return Err(Error::Format(format!("first record must be {CONFIG_RECORD}")));
    }
    let (_, cfg) = records.remove(0);
    let mut model = AdaBovDenoiser::new(config_from_tensor(&cfg)?, 0)?;
    model.params_mut().load_from(records)?;
    Ok(model)
}

pub fn save_checkpoint(model: &AdaBovDenoiser<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AdaBovDenoiser<f32>> {
    decode_checkpoint(&std::fs::read(path)?)
}
