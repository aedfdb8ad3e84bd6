//! Frame files: lossless `FLT1` tensors, 8-bit PGM previews and the
//! checksum manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FLT1_MAGIC: &[u8; 4] = b"FLT1";

/// `FLT1`, `u32` rank, `u32` dims, little-endian `f32` values.
pub fn encode_flt1(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(FLT1_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flt1(bytes: &[u8]) -> Result<Tensor<f32>> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Format("truncated FLT1 header".into()))
    };
    if bytes.get(..4) != Some(FLT1_MAGIC) {
        return Err(Error::Format("missing FLT1 magic".into()));
    }
    let rank = word(4)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible FLT1 rank {rank}")));
    }
    let shape = (0..rank).map(|i| Ok(word(8 + 4 * i)? as usize)).collect::<Result<Vec<_>>>()?;
    let body = &bytes[8 + 4 * rank..];
    let n: usize = shape.iter().product();
    if body.len() != 4 * n {
        return Err(Error::Format(format!("FLT1 body holds {} bytes, shape {shape:?} needs {}", body.len(), 4 * n)));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Tensor::from_vec(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_flt1(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_flt1(t))?;
    Ok(())
}

pub fn read_flt1(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_flt1(&std::fs::read(path)?)
}

/// Binary PGM with `[min, max]` mapped onto `[0, 255]`. Channels of a
/// `[C, H, W]` frame are stacked vertically; a constant frame maps to 0.
pub fn encode_pgm(frame: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match frame.shape() {
        [c, h, w] => (c * h, *w),
        [h, w] => (*h, *w),
        s => return Err(Error::Format(format!("PGM needs a [C, H, W] or [H, W] frame, got {s:?}"))),
    };
    let (lo, hi) = frame.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.data().iter().map(|&x| {
        if span > 0.0 {
            (((x - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, frame: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_pgm(frame)?)?;
    Ok(())
}

pub fn frame_stem(index: usize) -> String {
    format!("frame_{index:05}")
}

/// `index,checksum` with the CRC32 of each FLT1 file in hex.
pub fn manifest_csv(entries: &[(usize, u32)]) -> String {
    let mut s = String::from("index,checksum\n");
    for (i, c) in entries {
        writeln!(s, "{i},{c:08x}").expect("writing to a String");
    }
    s
}

/// All `frame_*.flt1` files in `dir`, sorted by name.
pub fn list_frames(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "flt1")
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("frame_"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}
