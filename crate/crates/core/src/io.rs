//! Binary artifact formats: DRV1 videos, P6 PPM frames and DRCK checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamRegistry, Tag};
use crate::tensor::Tensor;

const VIDEO_MAGIC: &[u8; 4] = b"DRV1";
const VIDEO_VERSION: u32 = 1;
const CKPT_MAGIC: &[u8; 4] = b"DRCK";
const CKPT_VERSION: u32 = 1;

fn format_err(kind: &'static str, path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        kind,
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Bounds-checked little-endian reader over an in-memory file.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(format_err(self.kind, self.path, "truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| format_err(self.kind, self.path, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(format_err(self.kind, self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn encode_video(video: &Tensor) -> Result<Vec<u8>> {
    let dims = match video.shape() {
        &[f, h, w, c] => [f, h, w, c],
        other => return Err(Error::InvalidTensor(format!("video must be rank 4, got {other:?}"))),
    };
    let mut out = Vec::with_capacity(24 + video.numel() * 8);
    out.extend_from_slice(VIDEO_MAGIC);
    out.extend_from_slice(&VIDEO_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in video.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_video(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut c = Cursor {
        buf: bytes,
        pos: 0,
        kind: "DRV1",
        path,
    };
    if c.take(4)? != VIDEO_MAGIC {
        return Err(format_err("DRV1", path, "bad magic"));
    }
    let version = c.u32()?;
    if version != VIDEO_VERSION {
        return Err(format_err("DRV1", path, format!("unsupported version {version}")));
    }
    let dims: Vec<usize> = (0..4).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.ok_or_else(|| format_err("DRV1", path, "size overflow"))?;
    let data = c.f64s(n)?;
    c.finish()?;
    Tensor::new(dims, data).map_err(|e| format_err("DRV1", path, e.to_string()))
}

pub fn write_video(path: &Path, video: &Tensor) -> Result<()> {
    write_file(path, &encode_video(video)?)
}

pub fn read_video(path: &Path) -> Result<Tensor> {
    decode_video(&read_file(path)?, path)
}

/// One `H×W×3` frame (values clamped to `[0,1]`) as binary P6.
pub fn encode_ppm(frame: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match frame.shape() {
        &[h, w, 3] => (h, w),
        other => return Err(Error::InvalidTensor(format!("PPM needs H×W×3, got {other:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |r: &str| format_err("PPM", path, r);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a P6 file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 || w == 0 || h == 0 {
        return Err(bad("only 8-bit non-empty images are supported"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h * 3 {
        return Err(bad("pixel data size mismatch"));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h, w, 3], data)
}

pub fn write_ppm(path: &Path, frame: &Tensor) -> Result<()> {
    write_file(path, &encode_ppm(frame)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&read_file(path)?, path)
}

/// Frame `f` of an `F×H×W×C` video.
pub fn frame(video: &Tensor, f: usize) -> Result<Tensor> {
    let &[nf, h, w, c] = video.shape() else {
        return Err(Error::InvalidTensor(format!("video must be rank 4, got {:?}", video.shape())));
    };
    if f >= nf {
        return Err(Error::Invalid(format!("frame {f} outside {nf} frames")));
    }
    let n = h * w * c;
    Tensor::new(vec![h, w, c], video.data()[f * n..(f + 1) * n].to_vec())
}

pub fn encode_checkpoint(reg: &ParamRegistry) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(reg.len() as u32).to_le_bytes());
    for e in reg.iter() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.tag.to_byte());
        out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ParamRegistry> {
    let mut c = Cursor {
        buf: bytes,
        pos: 0,
        kind: "DRCK",
        path,
    };
    if c.take(4)? != CKPT_MAGIC {
        return Err(format_err("DRCK", path, "bad magic"));
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(format_err("DRCK", path, format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut reg = ParamRegistry::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| format_err("DRCK", path, "parameter name is not UTF-8"))?
            .to_owned();
        let tag_byte = c.u8()?;
        let tag = Tag::from_byte(tag_byte).ok_or_else(|| format_err("DRCK", path, format!("unknown tag byte {tag_byte}")))?;
        let rank = c.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err("DRCK", path, "size overflow"))?;
        let data = c.f64s(n)?;
        let t = Tensor::new(shape, data).map_err(|e| format_err("DRCK", path, e.to_string()))?;
        reg.insert(name, t, tag)
            .map_err(|e| format_err("DRCK", path, e.to_string()))?;
    }
    c.finish()?;
    Ok(reg)
}

pub fn save_checkpoint(path: &Path, reg: &ParamRegistry) -> Result<()> {
    write_file(path, &encode_checkpoint(reg))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamRegistry> {
    decode_checkpoint(&read_file(path)?, path)
}
