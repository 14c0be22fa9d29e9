//! On-disk formats: the "OCRT" binary tensor dump and 8-bit PGM images.
//!
//! Dump layout: magic bytes "OCRT", one version byte (1), one rank
//! byte, little-endian u64 extents, then the payload as little-endian
//! f64 in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{OcrtError, Result};

const MAGIC: &[u8; 4] = b"OCRT";
const VERSION: u8 = 1;

pub fn write_tensor(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(OcrtError::Contract(format!(
            "tensor dump: shape {shape:?} does not match {} values",
            data.len()
        )));
    }
    if shape.len() > u8::MAX as usize {
        return Err(OcrtError::Contract("tensor dump: rank exceeds 255".into()));
    }
    let mut buf = Vec::with_capacity(6 + shape.len() * 8 + data.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(shape.len() as u8);
    for &e in shape {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| OcrtError::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| OcrtError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut f = fs::File::open(path).map_err(|e| OcrtError::io(path, e))?;
    let mut raw = Vec::new();
    f.read_to_end(&mut raw).map_err(|e| OcrtError::io(path, e))?;
    let fail = |reason: &str| {
        OcrtError::Checkpoint(format!("{}: {reason}", path.display()))
    };
    if raw.len() < 6 || &raw[0..4] != MAGIC {
        return Err(fail("missing OCRT magic"));
    }
    if raw[4] != VERSION {
        return Err(fail("unsupported dump version"));
    }
    let rank = raw[5] as usize;
    let mut off = 6;
    if raw.len() < off + rank * 8 {
        return Err(fail("truncated extents"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = u64::from_le_bytes(raw[off..off + 8].try_into().unwrap()) as usize;
        shape.push(e);
        off += 8;
    }
    let numel: usize = shape.iter().product();
    if raw.len() != off + numel * 8 {
        return Err(fail("payload length does not match extents"));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let start = off + i * 8;
        data.push(f64::from_le_bytes(raw[start..start + 8].try_into().unwrap()));
    }
    Ok((shape, data))
}

/// Binary (P5) PGM, 8-bit.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(OcrtError::Contract(format!(
            "pgm: {width}x{height} does not match {} pixels",
            pixels.len()
        )));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| OcrtError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| OcrtError::io(path, e))?;
    let header = format!("P5\n{width} {height}\n255\n");
    f.write_all(header.as_bytes())
        .map_err(|e| OcrtError::io(path, e))?;
    f.write_all(pixels).map_err(|e| OcrtError::io(path, e))
}

/// Values in [0,1] -> round(255 * v).
pub fn to_gray_bytes(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| OcrtError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| OcrtError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| OcrtError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tns");
        let shape = vec![2, 3];
        let data = vec![1.0, -2.5, 3.25, 0.0, 1e-9, 7.0];
        write_tensor(&p, &shape, &data).unwrap();
        let (s, d) = read_tensor(&p).unwrap();
        assert_eq!(s, shape);
        assert_eq!(d, data);

        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[0..4], b"OCRT");
        assert_eq!(raw[4], 1);
        assert_eq!(raw[5], 2);
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tns");
        std::fs::write(&p, b"NOPE\x01\x01").unwrap();
        assert!(read_tensor(&p).is_err());
    }
}
