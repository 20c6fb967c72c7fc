//! Checkpoint serialization: a flat sequence of named tensor records.
//!
//! Each record is `name_len: u64 | name: utf-8 | ndim: u64 | dims: u64 each |
//! values: f64 each`, all little-endian, values always widened to 64-bit
//! regardless of the working scalar type. The format has no header; an empty
//! file is an empty checkpoint.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_NAME: u64 = 1 << 16;
const MAX_DIMS: u64 = 16;

/// Writes named tensors in iteration order.
pub fn save_named<S: Scalar>(path: &Path, entries: &[(String, Tensor<S>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (name, t) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_f().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads all records back as `(name, shape, f64 values)`.
pub fn load_named(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    loop {
        let mut len8 = [0u8; 8];
        match r.read_exact(&mut len8) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u64::from_le_bytes(len8);
        if name_len == 0 || name_len > MAX_NAME {
            return Err(Error::Parse(format!(
                "checkpoint record {}: name length {} out of range",
                out.len(),
                name_len
            )));
        }
        let mut name_buf = vec![0u8; name_len as usize];
        read_fully(&mut r, &mut name_buf, out.len(), "name")?;
        let name = String::from_utf8(name_buf).map_err(|_| {
            Error::Parse(format!("checkpoint record {}: name is not UTF-8", out.len()))
        })?;
        let mut ndim8 = [0u8; 8];
        read_fully(&mut r, &mut ndim8, out.len(), "rank")?;
        let ndim = u64::from_le_bytes(ndim8);
        if ndim > MAX_DIMS {
            return Err(Error::Parse(format!(
                "checkpoint record {} ({}): rank {} out of range",
                out.len(),
                name,
                ndim
            )));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut numel: u64 = 1;
        for _ in 0..ndim {
            let mut d8 = [0u8; 8];
            read_fully(&mut r, &mut d8, out.len(), "dims")?;
            let d = u64::from_le_bytes(d8);
            numel = numel.saturating_mul(d.max(1));
            if numel > (1 << 32) {
                return Err(Error::Parse(format!(
                    "checkpoint record {} ({}): implausible element count",
                    out.len(),
                    name
                )));
            }
            shape.push(d as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut v8 = [0u8; 8];
            read_fully(&mut r, &mut v8, out.len(), "values")?;
            data.push(f64::from_le_bytes(v8));
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

fn read_fully(r: &mut impl Read, buf: &mut [u8], record: usize, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Parse(format!(
                "checkpoint record {}: file truncated while reading {}",
                record, what
            ))
        } else {
            Error::Io(e)
        }
    })
}
