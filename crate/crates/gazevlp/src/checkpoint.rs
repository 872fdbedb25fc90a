//! Binary parameter checkpoints.
//!
//! Layout: magic `CGZ1`, then a little-endian u32 record count, then per
//! parameter: u32 name length, UTF-8 name bytes, u32 rank, u64 dims, and the
//! values as little-endian 64-bit floats in row-major order. Loading
//! validates names and shapes against the live model definition.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamSet;

const MAGIC: &[u8; 4] = b"CGZ1";

pub struct RawRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    let records: Vec<RawRecord> = params
        .iter()
        .map(|p| RawRecord {
            name: p.name().to_string(),
            shape: p.shape(),
            data: p.data(),
        })
        .collect();
    save_records(path, &records)
}

pub fn save_records(path: &Path, records: &[RawRecord]) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::data(format!("cannot create checkpoint {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::data(format!("checkpoint write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(records.len() as u32).to_le_bytes()).map_err(io)?;
    for rec in records {
        let name = rec.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_all(&(rec.shape.len() as u32).to_le_bytes()).map_err(io)?;
        for d in &rec.shape {
            w.write_all(&(*d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in &rec.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Vec<RawRecord>> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::data(format!("checkpoint read failed: {e}"));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{} is not a checkpoint (bad magic {:?})",
            path.display(),
            magic
        )));
    }
    let count = read_u32(&mut r).map_err(io)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r).map_err(io)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::data("checkpoint contains a non-UTF-8 parameter name"))?;
        let rank = read_u32(&mut r).map_err(io)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r).map_err(io)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(io)?;
            data.push(f64::from_le_bytes(buf));
        }
        records.push(RawRecord { name, shape, data });
    }
    Ok(records)
}

/// Load values into an existing parameter set, validating names and shapes.
pub fn load(path: &Path, params: &ParamSet) -> Result<()> {
    let records = read_raw(path)?;
    if records.len() != params.len() {
        return Err(Error::data(format!(
            "checkpoint {} holds {} parameters, model defines {}",
            path.display(),
            records.len(),
            params.len()
        )));
    }
    for rec in &records {
        let p = params.get(&rec.name).ok_or_else(|| {
            Error::data(format!("checkpoint parameter `{}` not in model", rec.name))
        })?;
        if p.shape() != rec.shape {
            return Err(Error::data(format!(
                "shape mismatch for `{}`: checkpoint {:?}, model {:?}",
                rec.name,
                rec.shape,
                p.shape()
            )));
        }
        p.set_data(rec.data.clone());
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
