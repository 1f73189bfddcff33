//! Weight file format, version 1. All integers are little-endian `u32`, all
//! values little-endian IEEE `f32`.
//!
//! ```text
//! "NKW1"
//! param_count
//! param_count × { name_len, name (UTF-8), rank, dims[rank], values[prod(dims)] }
//! stats_count
//! stats_count × { name_len, name (UTF-8), channels, mean[channels], var[channels] }
//! ```
//!
//! The architecture is recovered from the parameter names and shapes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::{UNet, UNetConfig};

pub const MAGIC: &[u8; 4] = b"NKW1";
const VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> NnError {
    NnError::Format {
        version: VERSION,
        msg: msg.into(),
    }
}

pub fn write_weights<T: Scalar, W: Write>(model: &UNet<T>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    let params = model.params();
    put_u32(&mut w, params.len() as u32)?;
    for p in params.iter() {
        put_str(&mut w, &p.name)?;
        put_u32(&mut w, p.value.shape().len() as u32)?;
        for &d in p.value.shape() {
            put_u32(&mut w, d as u32)?;
        }
        put_f32s(&mut w, p.value.data())?;
    }
    let stats = model.running_stats();
    put_u32(&mut w, stats.len() as u32)?;
    for s in stats {
        put_str(&mut w, &s.name)?;
        put_u32(&mut w, s.mean.len() as u32)?;
        put_f32s(&mut w, &s.mean)?;
        put_f32s(&mut w, &s.var)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_weights<T: Scalar>(model: &UNet<T>, path: impl AsRef<Path>) -> Result<()> {
    write_weights(model, BufWriter::new(File::create(path)?))
}

struct RawParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

pub fn read_weights<T: Scalar, R: Read>(mut r: R) -> Result<UNet<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| format_err("truncated header"))?;
    if &magic != MAGIC {
        return Err(format_err(format!("bad magic {:?}", magic)));
    }
    let count = get_u32(&mut r)? as usize;
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        let name = get_str(&mut r)?;
        let rank = get_u32(&mut r)? as usize;
        if rank > 4 {
            return Err(format_err(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| get_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = get_f32s(&mut r, n)?;
        raw.push(RawParam {
            name,
            shape,
            values,
        });
    }
    let config = infer_config(&raw)?;
    let mut model = UNet::<T>::new(config, 0)?;
    if model.params().len() != raw.len() {
        return Err(format_err(format!(
            "expected {} parameters, file has {}",
            model.params().len(),
            raw.len()
        )));
    }
    for (p, rp) in model.params_mut().iter_mut().zip(raw) {
        if p.name != rp.name || p.value.shape() != rp.shape.as_slice() {
            return Err(format_err(format!(
                "parameter {} {:?} does not match expected {} {:?}",
                rp.name,
                rp.shape,
                p.name,
                p.value.shape()
            )));
        }
        p.value = Tensor::new(rp.shape, rp.values.iter().map(|&v| T::from_f64(v as f64)).collect())?;
    }
    let stats_count = get_u32(&mut r)? as usize;
    if stats_count != model.running_stats().len() {
        return Err(format_err(format!(
            "expected {} batch-norm records, file has {}",
            model.running_stats().len(),
            stats_count
        )));
    }
    for s in model.running_stats_mut() {
        let name = get_str(&mut r)?;
        let c = get_u32(&mut r)? as usize;
        if name != s.name || c != s.mean.len() {
            return Err(format_err(format!("batch-norm record {name}/{c} does not match {}", s.name)));
        }
        s.mean = get_f32s(&mut r, c)?.iter().map(|&v| T::from_f64(v as f64)).collect();
        s.var = get_f32s(&mut r, c)?.iter().map(|&v| T::from_f64(v as f64)).collect();
    }
    Ok(model)
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<UNet<T>> {
    read_weights(BufReader::new(File::open(path)?))
}

fn infer_config(raw: &[RawParam]) -> Result<UNetConfig> {
    let find = |name: &str| raw.iter().find(|p| p.name == name);
    let first = find("enc0.conv1.weight").ok_or_else(|| format_err("missing enc0.conv1.weight"))?;
    if first.shape.len() != 4 {
        return Err(format_err("enc0.conv1.weight is not rank 4"));
    }
    let in_channels = first.shape[1];
    let mut widths = Vec::new();
    while let Some(p) = find(&format!("enc{}.conv1.weight", widths.len())) {
        widths.push(p.shape[0]);
    }
    let bottleneck = find("mid.conv1.weight")
        .ok_or_else(|| format_err("missing mid.conv1.weight"))?
        .shape[0];
    Ok(UNetConfig {
        in_channels,
        widths,
        bottleneck,
    })
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn put_f32s<T: Scalar, W: Write>(w: &mut W, vals: &[T]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| format_err("truncated file"))?;
    Ok(u32::from_le_bytes(b))
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let n = get_u32(r)? as usize;
    if n > 4096 {
        return Err(format_err(format!("name length {n}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| format_err("truncated name"))?;
    String::from_utf8(b).map_err(|_| format_err("name is not UTF-8"))
}

fn get_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut b = vec![0u8; n * 4];
    r.read_exact(&mut b).map_err(|_| format_err("truncated values"))?;
    Ok(b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
