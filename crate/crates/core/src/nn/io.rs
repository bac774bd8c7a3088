//! Binary parameter and gradient files.
//!
//! Layout: a header line (`MKORPARAMS v1` or `MKORGRADS v1`), for gradients a
//! `batch K` line, an `entries N` line, then N manifest lines
//! `<layer> <role> <d0>x<d1>...`, followed by all values as little-endian
//! `f32` in manifest order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{MkorError, Result};
use crate::nn::params::{GradientUpdate, ParamEntry, ParamLayout, ParamRole, ParamSet};

const PARAMS_MAGIC: &str = "MKORPARAMS v1";
const GRADS_MAGIC: &str = "MKORGRADS v1";

fn write_body(w: &mut impl Write, set: &ParamSet<f32>) -> std::io::Result<()> {
    writeln!(w, "entries {}", set.layout.entries.len())?;
    for e in &set.layout.entries {
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        writeln!(w, "{} {} {}", e.layer, e.role.as_str(), dims.join("x"))?;
    }
    let mut buf = Vec::with_capacity(1 << 20);
    for chunk in set.values.chunks(1 << 18) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_line(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut line = String::new();
    let n = r.read_line(&mut line).map_err(|e| MkorError::io(path, e))?;
    if n == 0 {
        return Err(MkorError::format(path, "unexpected end of header"));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

fn read_keyed(r: &mut impl BufRead, path: &Path, key: &str) -> Result<usize> {
    let line = read_line(r, path)?;
    let mut parts = line.split_whitespace();
    match (parts.next(), parts.next().and_then(|v| v.parse().ok()), parts.next()) {
        (Some(k), Some(v), None) if k == key => Ok(v),
        _ => Err(MkorError::format(
            path,
            format!("expected `{} <n>`, got `{}`", key, line),
        )),
    }
}

fn read_body(r: &mut impl BufRead, path: &Path) -> Result<ParamSet<f32>> {
    let count = read_keyed(r, path, "entries")?;
    let mut entries = Vec::with_capacity(count);
    let mut offset = 0;
    for _ in 0..count {
        let line = read_line(r, path)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || MkorError::format(path, format!("bad manifest line `{}`", line));
        if parts.len() != 3 {
            return Err(bad());
        }
        let layer = parts[0].parse().map_err(|_| bad())?;
        let role = match parts[1] {
            "weight" => ParamRole::Weight,
            "bias" => ParamRole::Bias,
            _ => return Err(bad()),
        };
        let shape: Vec<usize> = parts[2]
            .split('x')
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let entry = ParamEntry {
            layer,
            role,
            shape,
            offset,
        };
        offset += entry.len();
        entries.push(entry);
    }
    let mut bytes = Vec::with_capacity(offset * 4);
    r.read_to_end(&mut bytes).map_err(|e| MkorError::io(path, e))?;
    if bytes.len() != offset * 4 {
        return Err(MkorError::format(
            path,
            format!("expected {} value bytes, found {}", offset * 4, bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ParamSet::from_values(&ParamLayout::new(entries), values)
}

fn open(path: &Path, magic: &str) -> Result<BufReader<File>> {
    let f = File::open(path).map_err(|e| MkorError::io(path, e))?;
    let mut r = BufReader::new(f);
    let header = read_line(&mut r, path)?;
    if header != magic {
        return Err(MkorError::format(
            path,
            format!("expected header `{}`, got `{}`", magic, header),
        ));
    }
    Ok(r)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| MkorError::io(parent, e))?;
        }
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| MkorError::io(path, e))?))
}

pub fn save_params(path: impl AsRef<Path>, params: &ParamSet<f32>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    writeln!(w, "{}", PARAMS_MAGIC)
        .and_then(|_| write_body(&mut w, params))
        .and_then(|_| w.flush())
        .map_err(|e| MkorError::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamSet<f32>> {
    let path = path.as_ref();
    let mut r = open(path, PARAMS_MAGIC)?;
    read_body(&mut r, path)
}

pub fn save_gradients(path: impl AsRef<Path>, update: &GradientUpdate<f32>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    writeln!(w, "{}", GRADS_MAGIC)
        .and_then(|_| writeln!(w, "batch {}", update.batch_size))
        .and_then(|_| write_body(&mut w, &update.grads))
        .and_then(|_| w.flush())
        .map_err(|e| MkorError::io(path, e))
}

pub fn load_gradients(path: impl AsRef<Path>) -> Result<GradientUpdate<f32>> {
    let path = path.as_ref();
    let mut r = open(path, GRADS_MAGIC)?;
    let batch_size = read_keyed(&mut r, path, "batch")?;
    let grads = read_body(&mut r, path)?;
    Ok(GradientUpdate { grads, batch_size })
}
