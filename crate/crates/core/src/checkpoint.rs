//! Flat binary parameter checkpoints.
//!
//! Layout: optional `# key value` metadata lines, then per tensor one ASCII
//! header line `name dim0 dim1 ...` followed by exactly prod(dims)
//! little-endian f64 values. Round-trips are bit-exact.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::net::{ParamEntry, Parameters};
use crate::tensor::Tensor;

pub fn save(path: &Path, params: &Parameters, meta: &[(String, String)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in meta {
        writeln!(f, "# {k} {v}")?;
    }
    for e in params.entries() {
        write!(f, "{}", e.name)?;
        for d in e.tensor.shape() {
            write!(f, " {d}")?;
        }
        if !e.trainable {
            write!(f, " !frozen")?;
        }
        writeln!(f)?;
        for v in e.tensor.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<(Parameters, Vec<(String, String)>)> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let mut meta = Vec::new();
    let mut entries = Vec::new();
    loop {
        let mut line = String::new();
        let n = read_header_line(&mut f, &mut line)?;
        if n == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# ") {
            let mut it = rest.splitn(2, ' ');
            let k = it.next().unwrap_or_default().to_string();
            let v = it.next().unwrap_or_default().to_string();
            meta.push((k, v));
            continue;
        }
        let mut parts = line.split(' ');
        let name = parts
            .next()
            .ok_or_else(|| CoreError::CheckpointFormat("empty header line".into()))?
            .to_string();
        let mut shape = Vec::new();
        let mut trainable = true;
        for p in parts {
            if p == "!frozen" {
                trainable = false;
            } else {
                shape.push(p.parse::<usize>().map_err(|_| {
                    CoreError::CheckpointFormat(format!("bad dimension '{p}' for {name}"))
                })?);
            }
        }
        let count: usize = shape.iter().product();
        let mut buf = vec![0u8; count * 8];
        f.read_exact(&mut buf).map_err(|_| {
            CoreError::CheckpointFormat(format!("truncated data for tensor {name}"))
        })?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(ParamEntry { name, tensor: Tensor::new(shape, data)?, trainable });
    }
    Ok((Parameters::from_entries(entries), meta))
}

/// Reads one text line; the payload after each header is binary, so this
/// cannot use lines() over the whole stream.
fn read_header_line(r: &mut impl BufRead, out: &mut String) -> Result<usize> {
    let mut buf = Vec::new();
    let n = r.read_until(b'\n', &mut buf)?;
    if n > 0 {
        *out = String::from_utf8(buf)
            .map_err(|_| CoreError::CheckpointFormat("non-utf8 header line".into()))?;
    }
    Ok(n)
}
