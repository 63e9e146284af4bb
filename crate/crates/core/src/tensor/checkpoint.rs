//! Checkpoint container: a text manifest followed by raw little-endian
//! buffers in manifest order.
//!
//! ```text
//! CTXTRACK-CHECKPOINT
//! version 1
//! config embed_dim 64
//! tensor encoder.patch.weight f64 768,64
//! end
//! <raw f64 LE bytes...>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "CTXTRACK-CHECKPOINT";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Model configuration as ordered key/value pairs.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "version {CHECKPOINT_VERSION}")?;
    for (k, v) in &ckpt.config {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("unserializable config entry {k:?}")));
        }
        writeln!(out, "config {k} {v}")?;
    }
    for (name, t) in &ckpt.tensors {
        if name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("tensor name {name:?} contains whitespace")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(out, "tensor {name} f64 {}", dims.join(","))?;
    }
    writeln!(out, "end")?;
    for (_, t) in &ckpt.tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let bad = |detail: String| Error::Checkpoint(format!("{}: {detail}", path.display()));
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Checkpoint(format!("{}: truncated manifest", path.display())));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut reader)? != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version_line = next_line(&mut reader)?;
    let version: u32 = version_line
        .strip_prefix("version ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(format!("bad version line {version_line:?}")))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mut ckpt = Checkpoint::default();
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    loop {
        let l = next_line(&mut reader)?;
        if l == "end" {
            break;
        }
        let mut parts = l.splitn(3, ' ');
        match parts.next() {
            Some("config") => {
                let k = parts.next().ok_or_else(|| bad(format!("bad line {l:?}")))?;
                let v = parts.next().unwrap_or("");
                ckpt.config.push((k.to_string(), v.to_string()));
            }
            Some("tensor") => {
                let name = parts.next().ok_or_else(|| bad(format!("bad line {l:?}")))?;
                let rest = parts.next().ok_or_else(|| bad(format!("bad line {l:?}")))?;
                let (dtype, dims) = rest.split_once(' ').ok_or_else(|| bad(format!("bad line {l:?}")))?;
                if dtype != "f64" {
                    return Err(bad(format!("unsupported dtype {dtype}")));
                }
                let shape = dims
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape {dims:?}")))?;
                shapes.push((name.to_string(), shape));
            }
            _ => return Err(bad(format!("unrecognized manifest line {l:?}"))),
        }
    }
    for (name, shape) in shapes {
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        reader
            .read_exact(&mut bytes)
            .map_err(|_| bad(format!("truncated data for {name}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        ckpt.tensors.push((name, Tensor::new(shape, data)?));
    }
    let mut trailing = Vec::new();
    reader.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(bad(format!("{} trailing bytes", trailing.len())));
    }
    Ok(ckpt)
}
