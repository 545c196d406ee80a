//! Binary tensor format and named-section checkpoints.
//!
//! A tensor is written as the ASCII line `shape: d0 d1 ... dn\n` followed by
//! its values as little-endian `f64`, row-major.
//!
//! A checkpoint is a sequence of `key=value` lines, one empty line, and then
//! any number of sections `tensor <name>\n` each followed by one tensor.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    writeln!(w, "shape: {}", dims.join(" "))?;
    let mut buf = Vec::with_capacity(8 * t.len());
    for &v in t.data() {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_line<R: BufRead>(r: &mut R) -> Result<Option<String>> {
    let mut line = Vec::new();
    let n = r.read_until(b'\n', &mut line)?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() == Some(&b'\n') {
        line.pop();
    }
    String::from_utf8(line)
        .map(Some)
        .map_err(|_| Error::Parse("header line is not UTF-8".into()))
}

pub fn read_tensor<T: Scalar, R: BufRead>(r: &mut R) -> Result<Tensor<T>> {
    let line = read_line(r)?.ok_or_else(|| Error::Parse("missing shape header".into()))?;
    let rest = line
        .strip_prefix("shape:")
        .ok_or_else(|| Error::Parse(format!("expected `shape:` header, got `{line}`")))?;
    let shape = rest
        .split_whitespace()
        .map(|d| d.parse::<usize>().map_err(|_| Error::Parse(format!("bad extent `{d}`"))))
        .collect::<Result<Vec<_>>>()?;
    if shape.is_empty() {
        return Err(Error::Parse("shape header lists no extents".into()));
    }
    let mut bytes = vec![0u8; 8 * numel(&shape)];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Parse(format!("truncated tensor data for shape {shape:?}: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(&shape, data)
}

/// Ordered configuration header plus named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint<T> {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new() -> Self {
        Self {
            config: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Parse(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        for (k, v) in &self.config {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::Parse(format!("config entry `{k}` cannot be serialized")));
            }
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w)?;
        for (name, t) in &self.tensors {
            writeln!(w, "tensor {name}")?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut ck = Self::new();
        loop {
            let line = read_line(r)?.ok_or_else(|| Error::Parse("checkpoint header not terminated".into()))?;
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("config line without `=`: `{line}`")))?;
            ck.config.insert(k.trim().to_string(), v.trim().to_string());
        }
        while let Some(line) = read_line(r)? {
            let name = line
                .strip_prefix("tensor ")
                .ok_or_else(|| Error::Parse(format!("expected `tensor <name>`, got `{line}`")))?;
            let t = read_tensor(r)?;
            ck.tensors.push((name.to_string(), t));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f)
    }
}
