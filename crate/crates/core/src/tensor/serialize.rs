//! Tensor files: a text manifest followed by little-endian IEEE-754 payloads.
//!
//! ```text
//! tensors v1
//! <name> <f32|f64> <d0,d1,...>
//! ...
//! end
//! <payload of tensor 0><payload of tensor 1>...
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "tensors v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{MAGIC}").unwrap();
    for t in tensors {
        if t.name.is_empty() || t.name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!(
                "tensor name `{}` must be non-empty without whitespace",
                t.name
            )));
        }
        let dims: Vec<String> = t.tensor.shape().iter().map(|d| d.to_string()).collect();
        writeln!(buf, "{} {} {}", t.name, t.dtype.tag(), dims.join(",")).unwrap();
    }
    writeln!(buf, "end").unwrap();
    for t in tensors {
        match t.dtype {
            DType::F64 => t.tensor.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => t
                .tensor
                .data()
                .iter()
                .for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut next_line = |record: usize| -> Result<String> {
        let end = bytes[pos..]
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::parse(path, record, "truncated manifest"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::parse(path, record, "manifest is not utf-8"))?
            .to_string();
        pos += end + 1;
        Ok(line)
    };
    if next_line(0)? != MAGIC {
        return Err(Error::parse(path, 0, "bad magic line"));
    }
    let mut entries = Vec::new();
    loop {
        let record = entries.len() + 1;
        let line = next_line(record)?;
        if line == "end" {
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 3 {
            return Err(Error::parse(path, record, format!("malformed entry `{line}`")));
        }
        let dtype = match parts[1] {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(Error::parse(path, record, format!("unknown dtype `{other}`"))),
        };
        let shape = if parts[2].is_empty() {
            vec![]
        } else {
            parts[2]
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(path, record, format!("bad shape `{}`", parts[2])))?
        };
        entries.push((parts[0].to_string(), dtype, shape));
    }
    let mut out = Vec::with_capacity(entries.len());
    for (i, (name, dtype, shape)) in entries.into_iter().enumerate() {
        let numel: usize = shape.iter().product();
        let len = numel * dtype.width();
        if pos + len > bytes.len() {
            return Err(Error::parse(path, i + 1, format!("payload of `{name}` truncated")));
        }
        let raw = &bytes[pos..pos + len];
        pos += len;
        let data: Vec<f64> = match dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        out.push(NamedTensor {
            name,
            dtype,
            tensor: Tensor::new(&shape, data)?,
        });
    }
    if pos != bytes.len() {
        return Err(Error::parse(path, out.len(), "trailing bytes after payload"));
    }
    Ok(out)
}
