//! Debug dump: a text line `shape: d0 d1 ...` followed by little-endian floats.

use std::io::{BufRead, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

pub fn write_dump<W: Write>(w: &mut W, t: &Tensor, precision: Precision) -> Result<()> {
    let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    writeln!(w, "shape: {}", dims.join(" "))?;
    let mut buf = Vec::with_capacity(t.len() * precision.width());
    for &x in t.data() {
        match precision {
            Precision::F32 => buf.extend_from_slice(&(x as f32).to_le_bytes()),
            Precision::F64 => buf.extend_from_slice(&x.to_le_bytes()),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn dump_bytes(t: &Tensor, precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    write_dump(&mut out, t, precision).expect("writing to a Vec cannot fail");
    out
}

fn parse_header(line: &str) -> Result<Vec<usize>> {
    let rest = line
        .trim_end_matches(['\n', '\r'])
        .strip_prefix("shape:")
        .ok_or_else(|| Error::Parse(format!("expected 'shape:' header, got {line:?}")))?;
    rest.split_whitespace()
        .map(|d| d.parse::<usize>().map_err(|e| Error::Parse(format!("bad dimension {d:?}: {e}"))))
        .collect()
}

/// Reads one dump from a stream positioned at its header line.
pub fn read_dump<R: BufRead>(r: &mut R, precision: Precision) -> Result<Tensor> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(Error::Parse("unexpected end of input before dump header".into()));
    }
    let shape = parse_header(&line)?;
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * precision.width()];
    r.read_exact(&mut raw)?;
    let data = match precision {
        Precision::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Precision::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Tensor::new(shape, data)
}

/// Parses a standalone dump, inferring the float width from the payload size.
pub fn parse_dump(bytes: &[u8]) -> Result<Tensor> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::Parse(e.to_string()))?;
    let shape = parse_header(header)?;
    let n: usize = shape.iter().product();
    let payload = bytes.len() - nl - 1;
    let precision = if payload == n * 8 {
        Precision::F64
    } else if payload == n * 4 {
        Precision::F32
    } else {
        return Err(Error::Parse(format!("payload of {payload} bytes does not fit shape {shape:?}")));
    };
    read_dump(&mut &bytes[..], precision)
}
