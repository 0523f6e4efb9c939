//! On-disk formats: `HDT1` tensors, binary PGM/PPM images and plain CSV.
//!
//! `HDT1` layout:
//!
//! ```text
//! "HDT1" | dtype: u8 (0 = f32, 1 = f64) | ndim: u8 | ndim x u32 LE dims | row-major LE payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::GridField;

const MAGIC: &[u8; 4] = b"HDT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A dense tensor as stored in an `HDT1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("too many dimensions: {}", dims.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Format("dimension exceeds u32".into()));
        }
        let expected: usize = dims.iter().product();
        let got = match &data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        };
        if expected != got {
            return Err(Error::ShapeMismatch { expected: dims, got: vec![got] });
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(dims, TensorData::F64(data))
    }

    pub fn from_field(field: &GridField) -> Tensor {
        Tensor { dims: field.shape().to_vec(), data: TensorData::F64(field.data().to_vec()) }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn into_field(self) -> Result<GridField> {
        let data = self.to_f64();
        GridField::new(self.dims, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let n: usize = self.dims.iter().product();
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + n * dtype.size());
        out.extend_from_slice(MAGIC);
        out.push(dtype.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, expected HDT1".into()));
        }
        let dtype = match bytes[4] {
            0 => DType::F32,
            1 => DType::F64,
            c => return Err(Error::Format(format!("unknown dtype code {c}"))),
        };
        let ndim = bytes[5] as usize;
        let header = 6 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::Format("truncated header".into()));
        }
        let dims: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        let payload = &bytes[header..];
        if Some(payload.len()) != n.checked_mul(dtype.size()) {
            return Err(Error::Format(format!(
                "payload is {} bytes, dims {:?} need {}",
                payload.len(),
                dims,
                n.saturating_mul(dtype.size())
            )));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            ),
            DType::F64 => TensorData::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            ),
        };
        Ok(Tensor { dims, data })
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    fs::write(path, tensor.to_bytes())?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::from_bytes(&fs::read(path)?)
}

pub fn write_field(path: impl AsRef<Path>, field: &GridField) -> Result<()> {
    write_tensor(path, &Tensor::from_field(field))
}

pub fn read_field(path: impl AsRef<Path>) -> Result<GridField> {
    read_tensor(path)?.into_field()
}

/// Writes a field in `[0, 1]` as 8-bit P5 (one channel) or P6 (three channels).
/// Values outside the range are clamped.
pub fn write_pnm(path: impl AsRef<Path>, field: &GridField) -> Result<()> {
    let (h, w, c) = match *field.shape() {
        [h, w] => (h, w, 1),
        [h, w, c] if c == 1 || c == 3 => (h, w, c),
        _ => return Err(Error::UnsupportedShape(field.shape().to_vec())),
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(field.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads a binary PGM/PPM into a field scaled to `[0, 1]`.
///
/// P5 gives shape `(H, W)`, P6 gives `(H, W, 3)`. Maxval up to 65535 is accepted.
pub fn read_pnm(path: impl AsRef<Path>) -> Result<GridField> {
    parse_pnm(&fs::read(path)?)
}

pub fn parse_pnm(bytes: &[u8]) -> Result<GridField> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("bad PNM header".into()))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match tokens[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM number '{s}'")));
    let (w, h, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if maxval == 0 || maxval > 65535 || w == 0 || h == 0 {
        return Err(Error::Format("invalid PNM dimensions or maxval".into()));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let n = w * h * channels;
    let raster = bytes.get(pos..pos + n * bps).ok_or_else(|| Error::Format("truncated PNM raster".into()))?;
    let data: Vec<f64> = if bps == 1 {
        raster.iter().map(|&b| b as f64 / maxval as f64).collect()
    } else {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64).collect()
    };
    let shape = if channels == 1 { vec![h, w] } else { vec![h, w, 3] };
    GridField::new(shape, data)
}

/// Formats a float so that it parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes a header line and rows as comma-separated text.
pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Format(format!("CSV row has {} fields, header has {}", row.len(), header.len())));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
