//! `.tns` tensor files and 8-bit PGM label maps.
//!
//! `.tns` layout: magic `TNSR`, u16 LE version (1), u8 dtype (1 = f32, 2 = u8),
//! u8 ndim (1..=4), ndim × u32 LE dims, then the row-major payload in little endian.

use std::fs;
use std::path::Path;

use super::{ClassTensor, LabelMap, LogitMap, RgbImage, IGNORE, NUM_TISSUE_CLASSES};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::InvalidInput(format!("tensor rank {} not in 1..=4", dims.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::InvalidInput("tensor dimension exceeds u32".into()));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidInput("tensor dimensions overflow".into()))?;
        if n != data.len() {
            return Err(Error::shape("tensor payload", n, data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.data {
            TensorData::F32(_) => DTYPE_F32,
            TensorData::U8(_) => DTYPE_U8,
        });
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format { offset: 0, reason: format!("bad magic {magic:?}") });
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format { offset: 4, reason: format!("unsupported version {version}") });
        }
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 && dtype != DTYPE_U8 {
            return Err(Error::Format { offset: 6, reason: format!("unknown dtype {dtype}") });
        }
        let ndim = r.take(1, "ndim")?[0];
        if !(1..=4).contains(&ndim) {
            return Err(Error::Format { offset: 7, reason: format!("ndim {ndim} not in 1..=4") });
        }
        let mut dims = Vec::with_capacity(usize::from(ndim));
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(r.take(4, "dimension")?.try_into().unwrap()) as usize);
        }
        let header_end = r.pos as u64;
        let elem = if dtype == DTYPE_F32 { 4 } else { 1 };
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(elem).map(|_| n))
            .ok_or_else(|| Error::Format { offset: header_end, reason: "dimension overflow".into() })?;
        let payload = r.take(count * elem, "payload")?;
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let data = if dtype == DTYPE_F32 {
            TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        } else {
            TensorData::U8(payload.to_vec())
        };
        Ok(Self { dims, data })
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        Self { dims: vec![img.height, img.width, 3], data: TensorData::F32(img.data.clone()) }
    }

    /// Accepts f32 data in `[0,1]` or u8 data scaled by 1/255.
    pub fn to_rgb(&self) -> Result<RgbImage> {
        let [h, w, 3] = self.dims[..] else {
            return Err(Error::InvalidInput(format!("expected H×W×3 image, found dims {:?}", self.dims)));
        };
        let data = match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&b| f32::from(b) / 255.0).collect(),
        };
        RgbImage::new(h, w, data)
    }

    pub fn from_logits(map: &LogitMap) -> Self {
        Self {
            dims: vec![map.height, map.width, map.classes],
            data: TensorData::F32(map.values.iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn to_class_tensor(&self) -> Result<ClassTensor> {
        let (TensorData::F32(v), [h, w, c]) = (&self.data, &self.dims[..]) else {
            return Err(Error::InvalidInput(format!("expected f32 H×W×C tensor, found dims {:?}", self.dims)));
        };
        ClassTensor::new(*h, *w, *c, v.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn from_labels(map: &LabelMap) -> Self {
        Self { dims: vec![map.height, map.width], data: TensorData::U8(map.data.clone()) }
    }

    pub fn to_labels(&self) -> Result<LabelMap> {
        let (TensorData::U8(v), [h, w]) = (&self.data, &self.dims[..]) else {
            return Err(Error::InvalidInput(format!("expected u8 H×W tensor, found dims {:?}", self.dims)));
        };
        LabelMap::new(*h, *w, v.clone())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            reason: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, tensor.to_bytes())?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::from_bytes(&fs::read(path)?)
}

pub fn write_pgm(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend_from_slice(&map.data);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    parse_pgm(&fs::read(path)?)
}

fn parse_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format { offset: pos as u64, reason: "truncated PGM header".into() });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0].1 != "P5" {
        return Err(Error::Format { offset: 0, reason: format!("not a binary PGM: {}", fields[0].1) });
    }
    let num = |i: usize| -> Result<usize> {
        fields[i].1.parse().map_err(|_| Error::Format {
            offset: fields[i].0 as u64,
            reason: format!("bad header field {:?}", fields[i].1),
        })
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::Format { offset: fields[3].0 as u64, reason: format!("maxval {maxval}, expected 255") });
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format { offset: fields[1].0 as u64, reason: "dimension overflow".into() })?;
    if bytes.len() < pos || bytes.len() - pos < n {
        return Err(Error::Format { offset: bytes.len() as u64, reason: "truncated PGM raster".into() });
    }
    let data = bytes[pos..pos + n].to_vec();
    if let Some(i) = data.iter().position(|&v| v != IGNORE && usize::from(v) >= NUM_TISSUE_CLASSES) {
        return Err(Error::Format { offset: (pos + i) as u64, reason: format!("label value {}", data[i]) });
    }
    LabelMap::new(height, width, data)
}
