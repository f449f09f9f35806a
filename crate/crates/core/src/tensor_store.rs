//! Dense tensors and the DTF binary container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 0..8         | ASCII magic `DOODTNSR`                    |
//! | 8..12        | version, `u32` (= 1)                      |
//! | 12           | dtype code, `u8` (0 = float32, 1 = uint8) |
//! | 13           | rank, `u8` (1..=4)                        |
//! | 14..14+8r    | dimension sizes, `u64` each               |
//! | rest         | row-major payload                         |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DOODTNSR";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 4;

/// Mask label for inlier pixels.
pub const LABEL_INLIER: u8 = 0;
/// Mask label for out-of-distribution pixels.
pub const LABEL_OOD: u8 = 1;
/// Mask label for pixels excluded from evaluation.
pub const LABEL_IGNORE: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Float32,
    Uint8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Float32 => 0,
            DType::Uint8 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::Float32),
            1 => Ok(DType::Uint8),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Uint8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
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

/// An immutable row-major tensor of rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidTensor(format!(
            "rank {} outside 1..={MAX_RANK}",
            shape.len()
        )));
    }
    if let Some(d) = shape.iter().position(|&d| d == 0) {
        return Err(Error::InvalidTensor(format!("dimension {d} has size 0")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidTensor("element count overflows".into()))
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let count = validate_shape(&shape)?;
        if count != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {count} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn from_u8(shape: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(values))
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::Float32,
            TensorData::U8(_) => DType::Uint8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.len() == 0
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::InvalidTensor("expected float32, found uint8".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(Error::InvalidTensor("expected uint8, found float32".into())),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::InvalidTensor("expected float32, found uint8".into())),
        }
    }

    /// Serialize into the DTF byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let rank = self.shape.len();
        let payload = self.len() * self.dtype().size();
        let mut out = Vec::with_capacity(14 + 8 * rank + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype().code());
        out.push(rank as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Parse a DTF byte buffer, validating every header field.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        let header_err = |need: usize| Error::Truncated {
            declared: need,
            available: bytes.len(),
        };
        if bytes.len() < 14 {
            return Err(header_err(14));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dtype = DType::from_code(bytes[12])?;
        let rank = bytes[13] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::InvalidTensor(format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let dims_end = 14 + 8 * rank;
        if bytes.len() < dims_end {
            return Err(header_err(dims_end));
        }
        let mut shape = Vec::with_capacity(rank);
        for chunk in bytes[14..dims_end].chunks_exact(8) {
            let d = u64::from_le_bytes(chunk.try_into().unwrap());
            let d = usize::try_from(d)
                .map_err(|_| Error::InvalidTensor(format!("dimension {d} too large")))?;
            shape.push(d);
        }
        let count = validate_shape(&shape)?;
        let declared = count
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::InvalidTensor("payload size overflows".into()))?;
        let payload = &bytes[dims_end..];
        if payload.len() < declared {
            return Err(Error::Truncated {
                declared,
                available: payload.len(),
            });
        }
        if payload.len() > declared {
            return Err(Error::TrailingBytes(payload.len() - declared));
        }
        let data = match dtype {
            DType::Float32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::Uint8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { shape, data })
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&t.to_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DenseTensor::from_bytes(&bytes)
}

/// An `H x W x C` grid of feature vectors, one per image patch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidTensor("feature map dimensions must be >= 1".into()));
        }
        if values.len() != height * width * channels {
            return Err(Error::shape(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite feature value at flat index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_vectors(&self) -> usize {
        self.height * self.width
    }

    /// Row-major `[H*W, C]` view of the vectors.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn vector(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.channels)
    }

    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::from_f32(
            vec![self.height, self.width, self.channels],
            self.values.clone(),
        )
        .expect("feature map dimensions are validated on construction")
    }

    pub fn from_tensor(t: DenseTensor) -> Result<Self> {
        let shape = t.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(format!(
                "feature map must be rank 3 [H, W, C], got shape {shape:?}"
            )));
        }
        Self::new(shape[0], shape[1], shape[2], t.into_f32()?)
    }
}

/// Per-pixel OoD labels: 0 inlier, 1 OoD, 255 ignore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OodMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl OodMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} with {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| !matches!(l, LABEL_INLIER | LABEL_OOD | LABEL_IGNORE))
        {
            return Err(Error::Data(format!("mask label {bad} not in {{0, 1, 255}}")));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::from_u8(vec![self.height, self.width], self.labels.clone())
            .expect("mask dimensions are validated on construction")
    }

    /// Accepts `[H, W]` or `[H, W, 1]` uint8 tensors.
    pub fn from_tensor(t: &DenseTensor) -> Result<Self> {
        let shape = t.shape();
        let (h, w) = match shape {
            [h, w] | [h, w, 1] => (*h, *w),
            _ => {
                return Err(Error::shape(format!(
                    "mask must be [H, W] or [H, W, 1], got {shape:?}"
                )))
            }
        };
        Self::new(h, w, t.as_u8()?.to_vec())
    }
}
