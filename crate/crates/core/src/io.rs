//! CADT tensor container and PGM mask rasters.
//!
//! A CADT file is the 4-byte magic `CADT`, a little-endian `u32` header
//! length, a UTF-8 JSON header `{"dtype":"f32"|"i32","shape":[..]}`, and the
//! row-major little-endian payload (4 bytes per value).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CadError, Result};
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

pub const MAGIC: &[u8; 4] = b"CADT";
const MAX_HEADER_LEN: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    dtype: DType,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::I32(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::I32(_) => DType::I32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    shape: Vec<usize>,
    payload: Payload,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, payload: Payload) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(CadError::Format(format!("invalid shape {shape:?}")));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CadError::Format(format!("shape {shape:?} overflows")))?;
        if numel != payload.len() {
            return Err(CadError::Format(format!(
                "shape {shape:?} needs {numel} values, payload has {}",
                payload.len()
            )));
        }
        Ok(Self { shape, payload })
    }

    /// Stores a tensor as `f32`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        Self {
            shape: t.shape().to_vec(),
            payload: Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
        }
    }

    /// Stores a label map as `i32`, shape `[H, W]`.
    pub fn from_label_map(l: &LabelMap) -> Self {
        Self {
            shape: vec![l.height(), l.width()],
            payload: Payload::I32(l.labels().iter().map(|&v| v as i32).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.payload.dtype()
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        match &self.payload {
            Payload::F32(v) => Tensor::new(self.shape.clone(), v.iter().map(|&x| T::of(x as f64)).collect()),
            Payload::I32(_) => Err(CadError::Format("expected an f32 tensor, found i32".into())),
        }
    }

    /// Interprets an `i32` `[H, W]` file as a label map. The class count is
    /// `num_classes` when given, else one more than the largest label.
    pub fn to_label_map(&self, num_classes: Option<usize>) -> Result<LabelMap> {
        let Payload::I32(v) = &self.payload else {
            return Err(CadError::Format("expected an i32 label map, found f32".into()));
        };
        let [h, w] = *self.shape.as_slice() else {
            return Err(CadError::ShapeMismatch {
                expected: vec![0, 0],
                actual: self.shape.clone(),
            });
        };
        if let Some(bad) = v.iter().find(|&&x| x < 0) {
            return Err(CadError::Format(format!("negative label {bad}")));
        }
        let labels: Vec<usize> = v.iter().map(|&x| x as usize).collect();
        let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1).max(2));
        LabelMap::new(h, w, k, labels)
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_string(&Header {
            dtype: self.dtype(),
            shape: self.shape.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + 4 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(CadError::Format("missing CADT magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if header_len > MAX_HEADER_LEN || bytes.len() < 8 + header_len {
            return Err(CadError::Format(format!("bad header length {header_len}")));
        }
        let header_text = std::str::from_utf8(&bytes[8..8 + header_len])
            .map_err(|e| CadError::Format(format!("header is not UTF-8: {e}")))?;
        let header: Header =
            serde_json::from_str(header_text).map_err(|e| CadError::Format(format!("bad header: {e}")))?;
        let body = &bytes[8 + header_len..];
        let numel: usize = header.shape.iter().product();
        if body.len() != numel.saturating_mul(4) {
            return Err(CadError::Format(format!(
                "payload is {} bytes, shape {:?} needs {}",
                body.len(),
                header.shape,
                numel * 4
            )));
        }
        let words = body.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let payload = match header.dtype {
            DType::F32 => Payload::F32(words.map(f32::from_le_bytes).collect()),
            DType::I32 => Payload::I32(words.map(i32::from_le_bytes).collect()),
        };
        Self::new(header.shape, payload)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| CadError::Io(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| CadError::Io(format!("{}: {e}", path.display())))
    }
}

/// Binary (P5) 8-bit PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(CadError::ShapeMismatch {
            expected: vec![height, width],
            actual: vec![pixels.len()],
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Parses a P5 PGM written by [`encode_pgm`]; returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CadError::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(CadError::Format("expected an 8-bit P5 PGM".into()));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| CadError::Format(format!("PGM dim {s:?}: {e}")))
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != w * h {
        return Err(CadError::Format(format!(
            "PGM raster has {} bytes, expected {}",
            raster.len(),
            w * h
        )));
    }
    Ok((w, h, raster.to_vec()))
}

/// Writes a boolean mask as a PGM with 255 on set pixels.
pub fn write_mask_pgm(path: impl AsRef<Path>, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let pixels: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let path = path.as_ref();
    fs::write(path, encode_pgm(width, height, &pixels)?).map_err(|e| CadError::Io(format!("{}: {e}", path.display())))
}
