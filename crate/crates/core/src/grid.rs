//! Per-pixel and per-patch confidence maps.
//!
//! Logits are turned into class probabilities with a numerically stable
//! softmax, each pixel's confidence is its largest class probability, and the
//! image is partitioned into an exact `grid_rows x grid_cols` lattice of
//! equally sized patches whose mean confidences are min-max normalized.

use crate::error::{CadError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tolerance on per-pixel channel sums when validating probabilities.
pub const PROB_SUM_TOLERANCE: f64 = 1e-4;

/// Patch lattice geometry. Image dims must be exact multiples of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    grid_rows: usize,
    grid_cols: usize,
    image_h: usize,
    image_w: usize,
}

impl GridSpec {
    pub fn new(grid_rows: usize, grid_cols: usize, image_h: usize, image_w: usize) -> Result<Self> {
        if grid_rows == 0 || grid_cols == 0 || image_h == 0 || image_w == 0 {
            return Err(CadError::GridMismatch(format!(
                "grid {grid_rows}x{grid_cols} and image {image_h}x{image_w} must be positive"
            )));
        }
        if !image_h.is_multiple_of(grid_rows) || !image_w.is_multiple_of(grid_cols) {
            return Err(CadError::GridMismatch(format!(
                "image {image_h}x{image_w} is not divisible into a {grid_rows}x{grid_cols} grid"
            )));
        }
        Ok(Self {
            grid_rows,
            grid_cols,
            image_h,
            image_w,
        })
    }

    /// Square `n x n` grid over an `image_h x image_w` image.
    pub fn square(n: usize, image_h: usize, image_w: usize) -> Result<Self> {
        Self::new(n, n, image_h, image_w)
    }

    pub fn grid_rows(&self) -> usize {
        self.grid_rows
    }

    pub fn grid_cols(&self) -> usize {
        self.grid_cols
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    pub fn image_h(&self) -> usize {
        self.image_h
    }

    pub fn image_w(&self) -> usize {
        self.image_w
    }

    pub fn patch_h(&self) -> usize {
        self.image_h / self.grid_rows
    }

    pub fn patch_w(&self) -> usize {
        self.image_w / self.grid_cols
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Pixel rows and columns covered by patch `(row, col)`.
    pub fn patch_pixels(&self, row: usize, col: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (ph, pw) = (self.patch_h(), self.patch_w());
        (row * ph..(row + 1) * ph, col * pw..(col + 1) * pw)
    }

    pub(crate) fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        if h != self.image_h || w != self.image_w {
            return Err(CadError::GridMismatch(format!(
                "tensor is {h}x{w} but grid expects {}x{}",
                self.image_h, self.image_w
            )));
        }
        Ok(())
    }
}

/// Patch confidences, raw and (once normalized) min-max scaled, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    spec: GridSpec,
    raw: Vec<T>,
    normalized: Option<Vec<T>>,
}

impl<T: Scalar> PatchGrid<T> {
    /// Grid with raw confidences only.
    pub fn from_raw(spec: GridSpec, raw: Vec<T>) -> Result<Self> {
        Self::check_len(&spec, raw.len())?;
        Ok(Self {
            spec,
            raw,
            normalized: None,
        })
    }

    /// Grid whose normalized confidences are supplied directly. The raw
    /// values are set to the same numbers.
    pub fn from_normalized(spec: GridSpec, normalized: Vec<T>) -> Result<Self> {
        Self::check_len(&spec, normalized.len())?;
        Ok(Self {
            spec,
            raw: normalized.clone(),
            normalized: Some(normalized),
        })
    }

    fn check_len(spec: &GridSpec, len: usize) -> Result<()> {
        if len != spec.num_patches() {
            return Err(CadError::GridMismatch(format!(
                "expected {} patch values, got {len}",
                spec.num_patches()
            )));
        }
        Ok(())
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dims(&self) -> (usize, usize) {
        self.spec.grid_dims()
    }

    pub fn raw(&self) -> &[T] {
        &self.raw
    }

    pub fn raw_at(&self, row: usize, col: usize) -> T {
        self.raw[row * self.spec.grid_cols + col]
    }

    pub fn normalized(&self) -> Option<&[T]> {
        self.normalized.as_deref()
    }

    pub fn try_normalized(&self) -> Result<&[T]> {
        self.normalized().ok_or(CadError::NotNormalized)
    }
}

/// Channel-wise softmax of `C x H x W` logits with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = logits.chw()?;
    if c < 2 {
        return Err(CadError::InvalidClassCount(c));
    }
    let plane = h * w;
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    for px in 0..plane {
        let mut max = src[px];
        for k in 1..c {
            max = max.max(src[k * plane + px]);
        }
        let mut sum = T::zero();
        for k in 0..c {
            let e = (src[k * plane + px] - max).exp();
            out[k * plane + px] = e;
            sum += e;
        }
        for k in 0..c {
            out[k * plane + px] /= sum;
        }
    }
    Ok(Tensor::from_parts_unchecked(logits.shape().to_vec(), out))
}

/// Checks that every pixel's channel values form a distribution.
pub fn validate_probabilities<T: Scalar>(probs: &Tensor<T>) -> Result<()> {
    let (c, h, w) = probs.chw()?;
    let plane = h * w;
    let data = probs.data();
    for px in 0..plane {
        let mut sum = 0.0;
        for k in 0..c {
            let v = data[k * plane + px].as_f64();
            if v < 0.0 {
                return Err(CadError::NotADistribution(format!(
                    "negative probability {v} at pixel {px}, class {k}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(CadError::NotADistribution(format!("channel sum {sum} at pixel {px}")));
        }
    }
    Ok(())
}

/// Per-pixel confidence: the maximum class probability, `H x W`.
pub fn pixel_confidence<T: Scalar>(probs: &Tensor<T>) -> Result<Tensor<T>> {
    validate_probabilities(probs)?;
    let (c, h, w) = probs.chw()?;
    let plane = h * w;
    let data = probs.data();
    let conf = (0..plane)
        .map(|px| (1..c).fold(data[px], |m, k| m.max(data[k * plane + px])))
        .collect();
    Ok(Tensor::from_parts_unchecked(vec![h, w], conf))
}

/// Mean pixel confidence inside each patch. The result is not yet normalized.
pub fn patch_confidence<T: Scalar>(conf: &Tensor<T>, spec: GridSpec) -> Result<PatchGrid<T>> {
    let (h, w) = conf.hw()?;
    spec.check_spatial(h, w)?;
    let count = T::from_count(spec.patch_h() * spec.patch_w());
    let mut raw = Vec::with_capacity(spec.num_patches());
    for r in 0..spec.grid_rows() {
        for c in 0..spec.grid_cols() {
            let (rows, cols) = spec.patch_pixels(r, c);
            let mut sum = T::zero();
            for y in rows {
                for x in cols.clone() {
                    sum += conf.at2(y, x);
                }
            }
            raw.push(sum / count);
        }
    }
    PatchGrid::from_raw(spec, raw)
}

/// Min-max normalization of the raw patch confidences. A constant grid maps
/// to all zeros so the global minimum always passes any non-negative
/// threshold.
pub fn normalize<T: Scalar>(grid: PatchGrid<T>) -> PatchGrid<T> {
    let (min, max) = grid
        .raw
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = max - min;
    let normalized = if range > T::zero() {
        grid.raw.iter().map(|&v| (v - min) / range).collect()
    } else {
        vec![T::zero(); grid.raw.len()]
    };
    PatchGrid {
        normalized: Some(normalized),
        ..grid
    }
}

/// Logits to normalized patch grid in one pass.
pub fn confidence_grid<T: Scalar>(logits: &Tensor<T>, spec: GridSpec) -> Result<PatchGrid<T>> {
    let probs = softmax(logits)?;
    let conf = pixel_confidence(&probs)?;
    Ok(normalize(patch_confidence(&conf, spec)?))
}
