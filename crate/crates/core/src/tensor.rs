//! Dense row-major tensors and integer label maps.

use crate::error::{CadError, Result};
use crate::scalar::Scalar;

/// Dense row-major array with an explicit shape.
///
/// Logits and probabilities are `C x H x W`, images and confidence maps are
/// `H x W`. All values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(CadError::InvalidInput(format!(
                "shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CadError::InvalidInput(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CadError::InvalidInput(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![T::zero(); numel])
    }

    /// Builds a tensor from a function of the flat row-major index.
    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, (0..numel).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Height of the trailing spatial plane.
    pub fn height(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[self.shape.len() - 2]
        } else {
            1
        }
    }

    /// Width of the trailing spatial plane.
    pub fn width(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    /// Number of stacked `H x W` planes (product of the leading dims).
    pub fn planes(&self) -> usize {
        self.data.len() / (self.height() * self.width())
    }

    /// Shape as `(C, H, W)`, rejecting anything that is not rank 3.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(CadError::InvalidInput(format!(
                "expected a C x H x W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Shape as `(H, W)`, rejecting anything that is not rank 2.
    pub fn hw(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [h, w] => Ok((h, w)),
            _ => Err(CadError::InvalidInput(format!(
                "expected an H x W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(CadError::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Value at `(channel, row, col)` of a rank-3 tensor.
    #[inline]
    pub fn at3(&self, c: usize, r: usize, col: usize) -> T {
        let (h, w) = (self.height(), self.width());
        self.data[(c * h + r) * w + col]
    }

    /// Value at `(row, col)` of a rank-2 tensor.
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.width() + c]
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    /// Converts element type, e.g. `f32` file payloads into `f64` tensors.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// `H x W` map of integer class ids in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CadError::InvalidInput(format!(
                "label map dims must be positive, got {height}x{width}"
            )));
        }
        if num_classes == 0 {
            return Err(CadError::InvalidClassCount(num_classes));
        }
        if labels.len() != height * width {
            return Err(CadError::ShapeMismatch {
                expected: vec![height, width],
                actual: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(CadError::InvalidClassId {
                class_id: bad,
                num_classes,
            });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    /// Builds a label map from a boolean foreground mask (class 1 on true).
    pub fn from_mask(height: usize, width: usize, mask: &[bool]) -> Result<Self> {
        Self::new(height, width, 2, mask.iter().map(|&m| usize::from(m)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> usize {
        self.labels[r * self.width + c]
    }

    /// Boolean mask of pixels carrying `class_id`.
    pub fn mask(&self, class_id: usize) -> Result<Vec<bool>> {
        if class_id >= self.num_classes {
            return Err(CadError::InvalidClassId {
                class_id,
                num_classes: self.num_classes,
            });
        }
        Ok(self.labels.iter().map(|&l| l == class_id).collect())
    }

    pub(crate) fn with_labels(&self, labels: Vec<usize>) -> Self {
        debug_assert_eq!(labels.len(), self.labels.len());
        Self { labels, ..*self }
    }

    pub(crate) fn from_parts_unchecked(height: usize, width: usize, num_classes: usize, labels: Vec<usize>) -> Self {
        Self {
            height,
            width,
            num_classes,
            labels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        let err = Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, CadError::InvalidInput(_)));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::<f64>::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn rejects_zero_dim() {
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn spatial_accessors() {
        let t = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64).unwrap();
        assert_eq!((t.height(), t.width(), t.planes()), (3, 4, 2));
        assert_eq!(t.at3(1, 2, 3), 23.0);
        assert_eq!(t.chw().unwrap(), (2, 3, 4));
        assert!(t.hw().is_err());
    }

    #[test]
    fn label_map_validates_class_ids() {
        let err = LabelMap::new(1, 2, 2, vec![0, 2]).unwrap_err();
        assert_eq!(
            err,
            CadError::InvalidClassId {
                class_id: 2,
                num_classes: 2
            }
        );
    }
}
