use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CadError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-pixel features: intensity, normalized column, normalized row, bias.
pub const NUM_FEATURES: usize = 4;

/// Per-class linear model over per-pixel features. Stands in for a
/// segmentation network at desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPredictor<T> {
    num_classes: usize,
    /// Row-major `num_classes x NUM_FEATURES`.
    weights: Vec<T>,
}

fn pixel_features<T: Scalar>(image: &Tensor<T>, y: usize, x: usize) -> [T; NUM_FEATURES] {
    let (h, w) = (image.height(), image.width());
    let norm = |v: usize, n: usize| {
        if n > 1 {
            T::from_count(v) / T::from_count(n - 1)
        } else {
            T::zero()
        }
    };
    [image.at2(y, x), norm(x, w), norm(y, h), T::one()]
}

impl<T: Scalar> ToyPredictor<T> {
    pub fn new(num_classes: usize, weights: Vec<T>) -> Result<Self> {
        if num_classes < 2 {
            return Err(CadError::InvalidClassCount(num_classes));
        }
        if weights.len() != num_classes * NUM_FEATURES {
            return Err(CadError::ShapeMismatch {
                expected: vec![num_classes, NUM_FEATURES],
                actual: vec![weights.len()],
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(CadError::InvalidInput("non-finite predictor weight".into()));
        }
        Ok(Self { num_classes, weights })
    }

    /// Gaussian-initialized weights with standard deviation `scale`.
    pub fn random(num_classes: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, scale).map_err(|e| CadError::Config(e.to_string()))?;
        let weights = (0..num_classes * NUM_FEATURES)
            .map(|_| T::of(normal.sample(rng)))
            .collect();
        Self::new(num_classes, weights)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// `K x H x W` logits for an `H x W` image.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = image.hw()?;
        let plane = h * w;
        let mut out = vec![T::zero(); self.num_classes * plane];
        for y in 0..h {
            for x in 0..w {
                let f = pixel_features(image, y, x);
                for k in 0..self.num_classes {
                    let wk = &self.weights[k * NUM_FEATURES..(k + 1) * NUM_FEATURES];
                    out[k * plane + y * w + x] = wk.iter().zip(&f).map(|(&a, &b)| a * b).sum();
                }
            }
        }
        Ok(Tensor::from_parts_unchecked(vec![self.num_classes, h, w], out))
    }

    /// Accumulates `d loss / d weights` given `d loss / d logits` for `image`.
    pub fn accumulate_gradient(&self, image: &Tensor<T>, grad_logits: &Tensor<T>, acc: &mut [T]) -> Result<()> {
        let (h, w) = image.hw()?;
        let expected = [self.num_classes, h, w];
        if grad_logits.shape() != expected {
            return Err(CadError::ShapeMismatch {
                expected: expected.to_vec(),
                actual: grad_logits.shape().to_vec(),
            });
        }
        if acc.len() != self.weights.len() {
            return Err(CadError::ShapeMismatch {
                expected: vec![self.weights.len()],
                actual: vec![acc.len()],
            });
        }
        let plane = h * w;
        for y in 0..h {
            for x in 0..w {
                let f = pixel_features(image, y, x);
                for k in 0..self.num_classes {
                    let g = grad_logits.data()[k * plane + y * w + x];
                    for (j, &fj) in f.iter().enumerate() {
                        acc[k * NUM_FEATURES + j] += g * fj;
                    }
                }
            }
        }
        Ok(())
    }

    /// Plain gradient descent step.
    pub fn descend(&mut self, grad: &[T], learning_rate: T) {
        for (w, &g) in self.weights.iter_mut().zip(grad) {
            *w -= learning_rate * g;
        }
    }
}

/// Teacher update: `teacher <- decay * teacher + (1 - decay) * mean(students)`.
pub fn ema_update<T: Scalar>(
    teacher: &ToyPredictor<T>,
    student_a: &ToyPredictor<T>,
    student_b: &ToyPredictor<T>,
    decay: T,
) -> Result<ToyPredictor<T>> {
    if !(decay >= T::zero() && decay <= T::one()) {
        return Err(CadError::Config(format!("EMA decay {decay} outside [0, 1]")));
    }
    for s in [student_a, student_b] {
        if s.weights.len() != teacher.weights.len() {
            return Err(CadError::ShapeMismatch {
                expected: vec![teacher.num_classes, NUM_FEATURES],
                actual: vec![s.num_classes, NUM_FEATURES],
            });
        }
    }
    let half = T::of(0.5);
    let weights = teacher
        .weights
        .iter()
        .zip(&student_a.weights)
        .zip(&student_b.weights)
        .map(|((&t, &a), &b)| decay * t + (T::one() - decay) * (a + b) * half)
        .collect();
    Ok(ToyPredictor {
        num_classes: teacher.num_classes,
        weights,
    })
}
