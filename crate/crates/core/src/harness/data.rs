use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CadError, Result};
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

/// Grid size the synthetic images must divide into.
pub const DEFAULT_GRID: usize = 16;

const BACKGROUND: f64 = 0.2;
const FOREGROUND: f64 = 0.8;
const PIXEL_NOISE: f64 = 0.08;

const STRONG_NOISE: f64 = 0.15;
const STRONG_SCALE: (f64, f64) = (0.7, 1.3);

/// One synthetic image with its disk mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub label: LabelMap,
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub labeled: Vec<(Tensor<T>, LabelMap)>,
    pub unlabeled: Vec<Tensor<T>>,
}

impl<T> Dataset<T> {
    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty() && self.unlabeled.is_empty()
    }
}

/// `count` noisy images of one bright disk each, with random centre and
/// radius in `[min(h, w) / 8, min(h, w) / 4]`. Deterministic in `seed`.
pub fn synth_samples<T: Scalar>(seed: u64, count: usize, height: usize, width: usize) -> Result<Vec<Sample<T>>> {
    if height == 0 || width == 0 || !height.is_multiple_of(DEFAULT_GRID) || !width.is_multiple_of(DEFAULT_GRID) {
        return Err(CadError::Config(format!(
            "synthetic images must be positive multiples of {DEFAULT_GRID}, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    let side = height.min(width) as f64;
    (0..count)
        .map(|_| {
            let radius = rng.random_range(side / 8.0..=side / 4.0);
            let cy = rng.random_range(radius..=height as f64 - 1.0 - radius);
            let cx = rng.random_range(radius..=width as f64 - 1.0 - radius);
            let mut pixels = Vec::with_capacity(height * width);
            let mut labels = Vec::with_capacity(height * width);
            for y in 0..height {
                for x in 0..width {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let inside = dy * dy + dx * dx <= radius * radius;
                    let base = if inside { FOREGROUND } else { BACKGROUND };
                    pixels.push(T::of(base + noise.sample(&mut rng)));
                    labels.push(usize::from(inside));
                }
            }
            Ok(Sample {
                image: Tensor::new(vec![height, width], pixels)?,
                label: LabelMap::new(height, width, 2, labels)?,
                center: (cy, cx),
                radius,
            })
        })
        .collect()
}

/// Synthetic dataset: the first `labeled` samples keep their masks, the
/// remaining `unlabeled` drop them.
pub fn synth_dataset<T: Scalar>(
    seed: u64,
    labeled: usize,
    unlabeled: usize,
    height: usize,
    width: usize,
) -> Result<Dataset<T>> {
    let samples = synth_samples(seed, labeled + unlabeled, height, width)?;
    let mut it = samples.into_iter();
    let labeled = it.by_ref().take(labeled).map(|s| (s.image, s.label)).collect();
    let unlabeled = it.map(|s| s.image).collect();
    Ok(Dataset { labeled, unlabeled })
}

/// Weak view: the image itself.
pub fn weak_view<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    image.clone()
}

/// Strong view: random global intensity scaling plus additive Gaussian noise.
pub fn strong_view<T: Scalar>(image: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
    let scale = T::of(rng.random_range(STRONG_SCALE.0..=STRONG_SCALE.1));
    let noise = Normal::new(0.0, STRONG_NOISE).expect("valid sigma");
    let data = image
        .data()
        .iter()
        .map(|&v| v * scale + T::of(noise.sample(rng)))
        .collect();
    Tensor::from_parts_unchecked(image.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let a = synth_dataset::<f64>(7, 2, 3, 32, 32).unwrap();
        let b = synth_dataset::<f64>(7, 2, 3, 32, 32).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset::<f64>(8, 2, 3, 32, 32).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_dataset() {
        let d = synth_dataset::<f32>(1, 0, 0, 16, 16).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn dims_must_divide_into_the_grid() {
        assert!(synth_samples::<f64>(1, 1, 60, 64).is_err());
    }

    #[test]
    fn disk_area_matches_analytic() {
        for s in synth_samples::<f64>(3, 20, 64, 64).unwrap() {
            let count = s.label.labels().iter().filter(|&&l| l == 1).count() as f64;
            let area = std::f64::consts::PI * s.radius * s.radius;
            assert!((count - area).abs() / area < 0.1, "count {count} vs area {area}");
        }
    }

    #[test]
    fn disk_is_brighter_than_background() {
        let s = &synth_samples::<f64>(5, 1, 64, 64).unwrap()[0];
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for (v, &l) in s.image.data().iter().zip(s.label.labels()) {
            if l == 1 {
                fg += v;
                nf += 1.0;
            } else {
                bg += v;
                nb += 1.0;
            }
        }
        assert!(fg / nf > bg / nb + 0.4);
    }

    #[test]
    fn strong_view_is_seeded() {
        let s = &synth_samples::<f64>(5, 1, 16, 16).unwrap()[0];
        let a = strong_view(&s.image, &mut ChaCha8Rng::seed_from_u64(1));
        let b = strong_view(&s.image, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_ne!(a, s.image);
        assert_eq!(weak_view(&s.image), s.image);
    }
}
