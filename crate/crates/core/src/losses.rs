//! Segmentation losses and their gradients with respect to logits.
//!
//! Dice is computed as one smoothed ratio over all classes and pixels jointly;
//! cross entropy is averaged over pixels. Cross pseudo supervision compares a
//! prediction against the other model's argmax, which is a constant target.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CadError, Result};
use crate::grid::{softmax, validate_probabilities};
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

/// Smoothing added to the Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Added inside the logarithm of the cross entropy.
pub const CE_LOG_EPS: f64 = 1e-12;
/// Floor applied to `q` inside KL divergence.
pub const KL_FLOOR: f64 = 1e-12;

/// One-hot `K x H x W` encoding of a label map.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotLabels<T>(Tensor<T>);

impl<T: Scalar> OneHotLabels<T> {
    /// Wraps a tensor after checking that every pixel has exactly one active class.
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let (k, h, w) = tensor.chw()?;
        let plane = h * w;
        for px in 0..plane {
            let mut ones = 0;
            for c in 0..k {
                let v = tensor.data()[c * plane + px];
                if v == T::one() {
                    ones += 1;
                } else if v != T::zero() {
                    return Err(CadError::InvalidInput(format!("one-hot entry {v} at pixel {px}")));
                }
            }
            if ones != 1 {
                return Err(CadError::InvalidInput(format!("pixel {px} has {ones} active classes")));
            }
        }
        Ok(Self(tensor))
    }

    pub fn from_label_map(labels: &LabelMap) -> Self {
        let (k, h, w) = (labels.num_classes(), labels.height(), labels.width());
        let plane = h * w;
        let mut data = vec![T::zero(); k * plane];
        for (px, &l) in labels.labels().iter().enumerate() {
            data[l * plane + px] = T::one();
        }
        Self(Tensor::from_parts_unchecked(vec![k, h, w], data))
    }

    /// One-hot of the per-pixel argmax of `scores` (logits or probabilities).
    pub fn from_argmax(scores: &Tensor<T>) -> Result<Self> {
        Ok(Self::from_label_map(&argmax_labels(scores)?))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Per-pixel argmax over channels; ties resolve to the lowest class index.
pub fn argmax_labels<T: Scalar>(scores: &Tensor<T>) -> Result<LabelMap> {
    let (k, h, w) = scores.chw()?;
    let plane = h * w;
    let data = scores.data();
    let labels = (0..plane)
        .map(|px| {
            let mut best = 0;
            for c in 1..k {
                if data[c * plane + px] > data[best * plane + px] {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(LabelMap::from_parts_unchecked(h, w, k, labels))
}

fn check_pair<T: Scalar>(pred: &Tensor<T>, target: &OneHotLabels<T>) -> Result<()> {
    pred.ensure_same_shape(target.tensor())
}

/// `1 - (2 sum(t p) + eps) / (sum(t) + sum(p) + eps)` over classes and pixels.
pub fn dice_loss<T: Scalar>(pred_probs: &Tensor<T>, target: &OneHotLabels<T>) -> Result<T> {
    check_pair(pred_probs, target)?;
    validate_probabilities(pred_probs)?;
    Ok(dice_from_probs(pred_probs, target))
}

fn dice_sums<T: Scalar>(p: &Tensor<T>, t: &OneHotLabels<T>) -> (T, T) {
    let mut inter = T::zero();
    let mut total = T::zero();
    for (&pv, &tv) in p.data().iter().zip(t.tensor().data()) {
        inter += pv * tv;
        total += pv + tv;
    }
    (inter, total)
}

fn dice_from_probs<T: Scalar>(p: &Tensor<T>, t: &OneHotLabels<T>) -> T {
    let eps = T::of(DICE_SMOOTH);
    let (inter, total) = dice_sums(p, t);
    let loss = T::one() - (T::of(2.0) * inter + eps) / (total + eps);
    loss.max(T::zero())
}

/// Pixel-averaged cross entropy `-sum_c t_c ln(p_c + eps)`.
pub fn ce_loss<T: Scalar>(pred_probs: &Tensor<T>, target: &OneHotLabels<T>) -> Result<T> {
    check_pair(pred_probs, target)?;
    validate_probabilities(pred_probs)?;
    Ok(ce_from_probs(pred_probs, target))
}

fn ce_from_probs<T: Scalar>(p: &Tensor<T>, t: &OneHotLabels<T>) -> T {
    let eps = T::of(CE_LOG_EPS);
    let pixels = T::from_count(p.height() * p.width());
    let mut sum = T::zero();
    for (&pv, &tv) in p.data().iter().zip(t.tensor().data()) {
        if tv != T::zero() {
            sum -= tv * (pv + eps).ln();
        }
    }
    (sum / pixels).max(T::zero())
}

/// Dice plus cross entropy on the softmax of `pred_logits`.
pub fn mt_loss<T: Scalar>(pred_logits: &Tensor<T>, target: &OneHotLabels<T>) -> Result<T> {
    check_pair(pred_logits, target)?;
    let p = softmax(pred_logits)?;
    Ok(dice_from_probs(&p, target) + ce_from_probs(&p, target))
}

/// Dice of `softmax(a)` against the one-hot argmax of `b`.
pub fn cps_loss<T: Scalar>(pred_logits_a: &Tensor<T>, pred_logits_b: &Tensor<T>) -> Result<T> {
    pred_logits_a.ensure_same_shape(pred_logits_b)?;
    let target = OneHotLabels::from_argmax(pred_logits_b)?;
    let p = softmax(pred_logits_a)?;
    Ok(dice_from_probs(&p, &target))
}

/// Cross pseudo supervision evaluated on the displaced views. Same form as
/// [`cps_loss`]; callers pass logits computed on the displaced inputs.
pub fn cad_loss<T: Scalar>(logits_a_displaced: &Tensor<T>, logits_b_displaced: &Tensor<T>) -> Result<T> {
    cps_loss(logits_a_displaced, logits_b_displaced)
}

fn check_distribution<T: Scalar>(v: &[T], name: &str) -> Result<()> {
    if v.is_empty() {
        return Err(CadError::NotADistribution(format!("{name} is empty")));
    }
    if v.iter().any(|&x| !x.is_finite() || x < T::zero()) {
        return Err(CadError::NotADistribution(format!(
            "{name} has a negative or non-finite entry"
        )));
    }
    let sum: f64 = v.iter().map(|x| x.as_f64()).sum();
    if (sum - 1.0).abs() > crate::grid::PROB_SUM_TOLERANCE {
        return Err(CadError::NotADistribution(format!("{name} sums to {sum}")));
    }
    Ok(())
}

/// `KL(p || q) = sum_c p_c ln(p_c / q_c)`, with `0 ln 0 = 0` and `q` floored.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(CadError::ShapeMismatch {
            expected: vec![p.len()],
            actual: vec![q.len()],
        });
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked<T: Scalar>(p: &[T], q: &[T]) -> T {
    let floor = T::of(KL_FLOOR);
    let kl: T = p
        .iter()
        .zip(q)
        .filter(|(&pc, _)| pc > T::zero())
        .map(|(&pc, &qc)| pc * (pc / qc.max(floor)).ln())
        .sum();
    kl.max(T::zero())
}

/// Differentiable losses exposed to the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dice,
    Ce,
    Mt,
}

impl FromStr for LossKind {
    type Err = CadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dice" => Ok(LossKind::Dice),
            "ce" => Ok(LossKind::Ce),
            "mt" => Ok(LossKind::Mt),
            other => Err(CadError::InvalidInput(format!("unsupported loss selector {other:?}"))),
        }
    }
}

/// Loss value of `kind` for logits against a one-hot target.
pub fn loss_value<T: Scalar>(kind: LossKind, pred_logits: &Tensor<T>, target: &OneHotLabels<T>) -> Result<T> {
    check_pair(pred_logits, target)?;
    let p = softmax(pred_logits)?;
    Ok(match kind {
        LossKind::Dice => dice_from_probs(&p, target),
        LossKind::Ce => ce_from_probs(&p, target),
        LossKind::Mt => dice_from_probs(&p, target) + ce_from_probs(&p, target),
    })
}

/// d(dice)/d(probs).
fn dice_prob_grad<T: Scalar>(p: &Tensor<T>, t: &OneHotLabels<T>) -> Vec<T> {
    let eps = T::of(DICE_SMOOTH);
    let two = T::of(2.0);
    let (inter, total) = dice_sums(p, t);
    let num = two * inter + eps;
    let den = total + eps;
    let den2 = den * den;
    t.tensor()
        .data()
        .iter()
        .map(|&tv| -(two * tv * den - num) / den2)
        .collect()
}

/// d(ce)/d(probs).
fn ce_prob_grad<T: Scalar>(p: &Tensor<T>, t: &OneHotLabels<T>) -> Vec<T> {
    let eps = T::of(CE_LOG_EPS);
    let pixels = T::from_count(p.height() * p.width());
    p.data()
        .iter()
        .zip(t.tensor().data())
        .map(|(&pv, &tv)| -tv / ((pv + eps) * pixels))
        .collect()
}

/// Pulls a gradient with respect to probabilities back through the softmax:
/// `dL/dz_c = p_c (g_c - sum_k p_k g_k)` per pixel.
fn softmax_backward<T: Scalar>(p: &Tensor<T>, grad_p: &[T]) -> Tensor<T> {
    let (k, h, w) = (p.shape()[0], p.height(), p.width());
    let plane = h * w;
    let pd = p.data();
    let mut out = vec![T::zero(); pd.len()];
    for px in 0..plane {
        let mut dot = T::zero();
        for c in 0..k {
            dot += pd[c * plane + px] * grad_p[c * plane + px];
        }
        for c in 0..k {
            let i = c * plane + px;
            out[i] = pd[i] * (grad_p[i] - dot);
        }
    }
    Tensor::from_parts_unchecked(p.shape().to_vec(), out)
}

/// Analytic gradient of `kind` with respect to the logits.
pub fn loss_gradient<T: Scalar>(
    kind: LossKind,
    pred_logits: &Tensor<T>,
    target: &OneHotLabels<T>,
) -> Result<Tensor<T>> {
    check_pair(pred_logits, target)?;
    let p = softmax(pred_logits)?;
    let grad_p = match kind {
        LossKind::Dice => dice_prob_grad(&p, target),
        LossKind::Ce => ce_prob_grad(&p, target),
        LossKind::Mt => dice_prob_grad(&p, target)
            .into_iter()
            .zip(ce_prob_grad(&p, target))
            .map(|(a, b)| a + b)
            .collect(),
    };
    Ok(softmax_backward(&p, &grad_p))
}

/// Gradient of [`cps_loss`] with respect to `a`; `b`'s argmax is held fixed.
pub fn cps_gradient<T: Scalar>(pred_logits_a: &Tensor<T>, pred_logits_b: &Tensor<T>) -> Result<Tensor<T>> {
    pred_logits_a.ensure_same_shape(pred_logits_b)?;
    let target = OneHotLabels::from_argmax(pred_logits_b)?;
    loss_gradient(LossKind::Dice, pred_logits_a, &target)
}

/// The six per-iteration loss terms, paired by student.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents<T> {
    pub mt1: T,
    pub mt2: T,
    pub cps1: T,
    pub cps2: T,
    pub cad1: T,
    pub cad2: T,
}

/// All loss terms of one iteration together with their sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport<T> {
    pub l_mt1: T,
    pub l_mt2: T,
    pub l_cps1: T,
    pub l_cps2: T,
    pub l_cad1: T,
    pub l_cad2: T,
    pub l_1: T,
    pub l_2: T,
    pub l_total: T,
}

/// Sums the components into per-student and overall totals. Negative or
/// non-finite components are rejected.
pub fn total_loss<T: Scalar>(c: LossComponents<T>) -> Result<LossReport<T>> {
    let named = [
        ("mt1", c.mt1),
        ("mt2", c.mt2),
        ("cps1", c.cps1),
        ("cps2", c.cps2),
        ("cad1", c.cad1),
        ("cad2", c.cad2),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(CadError::InvalidInput(format!("loss component {name} is {v}")));
        }
        if v < T::zero() {
            return Err(CadError::NegativeLoss {
                name,
                value: v.as_f64(),
            });
        }
    }
    let l_1 = c.mt1 + c.cps1 + c.cad1;
    let l_2 = c.mt2 + c.cps2 + c.cad2;
    Ok(LossReport {
        l_mt1: c.mt1,
        l_mt2: c.mt2,
        l_cps1: c.cps1,
        l_cps2: c.cps2,
        l_cad1: c.cad1,
        l_cad2: c.cad2,
        l_1,
        l_2,
        l_total: l_1 + l_2,
    })
}
