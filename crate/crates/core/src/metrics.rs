//! Overlap and boundary-distance metrics on label maps, in pixel units.
//!
//! Boundary pixels are mask pixels with at least one 4-neighbour outside the
//! mask (the image border counts as outside). Surface distances are pooled
//! from both directions: every boundary pixel of the prediction to its
//! nearest truth boundary pixel, and vice versa.

use serde::{Deserialize, Serialize};

use crate::error::{CadError, Result};
use crate::tensor::LabelMap;

fn class_masks(pred: &LabelMap, truth: &LabelMap, class_id: usize) -> Result<(Vec<bool>, Vec<bool>)> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(CadError::ShapeMismatch {
            expected: vec![truth.height(), truth.width()],
            actual: vec![pred.height(), pred.width()],
        });
    }
    Ok((pred.mask(class_id)?, truth.mask(class_id)?))
}

fn overlap_counts(a: &[bool], b: &[bool]) -> (usize, usize, usize) {
    let mut inter = 0;
    let (mut na, mut nb) = (0, 0);
    for (&x, &y) in a.iter().zip(b) {
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    (inter, na, nb)
}

/// Dice similarity `2|A n B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dsc(pred: &LabelMap, truth: &LabelMap, class_id: usize) -> Result<f64> {
    let (a, b) = class_masks(pred, truth, class_id)?;
    let (inter, na, nb) = overlap_counts(&a, &b);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Jaccard index `|A n B| / |A u B|`; 1 when both masks are empty.
pub fn jaccard(pred: &LabelMap, truth: &LabelMap, class_id: usize) -> Result<f64> {
    let (a, b) = class_masks(pred, truth, class_id)?;
    let (inter, na, nb) = overlap_counts(&a, &b);
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Boundary pixel coordinates `(row, col)` of a mask.
pub fn boundary_pixels(mask: &[bool], height: usize, width: usize) -> Vec<(usize, usize)> {
    let inside = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width && mask[r as usize * width + c as usize]
    };
    let mut out = Vec::new();
    for r in 0..height {
        for c in 0..width {
            if !mask[r * width + c] {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            if !(inside(ri - 1, ci) && inside(ri + 1, ci) && inside(ri, ci - 1) && inside(ri, ci + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

fn nearest<'a>(from: &'a [(usize, usize)], to: &'a [(usize, usize)]) -> impl Iterator<Item = f64> + 'a {
    from.iter().map(move |&(r, c)| {
        to.iter()
            .map(|&(r2, c2)| {
                let dr = r as f64 - r2 as f64;
                let dc = c as f64 - c2 as f64;
                dr * dr + dc * dc
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    })
}

/// Pooled directed boundary distances in both directions (brute force).
pub fn surface_distances(pred: &LabelMap, truth: &LabelMap, class_id: usize) -> Result<Vec<f64>> {
    let (a, b) = class_masks(pred, truth, class_id)?;
    let (h, w) = (pred.height(), pred.width());
    let ba = boundary_pixels(&a, h, w);
    let bb = boundary_pixels(&b, h, w);
    if ba.is_empty() || bb.is_empty() {
        let which = if ba.is_empty() { "prediction" } else { "truth" };
        return Err(CadError::UndefinedMetric(format!(
            "{which} mask for class {class_id} is empty"
        )));
    }
    let mut d: Vec<f64> = nearest(&ba, &bb).chain(nearest(&bb, &ba)).collect();
    d.sort_by(f64::total_cmp);
    Ok(d)
}

/// Percentile `q` in `[0, 100]` of sorted values, linearly interpolated
/// between order statistics.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// 95th-percentile symmetric Hausdorff distance.
pub fn hd95(pred: &LabelMap, truth: &LabelMap, class_id: usize) -> Result<f64> {
    let d = surface_distances(pred, truth, class_id)?;
    percentile_sorted(&d, 95.0).ok_or_else(|| CadError::UndefinedMetric("no boundary distances".into()))
}

/// Average symmetric surface distance.
pub fn asd(pred: &LabelMap, truth: &LabelMap, class_id: usize) -> Result<f64> {
    let d = surface_distances(pred, truth, class_id)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// All four metrics for one class. Distance metrics are `None` when either
/// mask is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub class_id: usize,
    pub dsc: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

pub fn evaluate(pred: &LabelMap, truth: &LabelMap, class_id: usize) -> Result<MetricReport> {
    let dsc = dsc(pred, truth, class_id)?;
    let jaccard = jaccard(pred, truth, class_id)?;
    let (hd95, asd) = match surface_distances(pred, truth, class_id) {
        Ok(d) => (
            percentile_sorted(&d, 95.0),
            Some(d.iter().sum::<f64>() / d.len() as f64),
        ),
        Err(CadError::UndefinedMetric(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        class_id,
        dsc,
        jaccard,
        hd95,
        asd,
    })
}
