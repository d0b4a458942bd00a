//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use cad_core::llcr::PatchCoord;
use rand::Rng;

/// Min-max normalization written out directly.
pub fn minmax(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    raw.iter()
        .map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
        .collect()
}

/// First index of the smallest value.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] < v[best] {
            best = i;
        }
    }
    best
}

/// Every patch 4-connected to `seed` through patches at or below `c_thr`.
pub fn flood_fill(conf: &[f64], rows: usize, cols: usize, seed: PatchCoord, c_thr: f64) -> BTreeSet<PatchCoord> {
    let mut out = BTreeSet::new();
    if conf[seed.0 * cols + seed.1] > c_thr {
        return out;
    }
    let mut stack = vec![seed];
    while let Some((r, c)) = stack.pop() {
        if !out.insert((r, c)) {
            continue;
        }
        let mut next = Vec::new();
        if r > 0 {
            next.push((r - 1, c));
        }
        if r + 1 < rows {
            next.push((r + 1, c));
        }
        if c > 0 {
            next.push((r, c - 1));
        }
        if c + 1 < cols {
            next.push((r, c + 1));
        }
        for (nr, nc) in next {
            if conf[nr * cols + nc] <= c_thr && !out.contains(&(nr, nc)) {
                stack.push((nr, nc));
            }
        }
    }
    out
}

/// Whether a patch set is 4-connected.
pub fn is_connected(set: &BTreeSet<PatchCoord>) -> bool {
    let Some(&start) = set.iter().next() else {
        return true;
    };
    let mut seen = BTreeSet::new();
    let mut stack = vec![start];
    while let Some((r, c)) = stack.pop() {
        if !seen.insert((r, c)) {
            continue;
        }
        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 {
                continue;
            }
            let n = (nr as usize, nc as usize);
            if set.contains(&n) && !seen.contains(&n) {
                stack.push(n);
            }
        }
    }
    seen.len() == set.len()
}

/// Mean confidence of `offsets` anchored at every position that fits,
/// scanning the whole grid.
pub fn exhaustive_means(conf: &[f64], rows: usize, cols: usize, offsets: &[PatchCoord]) -> Vec<(PatchCoord, f64)> {
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if offsets.iter().any(|&(dr, dc)| r + dr >= rows || c + dc >= cols) {
                continue;
            }
            let mut sum = 0.0;
            for &(dr, dc) in offsets {
                sum += conf[(r + dr) * cols + c + dc];
            }
            out.push(((r, c), sum / offsets.len() as f64));
        }
    }
    out
}

/// A random 4-connected shape of `size` patches, grown from the origin and
/// shifted so its bounding box starts at `(0, 0)`.
pub fn random_shape(rng: &mut impl Rng, size: usize, max_extent: usize) -> Vec<PatchCoord> {
    let mut cells: BTreeSet<(i64, i64)> = BTreeSet::from([(0, 0)]);
    let mut guard = 0;
    while cells.len() < size && guard < 10_000 {
        guard += 1;
        let list: Vec<_> = cells.iter().cloned().collect();
        let (r, c) = list[rng.random_range(0..list.len())];
        let (dr, dc) = [(-1, 0), (1, 0), (0, -1), (0, 1)][rng.random_range(0..4)];
        let cand = (r + dr, c + dc);
        let mut rs: Vec<i64> = cells.iter().map(|p| p.0).chain([cand.0]).collect();
        let mut cs: Vec<i64> = cells.iter().map(|p| p.1).chain([cand.1]).collect();
        rs.sort_unstable();
        cs.sort_unstable();
        let fits = (rs[rs.len() - 1] - rs[0]) < max_extent as i64 && (cs[cs.len() - 1] - cs[0]) < max_extent as i64;
        if fits {
            cells.insert(cand);
        }
    }
    let r0 = cells.iter().map(|p| p.0).min().unwrap();
    let c0 = cells.iter().map(|p| p.1).min().unwrap();
    cells
        .into_iter()
        .map(|(r, c)| ((r - r0) as usize, (c - c0) as usize))
        .collect()
}

/// Scalar loss evaluated on a perturbed copy of `x` at index `i`.
pub fn central_difference(x: &[f64], i: usize, step: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut up = x.to_vec();
    up[i] += step;
    let mut dn = x.to_vec();
    dn[i] -= step;
    (f(&up) - f(&dn)) / (2.0 * step)
}

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
