//! Largest low-confidence region search and replacement.
//!
//! The region grows from the globally least confident patch through
//! 4-connected neighbours, always admitting the least confident queued patch
//! next, until the size cap is hit or no qualifying neighbour remains. Its
//! shape (offsets from the bounding-box origin) is then matched against every
//! in-bounds anchor of the counterpart grid, and the most confident anchor
//! supplies the replacement pixels.
//!
//! All tie-breaks resolve to the smallest row-major index.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::dte::Thresholds;
use crate::error::{CadError, Result};
use crate::grid::{confidence_grid, softmax, GridSpec, PatchGrid};
use crate::losses::kl_unchecked;
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

/// `(row, col)` index of a patch in the grid.
pub type PatchCoord = (usize, usize);

/// Default number of high-confidence candidates scored by the KL variant.
pub const DEFAULT_K_TOP: usize = 5;

/// A 4-connected set of patches with its bounding-box origin and shape.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    members: Vec<PatchCoord>,
    seed: Option<PatchCoord>,
    bbox_origin: PatchCoord,
    offsets: Vec<PatchCoord>,
}

impl Region {
    pub fn empty() -> Self {
        Self {
            members: Vec::new(),
            seed: None,
            bbox_origin: (0, 0),
            offsets: Vec::new(),
        }
    }

    /// Builds a region from its member patches. Members are deduplicated and
    /// stored in row-major order; `seed` must be one of them.
    pub fn from_members(seed: PatchCoord, members: impl IntoIterator<Item = PatchCoord>) -> Result<Self> {
        let mut members: Vec<PatchCoord> = members.into_iter().collect();
        members.sort_unstable();
        members.dedup();
        if members.is_empty() {
            return Err(CadError::EmptyRegion);
        }
        if members.binary_search(&seed).is_err() {
            return Err(CadError::InvalidInput(format!("seed {seed:?} is not a region member")));
        }
        let offsets = shape_offsets_of(&members);
        let bbox_origin = bbox_origin_of(&members);
        Ok(Self {
            members,
            seed: Some(seed),
            bbox_origin,
            offsets,
        })
    }

    pub fn members(&self) -> &[PatchCoord] {
        &self.members
    }

    pub fn seed(&self) -> Option<PatchCoord> {
        self.seed
    }

    pub fn bbox_origin(&self) -> PatchCoord {
        self.bbox_origin
    }

    pub fn offsets(&self) -> &[PatchCoord] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, p: PatchCoord) -> bool {
        self.members.binary_search(&p).is_ok()
    }

    /// Bounding-box size in patches, `(rows, cols)`; `(0, 0)` when empty.
    pub fn extent(&self) -> (usize, usize) {
        extent_of(&self.offsets)
    }
}

/// A same-shape candidate anchored at `anchor` in the counterpart grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement<T> {
    pub anchor: PatchCoord,
    pub offsets: Vec<PatchCoord>,
    pub mean_confidence: T,
}

/// Which view receives patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// The strong view's low-confidence region is filled from the weak view.
    WeakToStrong,
    /// The weak view's low-confidence region is filled from the strong view.
    StrongToWeak,
}

/// Audit record of one replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementRecord<T> {
    pub direction: Direction,
    pub region: Region,
    /// Normalized confidence of each region member, in member order.
    pub member_confidence: Vec<T>,
    pub placement: Option<Placement<T>>,
    pub c_threshold: T,
    pub r_threshold: usize,
    pub iteration: u64,
}

fn bbox_origin_of(members: &[PatchCoord]) -> PatchCoord {
    let r = members.iter().map(|p| p.0).min().unwrap_or(0);
    let c = members.iter().map(|p| p.1).min().unwrap_or(0);
    (r, c)
}

fn shape_offsets_of(members: &[PatchCoord]) -> Vec<PatchCoord> {
    let (r0, c0) = bbox_origin_of(members);
    let mut offsets: Vec<PatchCoord> = members.iter().map(|&(r, c)| (r - r0, c - c0)).collect();
    offsets.sort_unstable();
    offsets
}

fn extent_of(offsets: &[PatchCoord]) -> (usize, usize) {
    if offsets.is_empty() {
        return (0, 0);
    }
    let rows = offsets.iter().map(|o| o.0).max().unwrap_or(0) + 1;
    let cols = offsets.iter().map(|o| o.1).max().unwrap_or(0) + 1;
    (rows, cols)
}

/// Heap key: confidence first, then row-major index.
#[derive(Debug, Clone, Copy)]
struct Queued<T> {
    value: T,
    index: usize,
}

impl<T: Scalar> PartialEq for Queued<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Scalar> Eq for Queued<T> {}

impl<T: Scalar> PartialOrd for Queued<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> Ord for Queued<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.value
            .partial_cmp(&other.value)
            .unwrap_or(Ordering::Equal)
            .then(self.index.cmp(&other.index))
    }
}

fn neighbours4((r, c): PatchCoord, rows: usize, cols: usize) -> impl Iterator<Item = PatchCoord> {
    let up = (r > 0).then(|| (r - 1, c));
    let down = (r + 1 < rows).then(|| (r + 1, c));
    let left = (c > 0).then(|| (r, c - 1));
    let right = (c + 1 < cols).then(|| (r, c + 1));
    [up, down, left, right].into_iter().flatten()
}

/// Grows the largest low-confidence region by best-first search.
///
/// Starting at the least confident patch, the lowest queued patch is popped,
/// admitted when it is not yet a member and its normalized confidence is at
/// most `c_threshold`, and its qualifying 4-neighbours are queued. The loop
/// stops when the queue drains or the region holds `r_threshold` patches.
pub fn find_largest_low_confidence_region<T: Scalar>(
    grid: &PatchGrid<T>,
    c_threshold: T,
    r_threshold: usize,
) -> Result<Region> {
    if r_threshold == 0 {
        return Err(CadError::InvalidThreshold(
            "region size threshold must be positive".into(),
        ));
    }
    if !(c_threshold >= T::zero() && c_threshold <= T::one()) {
        return Err(CadError::InvalidThreshold(format!(
            "confidence threshold {c_threshold} outside [0, 1]"
        )));
    }
    let conf = grid.try_normalized()?;
    let (rows, cols) = grid.dims();

    let mut seed = 0;
    for (i, &v) in conf.iter().enumerate() {
        if v < conf[seed] {
            seed = i;
        }
    }

    let qualifies = |i: usize| conf[i] <= c_threshold;
    let mut admitted = vec![false; conf.len()];
    // A queued patch stays queued until popped, and popping a qualifying
    // non-member admits it, so re-queueing would never change the result.
    let mut queued = vec![false; conf.len()];
    let mut members = Vec::new();
    let mut heap = BinaryHeap::new();
    heap.push(Reverse(Queued {
        value: conf[seed],
        index: seed,
    }));
    queued[seed] = true;

    while members.len() < r_threshold {
        let Some(Reverse(Queued { index, .. })) = heap.pop() else {
            break;
        };
        if !admitted[index] && qualifies(index) {
            admitted[index] = true;
            members.push((index / cols, index % cols));
        }
        for (qr, qc) in neighbours4((index / cols, index % cols), rows, cols) {
            let q = qr * cols + qc;
            if !admitted[q] && !queued[q] && qualifies(q) {
                queued[q] = true;
                heap.push(Reverse(Queued {
                    value: conf[q],
                    index: q,
                }));
            }
        }
    }

    if members.is_empty() {
        return Ok(Region::empty());
    }
    Region::from_members((seed / cols, seed % cols), members)
}

/// Shape offsets of a region relative to its bounding-box origin.
pub fn shape_offsets(region: &Region) -> Result<Vec<PatchCoord>> {
    if region.is_empty() {
        return Err(CadError::EmptyRegion);
    }
    Ok(region.offsets().to_vec())
}

/// All anchors at which `offsets` fit inside a `rows x cols` grid, row-major.
pub fn enumerate_placements(offsets: &[PatchCoord], (rows, cols): (usize, usize)) -> Vec<PatchCoord> {
    let (er, ec) = extent_of(offsets);
    if offsets.is_empty() || er > rows || ec > cols {
        return Vec::new();
    }
    (0..=rows - er)
        .flat_map(|r| (0..=cols - ec).map(move |c| (r, c)))
        .collect()
}

fn mean_at<T: Scalar>(conf: &[T], cols: usize, anchor: PatchCoord, offsets: &[PatchCoord]) -> T {
    let sum: T = offsets
        .iter()
        .map(|&(dr, dc)| conf[(anchor.0 + dr) * cols + anchor.1 + dc])
        .sum();
    sum / T::from_count(offsets.len())
}

/// Every valid placement with its mean normalized confidence, row-major.
pub fn scored_placements<T: Scalar>(grid: &PatchGrid<T>, offsets: &[PatchCoord]) -> Result<Vec<Placement<T>>> {
    let conf = grid.try_normalized()?;
    let cols = grid.dims().1;
    Ok(enumerate_placements(offsets, grid.dims())
        .into_iter()
        .map(|anchor| Placement {
            anchor,
            offsets: offsets.to_vec(),
            mean_confidence: mean_at(conf, cols, anchor, offsets),
        })
        .collect())
}

/// Most confident same-shape placement, or `None` when the shape does not fit.
pub fn best_placement<T: Scalar>(grid: &PatchGrid<T>, offsets: &[PatchCoord]) -> Result<Option<Placement<T>>> {
    let mut best: Option<Placement<T>> = None;
    for p in scored_placements(grid, offsets)? {
        if best.as_ref().is_none_or(|b| p.mean_confidence > b.mean_confidence) {
            best = Some(p);
        }
    }
    Ok(best)
}

/// The `k` most confident placements, best first; ties keep row-major order.
pub fn top_placements<T: Scalar>(grid: &PatchGrid<T>, offsets: &[PatchCoord], k: usize) -> Result<Vec<Placement<T>>> {
    let mut all = scored_placements(grid, offsets)?;
    all.sort_by(|a, b| {
        b.mean_confidence
            .partial_cmp(&a.mean_confidence)
            .unwrap_or(Ordering::Equal)
    });
    all.truncate(k);
    Ok(all)
}

/// Picks, among high-confidence candidates, the one whose predicted class
/// distributions are closest in KL divergence to the low region's.
///
/// Pixels are paired by patch offset and position within the patch, and the
/// per-pixel divergences are averaged over the whole footprint. Candidates
/// are expected best-first; ties keep the earlier candidate.
pub fn kl_select_placement<T: Scalar>(
    low_logits: &Tensor<T>,
    region: &Region,
    other_logits: &Tensor<T>,
    candidates: &[Placement<T>],
    spec: GridSpec,
) -> Result<Placement<T>> {
    if candidates.is_empty() {
        return Err(CadError::NoPlacement);
    }
    if region.is_empty() {
        return Err(CadError::EmptyRegion);
    }
    low_logits.ensure_same_shape(other_logits)?;
    let (classes, h, w) = low_logits.chw()?;
    spec.check_spatial(h, w)?;
    check_fits(region.bbox_origin(), region.offsets(), spec)?;
    for cand in candidates {
        check_fits(cand.anchor, region.offsets(), spec)?;
    }
    if candidates.len() == 1 {
        return Ok(candidates[0].clone());
    }

    let low = softmax(low_logits)?;
    let high = softmax(other_logits)?;
    let plane = h * w;
    let (ph, pw) = (spec.patch_h(), spec.patch_w());
    let pixels = T::from_count(region.len() * ph * pw);
    let mut p = vec![T::zero(); classes];
    let mut q = vec![T::zero(); classes];

    let mut best: Option<(T, usize)> = None;
    for (i, cand) in candidates.iter().enumerate() {
        let mut total = T::zero();
        for &(dr, dc) in region.offsets() {
            let (lr, lc) = (region.bbox_origin().0 + dr, region.bbox_origin().1 + dc);
            let (hr, hc) = (cand.anchor.0 + dr, cand.anchor.1 + dc);
            for y in 0..ph {
                for x in 0..pw {
                    let lpx = (lr * ph + y) * w + lc * pw + x;
                    let hpx = (hr * ph + y) * w + hc * pw + x;
                    for k in 0..classes {
                        p[k] = low.data()[k * plane + lpx];
                        q[k] = high.data()[k * plane + hpx];
                    }
                    total += kl_unchecked(&p, &q);
                }
            }
        }
        let mean = total / pixels;
        if best.is_none_or(|(b, _)| mean < b) {
            best = Some((mean, i));
        }
    }
    let (_, idx) = best.ok_or(CadError::NoPlacement)?;
    Ok(candidates[idx].clone())
}

fn check_fits(anchor: PatchCoord, offsets: &[PatchCoord], spec: GridSpec) -> Result<()> {
    let (er, ec) = extent_of(offsets);
    let (rows, cols) = spec.grid_dims();
    if anchor.0 + er > rows || anchor.1 + ec > cols {
        return Err(CadError::PlacementOutOfBounds {
            anchor,
            extent: (er, ec),
            grid_rows: rows,
            grid_cols: cols,
        });
    }
    Ok(())
}

/// Copies source patch blocks into the target across every stacked plane.
fn copy_blocks<E: Copy>(
    dst: &mut [E],
    src: &[E],
    planes: usize,
    spec: GridSpec,
    origin: PatchCoord,
    anchor: PatchCoord,
    offsets: &[PatchCoord],
) {
    let (h, w) = (spec.image_h(), spec.image_w());
    let (ph, pw) = (spec.patch_h(), spec.patch_w());
    for plane in 0..planes {
        let base = plane * h * w;
        for &(dr, dc) in offsets {
            let (tr, tc) = (origin.0 + dr, origin.1 + dc);
            let (sr, sc) = (anchor.0 + dr, anchor.1 + dc);
            for y in 0..ph {
                let t0 = base + (tr * ph + y) * w + tc * pw;
                let s0 = base + (sr * ph + y) * w + sc * pw;
                dst[t0..t0 + pw].copy_from_slice(&src[s0..s0 + pw]);
            }
        }
    }
}

fn check_replacement(region: &Region, anchor: PatchCoord, offsets: &[PatchCoord], spec: GridSpec) -> Result<()> {
    if offsets != region.offsets() {
        return Err(CadError::InvalidInput(
            "placement offsets do not match the region shape".into(),
        ));
    }
    check_fits(region.bbox_origin(), region.offsets(), spec)?;
    check_fits(anchor, region.offsets(), spec)
}

/// Replaces the region's patch footprint in `target` with the placement's
/// footprint from `source`. Works on `H x W` images and on `C x H x W`
/// tensors, where every channel is replaced. Pixels outside the region are
/// copied through untouched.
pub fn apply_replacement<T: Scalar>(
    target: &Tensor<T>,
    source: &Tensor<T>,
    region: &Region,
    placement: &Placement<T>,
    spec: GridSpec,
) -> Result<Tensor<T>> {
    target.ensure_same_shape(source)?;
    spec.check_spatial(target.height(), target.width())?;
    if region.is_empty() {
        return Ok(target.clone());
    }
    check_replacement(region, placement.anchor, &placement.offsets, spec)?;
    let mut out = target.data().to_vec();
    copy_blocks(
        &mut out,
        source.data(),
        target.planes(),
        spec,
        region.bbox_origin(),
        placement.anchor,
        region.offsets(),
    );
    Ok(Tensor::from_parts_unchecked(target.shape().to_vec(), out))
}

/// Label-map counterpart of [`apply_replacement`].
pub fn apply_replacement_labels<T: Scalar>(
    target: &LabelMap,
    source: &LabelMap,
    region: &Region,
    placement: &Placement<T>,
    spec: GridSpec,
) -> Result<LabelMap> {
    if (target.height(), target.width()) != (source.height(), source.width()) {
        return Err(CadError::ShapeMismatch {
            expected: vec![target.height(), target.width()],
            actual: vec![source.height(), source.width()],
        });
    }
    spec.check_spatial(target.height(), target.width())?;
    if region.is_empty() {
        return Ok(target.clone());
    }
    check_replacement(region, placement.anchor, &placement.offsets, spec)?;
    let mut out = target.labels().to_vec();
    copy_blocks(
        &mut out,
        source.labels(),
        1,
        spec,
        region.bbox_origin(),
        placement.anchor,
        region.offsets(),
    );
    Ok(target.with_labels(out))
}

/// Finds the low region in one view and its best counterpart placement in
/// the other, then writes the counterpart patches over the low region.
#[allow(clippy::too_many_arguments)]
fn displace<T: Scalar>(
    direction: Direction,
    target_image: &Tensor<T>,
    source_image: &Tensor<T>,
    target_grid: &PatchGrid<T>,
    source_grid: &PatchGrid<T>,
    target_logits: &Tensor<T>,
    source_logits: &Tensor<T>,
    spec: GridSpec,
    rule: PlacementRule,
    thresholds: Thresholds<T>,
    t: u64,
) -> Result<(Tensor<T>, DisplacementRecord<T>)> {
    let region = find_largest_low_confidence_region(target_grid, thresholds.c_threshold, thresholds.r_threshold)?;
    let placement = if region.is_empty() {
        None
    } else if let PlacementRule::KlTop(k_top) = rule {
        let candidates = top_placements(source_grid, region.offsets(), k_top)?;
        if candidates.is_empty() {
            None
        } else {
            Some(kl_select_placement(
                target_logits,
                &region,
                source_logits,
                &candidates,
                spec,
            )?)
        }
    } else {
        best_placement(source_grid, region.offsets())?
    };
    let displaced = match &placement {
        Some(p) => apply_replacement(target_image, source_image, &region, p, spec)?,
        None => target_image.clone(),
    };
    let conf = target_grid.try_normalized()?;
    let cols = target_grid.dims().1;
    let member_confidence = region.members().iter().map(|&(r, c)| conf[r * cols + c]).collect();
    let record = DisplacementRecord {
        direction,
        region,
        member_confidence,
        placement,
        c_threshold: thresholds.c_threshold,
        r_threshold: thresholds.r_threshold,
        iteration: t,
    };
    Ok((displaced, record))
}

/// How the counterpart placement is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementRule {
    /// Highest mean confidence.
    MostConfident,
    /// Lowest KL divergence among the given number of most confident.
    KlTop(usize),
}

/// Both displaced views with their audit records.
#[derive(Debug, Clone, PartialEq)]
pub struct Displacement<T> {
    pub x_prime_w: Tensor<T>,
    pub x_prime_s: Tensor<T>,
    pub weak_to_strong: DisplacementRecord<T>,
    pub strong_to_weak: DisplacementRecord<T>,
}

/// Two-way displacement between a weak and a strong view.
///
/// Confidence grids come from `logits_w` and `logits_s`. The strong view's
/// low region is filled from the weak view and vice versa; both replacements
/// read the original views. `x_w` and `x_s` may be `H x W` images or stacked
/// `C x H x W` tensors such as the logits themselves.
#[allow(clippy::too_many_arguments)]
pub fn displace_views<T: Scalar>(
    x_w: &Tensor<T>,
    x_s: &Tensor<T>,
    logits_w: &Tensor<T>,
    logits_s: &Tensor<T>,
    spec: GridSpec,
    thresholds: Thresholds<T>,
    rule: PlacementRule,
    iteration: u64,
) -> Result<Displacement<T>> {
    x_w.ensure_same_shape(x_s)?;
    logits_w.ensure_same_shape(logits_s)?;
    let (_, h, w) = logits_w.chw()?;
    if (x_w.height(), x_w.width()) != (h, w) {
        return Err(CadError::ShapeMismatch {
            expected: vec![h, w],
            actual: x_w.shape().to_vec(),
        });
    }
    if rule == PlacementRule::KlTop(0) {
        return Err(CadError::Config("k_top must be at least 1".into()));
    }
    let grid_w = confidence_grid(logits_w, spec)?;
    let grid_s = confidence_grid(logits_s, spec)?;
    let (x_prime_s, weak_to_strong) = displace(
        Direction::WeakToStrong,
        x_s,
        x_w,
        &grid_s,
        &grid_w,
        logits_s,
        logits_w,
        spec,
        rule,
        thresholds,
        iteration,
    )?;
    let (x_prime_w, strong_to_weak) = displace(
        Direction::StrongToWeak,
        x_w,
        x_s,
        &grid_w,
        &grid_s,
        logits_w,
        logits_s,
        spec,
        rule,
        thresholds,
        iteration,
    )?;
    Ok(Displacement {
        x_prime_w,
        x_prime_s,
        weak_to_strong,
        strong_to_weak,
    })
}

/// Pixel mask (`image_h * image_w`, row-major) of the patches in `region`.
pub fn region_pixel_mask(region: &Region, spec: GridSpec) -> Vec<bool> {
    let mut mask = vec![false; spec.image_h() * spec.image_w()];
    for &(r, c) in region.members() {
        if r >= spec.grid_rows() || c >= spec.grid_cols() {
            continue;
        }
        let (rows, cols) = spec.patch_pixels(r, c);
        for y in rows {
            for x in cols.clone() {
                mask[y * spec.image_w() + x] = true;
            }
        }
    }
    mask
}
