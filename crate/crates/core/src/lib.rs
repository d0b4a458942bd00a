//! Confidence-aware adaptive displacement for semi-supervised segmentation.
//!
//! Two student models see a weakly and a strongly augmented view of the same
//! image. Patch-level confidence maps locate the largest connected
//! low-confidence region in each view, which is overwritten by the most
//! confident same-shape region of the other view. The confidence threshold
//! and the region-size cap escalate over training.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the `*32`
//! and `*64` aliases below pin the common instantiations.

pub mod dte;
pub mod error;
pub mod grid;
pub mod harness;
pub mod io;
pub mod llcr;
pub mod losses;
pub mod metrics;
pub mod scalar;
pub mod tensor;

pub use dte::{ThresholdSchedule, Thresholds};
pub use error::{CadError, Result};
pub use grid::{confidence_grid, normalize, patch_confidence, pixel_confidence, softmax, GridSpec, PatchGrid};
pub use llcr::{
    apply_replacement, apply_replacement_labels, best_placement, displace_views, enumerate_placements,
    find_largest_low_confidence_region, kl_select_placement, region_pixel_mask, shape_offsets, top_placements,
    Direction, Displacement, DisplacementRecord, PatchCoord, Placement, PlacementRule, Region,
};
pub use losses::{
    cad_loss, ce_loss, cps_loss, dice_loss, kl_divergence, loss_gradient, mt_loss, total_loss, LossComponents,
    LossKind, LossReport, OneHotLabels,
};
pub use metrics::{asd, dsc, hd95, jaccard, MetricReport};
pub use scalar::Scalar;
pub use tensor::{LabelMap, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type PatchGrid32 = PatchGrid<f32>;
pub type PatchGrid64 = PatchGrid<f64>;
pub type Placement32 = Placement<f32>;
pub type Placement64 = Placement<f64>;
pub type Schedule32 = ThresholdSchedule<f32>;
pub type Schedule64 = ThresholdSchedule<f64>;
pub type LossReport32 = LossReport<f32>;
pub type LossReport64 = LossReport<f64>;
