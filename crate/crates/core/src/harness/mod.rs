//! Desk-scale training harness: toy linear students, an EMA teacher,
//! synthetic disk images and the per-iteration displacement step.

mod data;
mod predictor;
mod train;

pub use data::{strong_view, synth_dataset, synth_samples, weak_view, Dataset, Sample, DEFAULT_GRID};
pub use predictor::{ema_update, ToyPredictor, NUM_FEATURES};
pub use train::{
    cad_step, outside_footprint_unchanged, run_demo, train, CadStep, HeldoutDsc, IterationConfig, IterationLog,
    TrainConfig, TrainingLog,
};
