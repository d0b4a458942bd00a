//! Dynamic threshold escalation.
//!
//! Both the confidence threshold and the region-size cap ramp from their
//! minimum toward their maximum along `1 - exp(-t / beta)`.

use serde::{Deserialize, Serialize};

use crate::error::{CadError, Result};
use crate::scalar::Scalar;

pub const DEFAULT_C_MIN: f64 = 0.01;
pub const DEFAULT_C_MAX: f64 = 0.75;
pub const DEFAULT_R_MIN: usize = 1;
pub const DEFAULT_R_MAX: usize = 16;

/// Fraction of the run at which the ramp time constant sits by default, so
/// the ramp is at `1 - e^-5` when training ends.
pub const DEFAULT_BETA_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule<T> {
    c_min: T,
    c_max: T,
    r_min: usize,
    r_max: usize,
    beta: T,
}

/// Thresholds in force at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds<T> {
    pub c_threshold: T,
    pub r_threshold: usize,
}

impl<T: Scalar> ThresholdSchedule<T> {
    pub fn new(c_min: T, c_max: T, r_min: usize, r_max: usize, beta: T) -> Result<Self> {
        let unit = |v: T| v >= T::zero() && v <= T::one();
        if !unit(c_min) || !unit(c_max) || c_min > c_max {
            return Err(CadError::InvalidSchedule(format!(
                "need 0 <= c_min <= c_max <= 1, got c_min={c_min}, c_max={c_max}"
            )));
        }
        if r_min == 0 || r_min > r_max {
            return Err(CadError::InvalidSchedule(format!(
                "need 1 <= r_min <= r_max, got r_min={r_min}, r_max={r_max}"
            )));
        }
        if beta <= T::zero() || !beta.is_finite() {
            return Err(CadError::InvalidSchedule(format!(
                "beta must be positive and finite, got {beta}"
            )));
        }
        Ok(Self {
            c_min,
            c_max,
            r_min,
            r_max,
            beta,
        })
    }

    /// Default bounds (0.01..0.75 confidence, 1..16 patches) with the given `beta`.
    pub fn with_beta(beta: T) -> Result<Self> {
        Self::new(
            T::of(DEFAULT_C_MIN),
            T::of(DEFAULT_C_MAX),
            DEFAULT_R_MIN,
            DEFAULT_R_MAX,
            beta,
        )
    }

    /// Default bounds with `beta = total_iterations / 5`.
    pub fn for_iterations(total_iterations: u64) -> Result<Self> {
        Self::with_beta(T::of(total_iterations as f64 * DEFAULT_BETA_FRACTION))
    }

    pub fn c_min(&self) -> T {
        self.c_min
    }

    pub fn c_max(&self) -> T {
        self.c_max
    }

    pub fn r_min(&self) -> usize {
        self.r_min
    }

    pub fn r_max(&self) -> usize {
        self.r_max
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    /// `1 - exp(-t / beta)`, in `[0, 1)`.
    pub fn ramp(&self, t: u64) -> T {
        T::one() - (-(T::of(t as f64)) / self.beta).exp()
    }

    pub fn c_threshold(&self, t: u64) -> T {
        self.c_min + (self.c_max - self.c_min) * self.ramp(t)
    }

    /// Region-size cap, rounded half up and clamped to `[r_min, r_max]`.
    pub fn r_threshold(&self, t: u64) -> usize {
        let span = T::from_count(self.r_max - self.r_min);
        let raw = T::from_count(self.r_min) + span * self.ramp(t);
        let rounded = round_half_up(raw).to_usize().unwrap_or(self.r_max);
        rounded.clamp(self.r_min, self.r_max)
    }

    pub fn thresholds_at(&self, t: u64) -> Thresholds<T> {
        Thresholds {
            c_threshold: self.c_threshold(t),
            r_threshold: self.r_threshold(t),
        }
    }
}

fn round_half_up<T: Scalar>(x: T) -> T {
    (x + T::of(0.5)).floor()
}
