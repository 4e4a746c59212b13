//! Step rewards: size and throughput change ratios against the unoptimized
//! baseline, blended with configurable weights.
//!
//! Sign conventions: size shrinking is positive (`last - curr`), throughput
//! growing is positive (`curr - last`). Both ratios telescope over an
//! episode, so the episode return is determined by the endpoints alone.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::{scalar, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("baseline measurement must be positive")]
    ZeroBase,
    #[error("reward weights must be non-negative with alpha + beta > 0 (alpha={alpha}, beta={beta})")]
    BadWeights { alpha: f64, beta: f64 },
}

/// Size/throughput pair for one measured object file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Unlinked object-file size in bytes; at least 1.
    pub bin_size: u64,
    /// Static throughput scalar (higher is better); positive.
    pub throughput: f64,
}

impl Measurement {
    pub fn new(bin_size: u64, throughput: f64) -> Result<Self, RewardError> {
        if bin_size < 1 || !(throughput > 0.0) {
            return Err(RewardError::ZeroBase);
        }
        Ok(Measurement { bin_size, throughput })
    }
}

/// Blend weights; size reduction is weighted by `alpha`, throughput gain by
/// `beta`. Defaults are 10 and 5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl RewardWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, RewardError> {
        if alpha < 0.0 || beta < 0.0 || alpha + beta <= 0.0 || !alpha.is_finite() || !beta.is_finite() {
            return Err(RewardError::BadWeights { alpha, beta });
        }
        Ok(RewardWeights { alpha, beta })
    }
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { alpha: 10.0, beta: 5.0 }
    }
}

/// Weights plus an optional symmetric clip bound on the combined reward.
/// No clipping by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub clip: Option<f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { weights: RewardWeights::default(), clip: None }
    }
}

impl RewardConfig {
    /// Full per-step reward from the previous, current, and baseline
    /// measurements.
    pub fn step_reward(
        &self,
        last: &Measurement,
        curr: &Measurement,
        base: &Measurement,
    ) -> Result<f64, RewardError> {
        let rb = reward_binsize(
            last.bin_size as f64,
            curr.bin_size as f64,
            base.bin_size as f64,
        )?;
        let rt = reward_throughput(curr.throughput, last.throughput, base.throughput)?;
        let r = combined_reward(rb, rt, scalar(self.weights.alpha), scalar(self.weights.beta));
        Ok(match self.clip {
            Some(c) => r.clamp(-c, c),
            None => r,
        })
    }
}

/// Size component: `(last - curr) / base`. Positive when the object shrank.
pub fn reward_binsize<F: Scalar>(last: F, curr: F, base: F) -> Result<F, RewardError> {
    if base < F::one() {
        return Err(RewardError::ZeroBase);
    }
    Ok((last - curr) / base)
}

/// Throughput component: `(curr - last) / base`. Positive when throughput
/// improved; note the operand order is flipped relative to the size ratio.
pub fn reward_throughput<F: Scalar>(curr: F, last: F, base: F) -> Result<F, RewardError> {
    if base <= F::zero() {
        return Err(RewardError::ZeroBase);
    }
    Ok((curr - last) / base)
}

/// `alpha * rb + beta * rt`.
pub fn combined_reward<F: Scalar>(rb: F, rt: F, alpha: F, beta: F) -> F {
    alpha * rb + beta * rt
}
