//! Relative L2 and per-point RMSE.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `‖u − û‖ / ‖u‖` over all entries.
pub fn relative_l2(u: &Tensor, u_hat: &Tensor) -> Result<f64> {
    if u.shape() != u_hat.shape() {
        return Err(Error::shape("relative_l2", u.shape(), u_hat.shape()));
    }
    let reference = u.norm();
    if reference == 0.0 {
        return Err(Error::Config("relative L2 is undefined for a zero reference".into()));
    }
    Ok(u.sub(u_hat)?.norm() / reference)
}

/// `sqrt(1/N Σ_i ‖u_i − û_i‖²)` with one point per row.
pub fn rmse(u: &Tensor, u_hat: &Tensor) -> Result<f64> {
    if u.shape() != u_hat.shape() {
        return Err(Error::shape("rmse", u.shape(), u_hat.shape()));
    }
    let n = if u.rank() == 0 { 1 } else { u.shape()[0] };
    if n == 0 {
        return Err(Error::Config("RMSE of an empty point set".into()));
    }
    Ok(libm::sqrt(u.sub(u_hat)?.sum_squares() / n as f64))
}

/// One row of an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub solid: String,
    pub quantity: String,
    /// Absent when every reference in the group was zero.
    pub relative_l2: Option<f64>,
    pub rmse: f64,
}

/// Error of one rollout against its ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    /// Geometry RMSE at each step, averaged over deformable solids.
    pub per_step_rmse: Vec<f64>,
    /// Mean of `per_step_rmse`.
    pub rmse_all: f64,
    /// Per solid and quantity, averaged over steps.
    pub quantities: Vec<MetricRow>,
    /// Filled in by callers that own a clock.
    pub wall_clock_secs: Option<f64>,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mean of every per-step, per-trajectory RMSE.
pub fn rmse_all(trajectories: &[TrajectoryMetrics]) -> f64 {
    let all: Vec<f64> = trajectories.iter().flat_map(|t| t.per_step_rmse.iter().copied()).collect();
    mean(&all)
}
