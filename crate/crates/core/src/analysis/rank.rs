use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{singular_values, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub singular_values: Vec<f64>,
    /// Number of singular values above `epsilon * sigma_max`.
    pub eps_rank: usize,
    /// `||M||_F^2 / sigma_max^2`.
    pub stable_rank: f64,
    pub epsilon: f64,
}

pub const DEFAULT_RANK_EPSILON: f64 = 1e-6;

pub fn rank_report(m: &Tensor, epsilon: f64) -> Result<RankReport> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(contract!("rank epsilon must be in (0, 1), got {epsilon}"));
    }
    let sv = singular_values(m)?;
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Err(contract!("rank of a zero matrix is not reported"));
    }
    let eps_rank = sv.iter().filter(|&&s| s > epsilon * top).count();
    let stable_rank = sv.iter().map(|s| s * s).sum::<f64>() / (top * top);
    Ok(RankReport {
        singular_values: sv,
        eps_rank,
        stable_rank,
        epsilon,
    })
}
