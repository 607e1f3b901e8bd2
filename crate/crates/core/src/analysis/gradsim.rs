use serde::{Deserialize, Serialize};

use super::correlation::cosine;
use crate::error::{contract, Result};

/// Cosine similarity of two flattened gradients; `None` when either is zero.
pub fn grad_cosine(gi: &[f64], gj: &[f64]) -> Result<Option<f64>> {
    if gi.len() != gj.len() {
        return Err(contract!("gradient lengths differ: {} vs {}", gi.len(), gj.len()));
    }
    Ok(cosine(gi, gj).ok())
}

/// Pairwise cosine matrix (row-major `T x T`) for one iteration.
pub fn pairwise_grad_cosine(grads: &[Vec<f64>]) -> Result<Vec<Option<f64>>> {
    let t = grads.len();
    let mut out = vec![None; t * t];
    for i in 0..t {
        for j in i..t {
            let s = if i == j {
                grad_cosine(&grads[i], &grads[i])?.map(|_| 1.0)
            } else {
                grad_cosine(&grads[i], &grads[j])?
            };
            out[i * t + j] = s;
            out[j * t + i] = s;
        }
    }
    Ok(out)
}

/// Epoch average of per-iteration similarity matrices.
///
/// Undefined entries are skipped; an entry with no defined samples stays `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSimMatrix {
    pub epoch: usize,
    pub tasks: usize,
    pub samples: usize,
    pub mean: Vec<Option<f64>>,
    pub variance: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl GradSimMatrix {
    pub fn mean_at(&self, i: usize, j: usize) -> Option<f64> {
        self.mean[i * self.tasks + j]
    }

    pub fn variance_at(&self, i: usize, j: usize) -> Option<f64> {
        self.variance[i * self.tasks + j]
    }
}

pub fn epoch_grad_sim(epoch: usize, samples: &[Vec<Option<f64>>]) -> Result<GradSimMatrix> {
    let first = samples
        .first()
        .ok_or_else(|| contract!("epoch_grad_sim needs at least one sample"))?;
    let cells = first.len();
    let tasks = (cells as f64).sqrt().round() as usize;
    if tasks * tasks != cells || samples.iter().any(|s| s.len() != cells) {
        return Err(contract!("similarity samples must all be square T x T matrices"));
    }
    let mut mean = vec![None; cells];
    let mut variance = vec![None; cells];
    let mut counts = vec![0; cells];
    for k in 0..cells {
        let vals: Vec<f64> = samples.iter().filter_map(|s| s[k]).collect();
        counts[k] = vals.len();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        mean[k] = Some(mu);
        variance[k] = Some(var);
    }
    Ok(GradSimMatrix {
        epoch,
        tasks,
        samples: samples.len(),
        mean,
        variance,
        counts,
    })
}
