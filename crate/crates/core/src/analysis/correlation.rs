use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{RandomStream, Tensor};

/// Cosine similarity of the vectorised matrices.
pub fn vec_correlation(ms: &Tensor, mt: &Tensor) -> Result<f64> {
    mt.expect_shape(ms.shape(), "correlation operand")?;
    cosine(ms.data(), mt.data())
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero vector has no direction"));
    }
    // sqrt(aa * bb) rather than sqrt(aa) * sqrt(bb): exact 1 for identical inputs.
    Ok((dot / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// Limit of the correlation between `sin(omega_s X)` and `sin(omega_t X)` for
/// `X ~ N(0, sigma^2)`, using `E[cos(kX)] = exp(-k^2 sigma^2 / 2)`.
pub fn gaussian_corr_oracle(omega_s: f64, omega_t: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(contract!("sigma must be positive, got {sigma}"));
    }
    if omega_s == 0.0 || omega_t == 0.0 {
        return Err(Error::DegenerateVariance { omega_s, omega_t });
    }
    if omega_s == omega_t {
        return Ok(1.0);
    }
    let var = sigma * sigma;
    let e_cos = |k: f64| (-0.5 * k * k * var).exp();
    let cross = 0.5 * (e_cos(omega_s - omega_t) - e_cos(omega_s + omega_t));
    let power = |w: f64| 0.5 * (1.0 - e_cos(2.0 * w));
    Ok(cross / (power(omega_s) * power(omega_t)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

/// Samples `n` Gaussian base entries, applies both sine maps and returns the
/// vectorised correlation with a delta-method standard error.
pub fn monte_carlo_corr(
    omega_s: f64,
    omega_t: f64,
    sigma: f64,
    n: usize,
    stream: &mut RandomStream,
) -> Result<CorrelationEstimate> {
    if n < 1000 {
        return Err(contract!("monte_carlo_corr needs at least 1000 samples, got {n}"));
    }
    if !(sigma > 0.0) {
        return Err(contract!("sigma must be positive, got {sigma}"));
    }
    let mut ys = Vec::with_capacity(n);
    let mut yt = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sigma * stream.normal();
        ys.push((omega_s * x).sin());
        yt.push((omega_t * x).sin());
    }
    let mean = cosine(&ys, &yt)?;
    let stderr = if omega_s == omega_t {
        0.0
    } else {
        ratio_stderr(&ys, &yt)
    };
    Ok(CorrelationEstimate {
        mean,
        stderr,
        n_samples: n,
    })
}

/// Delta-method standard error of `mean(xy) / sqrt(mean(x^2) mean(y^2))`.
pub(crate) fn ratio_stderr(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mut mu = [0.0; 3];
    for (&a, &b) in x.iter().zip(y) {
        mu[0] += a * b;
        mu[1] += a * a;
        mu[2] += b * b;
    }
    for m in &mut mu {
        *m /= n;
    }
    let mut cov = [[0.0; 3]; 3];
    for (&a, &b) in x.iter().zip(y) {
        let d = [a * b - mu[0], a * a - mu[1], b * b - mu[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    let root = (mu[1] * mu[2]).sqrt();
    let grad = [1.0 / root, -mu[0] / (2.0 * mu[1] * root), -mu[0] / (2.0 * mu[2] * root)];
    let mut var = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            var += grad[i] * grad[j] * cov[i][j] / (n - 1.0);
        }
    }
    (var.max(0.0) / n).sqrt()
}
