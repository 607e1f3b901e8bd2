use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{RandomStream, Tensor};

/// Lightweight clock network: `omega = s * (tanh(W_q relu(p)) + c)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockNetParams {
    pub w_q: Tensor,
    pub s: f64,
    pub c: f64,
}

impl ClockNetParams {
    pub fn new(w_q: Tensor, s: f64, c: f64) -> Result<Self> {
        w_q.expect_ndim(2, "clock net W_q")?;
        if w_q.shape()[0] != 1 {
            return Err(contract!(
                "clock net produces a scalar frequency; W_q must be [1, C], got {:?}",
                w_q.shape()
            ));
        }
        if s == 0.0 || !s.is_finite() || !c.is_finite() {
            return Err(contract!(
                "clock net scale must be finite and nonzero (s = {s}, c = {c})"
            ));
        }
        Ok(Self { w_q, s, c })
    }

    /// `W_q ~ N(0, 0.02^2)`, `s = 1`, `c = 1`, so every task starts near `omega = 1`.
    pub fn init(width: usize, rng: &mut RandomStream) -> Self {
        Self {
            w_q: rng.gaussian_tensor(&[1, width], 0.02),
            s: 1.0,
            c: 1.0,
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.w_q.len() + 2
    }

    /// The open interval `omega` is confined to.
    pub fn bounds(&self) -> (f64, f64) {
        let (a, b) = (self.s * (self.c - 1.0), self.s * (self.c + 1.0));
        (a.min(b), a.max(b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskToken {
    pub p: Tensor,
    pub task_id: usize,
}

impl TaskToken {
    pub fn new(p: Tensor, task_id: usize) -> Result<Self> {
        p.expect_ndim(1, "task token")?;
        Ok(Self { p, task_id })
    }
}

fn preactivation(params: &ClockNetParams, p: &Tensor) -> Result<f64> {
    if p.ndim() != 1 || p.len() != params.width() {
        return Err(contract!(
            "task token has shape {:?} but W_q expects width {}",
            p.shape(),
            params.width()
        ));
    }
    Ok(params
        .w_q
        .data()
        .iter()
        .zip(p.data())
        .map(|(w, &x)| w * x.max(0.0))
        .sum())
}

pub fn clocknet_forward(params: &ClockNetParams, token: &TaskToken) -> Result<f64> {
    clock_omega(params, &token.p)
}

/// Same as [`clocknet_forward`] on a bare token vector.
pub fn clock_omega(params: &ClockNetParams, p: &Tensor) -> Result<f64> {
    let z = preactivation(params, p)?;
    Ok(params.s * (z.tanh() + params.c))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClockNetGrads {
    pub w_q: Tensor,
    pub s: f64,
    pub c: f64,
    pub token: Tensor,
}

pub fn clocknet_backward(params: &ClockNetParams, token: &TaskToken, grad_omega: f64) -> Result<ClockNetGrads> {
    clock_backward(params, &token.p, grad_omega)
}

pub fn clock_backward(params: &ClockNetParams, p: &Tensor, grad_omega: f64) -> Result<ClockNetGrads> {
    let t = preactivation(params, p)?.tanh();
    let dz = grad_omega * params.s * (1.0 - t * t);
    let w_q = Tensor::from_fn(params.w_q.shape(), |i| dz * p.data()[i].max(0.0));
    let token = Tensor::from_fn(p.shape(), |i| {
        if p.data()[i] > 0.0 {
            dz * params.w_q.data()[i]
        } else {
            0.0
        }
    });
    Ok(ClockNetGrads {
        w_q,
        s: grad_omega * (t + params.c),
        c: grad_omega * params.s,
        token,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(w: &[f64], s: f64, c: f64) -> ClockNetParams {
        ClockNetParams::new(Tensor::new(vec![1, w.len()], w.to_vec()).unwrap(), s, c).unwrap()
    }

    fn token(p: &[f64]) -> TaskToken {
        TaskToken::new(Tensor::new(vec![p.len()], p.to_vec()).unwrap(), 0).unwrap()
    }

    #[test]
    fn nonpositive_token_gives_s_times_c() {
        let cn = params(&[0.3, -2.0, 5.0], 1.7, 0.4);
        let tok = token(&[-1.0, 0.0, -3.0]);
        assert_eq!(clocknet_forward(&cn, &tok).unwrap(), 1.7 * 0.4);
        let g = clocknet_backward(&cn, &tok, 2.0).unwrap();
        assert_eq!(g.w_q.max_abs(), 0.0);
        assert_eq!(g.token.max_abs(), 0.0);
        assert_eq!(g.s, 0.4 * 2.0);
        assert_eq!(g.c, 1.7 * 2.0);
    }

    #[test]
    fn scalar_evaluation() {
        let cn = params(&[0.25, 1.0], 1.0, 1.0);
        let omega = clocknet_forward(&cn, &token(&[2.0, 0.0])).unwrap();
        assert!((omega - (1.0 + 0.5f64.tanh())).abs() < 1e-15);
        assert!((omega - 1.4621).abs() < 1e-4);
    }

    #[test]
    fn saturates_below_upper_asymptote() {
        let cn = params(&[1.0], 1.0, 1.0);
        let omega = clocknet_forward(&cn, &token(&[8.0])).unwrap();
        assert!(omega < 2.0 && omega > 1.999);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let cn = params(&[0.3, -0.2], 1.2, 0.5);
        let g = clocknet_backward(&cn, &token(&[1.0, 2.0]), 0.0).unwrap();
        assert_eq!(g.w_q.max_abs() + g.token.max_abs() + g.s.abs() + g.c.abs(), 0.0);
    }

    #[test]
    fn rejects_zero_scale_and_width_mismatch() {
        assert!(ClockNetParams::new(Tensor::zeros(&[1, 3]), 0.0, 1.0).is_err());
        assert!(ClockNetParams::new(Tensor::zeros(&[2, 3]), 1.0, 1.0).is_err());
        let cn = params(&[0.1, 0.1, 0.1], 1.0, 1.0);
        assert!(clocknet_forward(&cn, &token(&[1.0, 1.0])).is_err());
    }
}
