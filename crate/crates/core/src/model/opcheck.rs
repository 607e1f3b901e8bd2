//! Isolated adapter operations wrapped as scalar problems for gradient checks.
//!
//! Each problem contracts the operation's output with a fixed random probe
//! tensor `R`, so the loss is `<R, f(params)>` and its analytic gradient comes
//! straight from the operation's backward function.

use super::gradcheck::Differentiable;
use crate::adapter::{
    clock_backward, clock_omega, fuse_awb, fuse_backward, linear_backward, linear_scale, lowpass_backward,
    lowpass_filter, sine_backward, sine_modulate, ClockNetParams, FusedKernel, LowRankFactors, MidKernel,
    ModulatedKernel,
};
use crate::error::{contract, Result};
use crate::numerics::{ConvKernel, RandomStream, Tensor};

type Eval = dyn Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>, Vec<bool>)> + Send + Sync;

pub struct OpProblem {
    pub op: &'static str,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    eval: Box<Eval>,
}

impl OpProblem {
    fn new(op: &'static str, names: &[&str], tensors: Vec<Tensor>, eval: Box<Eval>) -> Self {
        Self {
            op,
            names: names.iter().map(|n| format!("{op}.{n}")).collect(),
            tensors,
            eval,
        }
    }
}

impl Differentiable for OpProblem {
    fn names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn tensors(&self) -> Vec<Tensor> {
        self.tensors.clone()
    }

    fn set_tensor(&mut self, idx: usize, value: Tensor) -> Result<()> {
        value.expect_shape(self.tensors[idx].shape(), &self.names[idx])?;
        self.tensors[idx] = value;
        Ok(())
    }

    fn loss(&self) -> Result<f64> {
        Ok((self.eval)(&self.tensors)?.0)
    }

    fn loss_with_pattern(&self) -> Result<(f64, Vec<bool>)> {
        let (l, _, p) = (self.eval)(&self.tensors)?;
        Ok((l, p))
    }

    fn gradient(&self) -> Result<Vec<Tensor>> {
        Ok((self.eval)(&self.tensors)?.1)
    }
}

fn fused(t: &Tensor) -> Result<FusedKernel> {
    FusedKernel::from_kernel(ConvKernel::new(t.clone())?)
}

fn scalar(t: &Tensor) -> f64 {
    t.data()[0]
}

/// `<R, sin(omega M)>` over the kernel `M` and `omega`.
pub fn sine_problem(rng: &mut RandomStream) -> OpProblem {
    let m = rng.gaussian_tensor(&[3, 4, 3, 3], 1.0);
    let probe = rng.gaussian_tensor(m.shape(), 1.0);
    let omega = Tensor::from_fn(&[1], |_| rng.uniform_in(0.5, 3.0));
    OpProblem::new(
        "sine",
        &["M", "omega"],
        vec![m, omega],
        Box::new(move |t| {
            let base = fused(&t[0])?;
            let loss = sine_modulate(&base, scalar(&t[1])).kernel.weights().dot(&probe)?;
            let (gm, gw) = sine_backward(&base, scalar(&t[1]), &probe)?;
            Ok((loss, vec![gm, Tensor::from_fn(&[1], |_| gw)], vec![]))
        }),
    )
}

/// `<R, omega M>`.
pub fn linear_problem(rng: &mut RandomStream) -> OpProblem {
    let m = rng.gaussian_tensor(&[3, 4, 3, 3], 1.0);
    let probe = rng.gaussian_tensor(m.shape(), 1.0);
    let omega = Tensor::from_fn(&[1], |_| rng.uniform_in(0.5, 3.0));
    OpProblem::new(
        "linear",
        &["M", "omega"],
        vec![m, omega],
        Box::new(move |t| {
            let base = fused(&t[0])?;
            let loss = linear_scale(&base, scalar(&t[1])).kernel.weights().dot(&probe)?;
            let (gm, gw) = linear_backward(&base, scalar(&t[1]), &probe)?;
            Ok((loss, vec![gm, Tensor::from_fn(&[1], |_| gw)], vec![]))
        }),
    )
}

/// `r omega + omega^2 / 2` through the clock net, including the token.
pub fn clock_problem(rng: &mut RandomStream) -> OpProblem {
    let width = 8;
    let w_q = rng.gaussian_tensor(&[1, width], 0.5);
    let p = rng.gaussian_tensor(&[width], 1.0);
    let s = Tensor::from_fn(&[1], |_| rng.uniform_in(0.5, 2.0));
    let c = Tensor::from_fn(&[1], |_| rng.uniform_in(0.5, 2.0));
    let r = rng.normal();
    OpProblem::new(
        "clock",
        &["W_q", "s", "c", "token"],
        vec![w_q, s, c, p],
        Box::new(move |t| {
            let params = ClockNetParams::new(t[0].clone(), scalar(&t[1]), scalar(&t[2]))?;
            let omega = clock_omega(&params, &t[3])?;
            let g = clock_backward(&params, &t[3], r + omega)?;
            let pattern = t[3].data().iter().map(|&v| v > 0.0).collect();
            Ok((
                r * omega + 0.5 * omega * omega,
                vec![
                    g.w_q,
                    Tensor::from_fn(&[1], |_| g.s),
                    Tensor::from_fn(&[1], |_| g.c),
                    g.token,
                ],
                pattern,
            ))
        }),
    )
}

/// `<R, fuse(A, W, B)>`.
pub fn fusion_problem(rng: &mut RandomStream) -> OpProblem {
    let (m, n, r, k) = (5, 4, 2, 3);
    let a = rng.gaussian_tensor(&[m, r], 1.0);
    let b = rng.gaussian_tensor(&[n, r], 1.0);
    let w = rng.gaussian_tensor(&[r, r, k, k], 1.0);
    let probe = rng.gaussian_tensor(&[n, m, k, k], 1.0);
    OpProblem::new(
        "fusion",
        &["A", "B", "W"],
        vec![a, b, w],
        Box::new(move |t| {
            let f = LowRankFactors::new(t[0].clone(), t[1].clone())?;
            let mid = MidKernel::new(t[2].clone())?;
            let loss = fuse_awb(&f, &mid)?.weights().dot(&probe)?;
            let g = fuse_backward(&f, &mid, &probe)?;
            Ok((loss, vec![g.a, g.b, g.w], vec![]))
        }),
    )
}

/// `<R, lowpass(K)>` with the default 7-tap, sigma 1 filter.
pub fn lowpass_problem(rng: &mut RandomStream) -> OpProblem {
    let k = rng.gaussian_tensor(&[3, 4, 3, 3], 1.0);
    let probe = rng.gaussian_tensor(k.shape(), 1.0);
    OpProblem::new(
        "lowpass",
        &["K"],
        vec![k],
        Box::new(move |t| {
            let mk = ModulatedKernel {
                kernel: ConvKernel::new(t[0].clone())?,
                omega: 1.0,
                filter: None,
            };
            let loss = lowpass_filter(&mk, 7, 1.0)?.kernel.weights().dot(&probe)?;
            Ok((loss, vec![lowpass_backward(&probe, 7, 1.0)?], vec![]))
        }),
    )
}

/// Names accepted by [`op_problem`].
pub const OP_NAMES: [&str; 5] = ["sine", "linear", "clock", "fusion", "lowpass"];

pub fn op_problem(name: &str, rng: &mut RandomStream) -> Result<OpProblem> {
    Ok(match name {
        "sine" => sine_problem(rng),
        "linear" => linear_problem(rng),
        "clock" => clock_problem(rng),
        "fusion" => fusion_problem(rng),
        "lowpass" => lowpass_problem(rng),
        _ => return Err(contract!("unknown operation {name:?}, expected one of {OP_NAMES:?}")),
    })
}
