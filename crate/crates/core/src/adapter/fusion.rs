use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{conv2d, ConvKernel, Tensor};

/// LoRA factors `A: [m, r]` and `B: [n, r]`; the update is `A B^T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankFactors {
    a: Tensor,
    b: Tensor,
}

impl LowRankFactors {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        a.expect_ndim(2, "factor A")?;
        b.expect_ndim(2, "factor B")?;
        let (m, r) = (a.shape()[0], a.shape()[1]);
        let (n, rb) = (b.shape()[0], b.shape()[1]);
        if r != rb {
            return Err(contract!("factor ranks differ: A is {m}x{r}, B is {n}x{rb}"));
        }
        if r > m.min(n) {
            return Err(contract!("rank {r} exceeds min(m, n) = {}", m.min(n)));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    pub fn m(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Spatial kernel `W: [r, r, k, k]` acting on the rank channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MidKernel {
    w: Tensor,
}

impl MidKernel {
    pub fn new(w: Tensor) -> Result<Self> {
        w.expect_ndim(4, "mid kernel")?;
        let s = w.shape();
        if s[0] != s[1] || s[2] != s[3] || s[2].is_multiple_of(2) {
            return Err(contract!("mid kernel must be [r, r, k, k] with odd k, got {:?}", s));
        }
        Ok(Self { w })
    }

    pub fn rank(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn weights(&self) -> &Tensor {
        &self.w
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.w
    }

    /// The `r x r` matrix at spatial offset `(u, v)`.
    pub fn tap(&self, u: usize, v: usize) -> Tensor {
        let (r, k) = (self.rank(), self.size());
        Tensor::from_fn(&[r, r], |idx| {
            let (i, j) = (idx / r, idx % r);
            self.w.data()[((i * r + j) * k + u) * k + v]
        })
    }
}

/// The fused base `A W B^T` as an `n <- m` convolution kernel `[n, m, k, k]`.
///
/// The matrix view is `[m, n*k*k]` with
/// `view[c, (o*k + u)*k + v] = kernel[o, c, u, v]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedKernel {
    kernel: ConvKernel,
}

impl FusedKernel {
    pub fn from_kernel(kernel: ConvKernel) -> Result<Self> {
        if kernel.kh() != kernel.kw() {
            return Err(contract!(
                "fused kernels are square, got {}x{}",
                kernel.kh(),
                kernel.kw()
            ));
        }
        Ok(Self { kernel })
    }

    pub fn kernel(&self) -> &ConvKernel {
        &self.kernel
    }

    pub fn weights(&self) -> &Tensor {
        self.kernel.weights()
    }

    pub fn matrix_view(&self) -> Tensor {
        kernel_to_matrix_view(self.kernel.weights())
    }
}

/// `[n, m, k, k]` kernel tensor to its `[m, n*k*k]` matrix view.
pub fn kernel_to_matrix_view(kernel: &Tensor) -> Tensor {
    let s = kernel.shape();
    let (n, m, k) = (s[0], s[1], s[2]);
    let kk = k * k;
    let mut view = Tensor::zeros(&[m, n * kk]);
    let src = kernel.data();
    let dst = view.data_mut();
    for o in 0..n {
        for c in 0..m {
            let from = &src[(o * m + c) * kk..(o * m + c + 1) * kk];
            dst[c * n * kk + o * kk..c * n * kk + (o + 1) * kk].copy_from_slice(from);
        }
    }
    view
}

/// Inverse of [`kernel_to_matrix_view`].
pub fn matrix_view_to_kernel(view: &Tensor, n: usize, k: usize) -> Result<Tensor> {
    view.expect_ndim(2, "matrix view")?;
    let kk = k * k;
    let m = view.shape()[0];
    if view.shape()[1] != n * kk {
        return Err(contract!(
            "matrix view {:?} does not hold {n} output channels of {k}x{k} taps",
            view.shape()
        ));
    }
    let mut kernel = Tensor::zeros(&[n, m, k, k]);
    let src = view.data();
    let dst = kernel.data_mut();
    for o in 0..n {
        for c in 0..m {
            dst[(o * m + c) * kk..(o * m + c + 1) * kk]
                .copy_from_slice(&src[c * n * kk + o * kk..c * n * kk + (o + 1) * kk]);
        }
    }
    Ok(kernel)
}

fn check_ranks(f: &LowRankFactors, w: &MidKernel) -> Result<()> {
    if w.rank() != f.rank() {
        return Err(contract!(
            "mid kernel acts on {} channels but the factors have rank {}",
            w.rank(),
            f.rank()
        ));
    }
    Ok(())
}

/// Fuses reduce (`A^T`), spatial conv (`W`) and expand (`B`) into one kernel
/// whose tap at `(u, v)` is `B W[:, :, u, v] A^T`.
pub fn fuse_awb(f: &LowRankFactors, w: &MidKernel) -> Result<FusedKernel> {
    check_ranks(f, w)?;
    let (m, n, k) = (f.m(), f.n(), w.size());
    let at = f.a().transpose2()?;
    let mut out = Tensor::zeros(&[n, m, k, k]);
    for u in 0..k {
        for v in 0..k {
            let tap = f.b().matmul(&w.tap(u, v))?.matmul(&at)?;
            for o in 0..n {
                for c in 0..m {
                    out.data_mut()[((o * m + c) * k + u) * k + v] = tap.at2(o, c);
                }
            }
        }
    }
    FusedKernel::from_kernel(ConvKernel::new(out)?)
}

/// Runs the three stages separately: `x -> A^T x -> W * . -> B .`.
pub fn pipeline_apply(f: &LowRankFactors, w: &MidKernel, x: &Tensor) -> Result<Tensor> {
    check_ranks(f, w)?;
    x.expect_ndim(3, "pipeline input")?;
    if x.shape()[0] != f.m() {
        return Err(contract!(
            "pipeline input has {} channels, factors expect {}",
            x.shape()[0],
            f.m()
        ));
    }
    let reduce = ConvKernel::pointwise(&f.a().transpose2()?)?;
    let mid = ConvKernel::new(w.weights().clone())?;
    let expand = ConvKernel::pointwise(f.b())?;
    let z = conv2d(x, &reduce)?;
    let z = conv2d(&z, &mid)?;
    conv2d(&z, &expand)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionGrads {
    pub a: Tensor,
    pub b: Tensor,
    pub w: Tensor,
}

/// Gradients of a loss through [`fuse_awb`], given the gradient with respect
/// to the fused `[n, m, k, k]` kernel.
pub fn fuse_backward(f: &LowRankFactors, w: &MidKernel, grad_fused: &Tensor) -> Result<FusionGrads> {
    check_ranks(f, w)?;
    let (m, n, r, k) = (f.m(), f.n(), f.rank(), w.size());
    grad_fused.expect_shape(&[n, m, k, k], "fused kernel gradient")?;
    let mut ga = Tensor::zeros(&[m, r]);
    let mut gb = Tensor::zeros(&[n, r]);
    let mut gw = Tensor::zeros(&[r, r, k, k]);
    let bt = f.b().transpose2()?;
    for u in 0..k {
        for v in 0..k {
            let g = Tensor::from_fn(&[n, m], |idx| {
                let (o, c) = (idx / m, idx % m);
                grad_fused.data()[((o * m + c) * k + u) * k + v]
            });
            let wt = w.tap(u, v);
            // dB += G A W^T ; dW = B^T G A ; dA += G^T B W
            gb.axpy(1.0, &g.matmul(f.a())?.matmul(&wt.transpose2()?)?)?;
            let gw_uv = bt.matmul(&g)?.matmul(f.a())?;
            for i in 0..r {
                for j in 0..r {
                    gw.data_mut()[((i * r + j) * k + u) * k + v] = gw_uv.at2(i, j);
                }
            }
            ga.axpy(1.0, &g.transpose2()?.matmul(f.b())?.matmul(&wt)?)?;
        }
    }
    Ok(FusionGrads { a: ga, b: gb, w: gw })
}
