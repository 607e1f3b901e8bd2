use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Convolution weights laid out as `[out_channels, in_channels, kh, kw]`.
///
/// Spatial sizes are odd so that "same" zero padding is symmetric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    weights: Tensor,
}

impl ConvKernel {
    pub fn new(weights: Tensor) -> Result<Self> {
        weights.expect_ndim(4, "conv kernel")?;
        let s = weights.shape();
        if s[2].is_multiple_of(2) || s[3].is_multiple_of(2) {
            return Err(contract!("conv kernel spatial size must be odd, got {}x{}", s[2], s[3]));
        }
        Ok(Self { weights })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::new(Tensor::new(
            vec![out_channels, in_channels, kh, kw],
            vec![0.0; out_channels * in_channels * kh * kw],
        )?)
    }

    /// 1x1 kernel holding the matrix `m` of shape `[out, in]`.
    pub fn pointwise(m: &Tensor) -> Result<Self> {
        m.expect_ndim(2, "pointwise kernel matrix")?;
        let (o, i) = (m.shape()[0], m.shape()[1]);
        Self::new(m.clone().reshape(&[o, i, 1, 1])?)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kh(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn kw(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn into_weights(self) -> Tensor {
        self.weights
    }

    #[inline]
    pub fn at(&self, o: usize, c: usize, i: usize, j: usize) -> f64 {
        let (ci, kh, kw) = (self.in_channels(), self.kh(), self.kw());
        self.weights.data()[((o * ci + c) * kh + i) * kw + j]
    }
}

/// Output rows/cols `[lo, hi)` for which tap `k` of a centred kernel reads
/// inside an axis of length `n`.
#[inline]
fn valid_range(k: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (n + pad).saturating_sub(k).min(n);
    (lo, hi.max(lo))
}

fn check_input(input: &Tensor, kernel: &ConvKernel) -> Result<(usize, usize)> {
    input.expect_ndim(3, "conv2d input")?;
    if input.shape()[0] != kernel.in_channels() {
        return Err(contract!(
            "conv2d: input has {} channels but kernel expects {} (kernel shape {:?})",
            input.shape()[0],
            kernel.in_channels(),
            kernel.weights().shape()
        ));
    }
    Ok((input.shape()[1], input.shape()[2]))
}

/// Multi-channel cross-correlation with zero "same" padding and unit stride.
///
/// `out[o, y, x] = sum_{c,i,j} k[o, c, i, j] * in[c, y + i - kh/2, x + j - kw/2]`
pub fn conv2d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let (h, w) = check_input(input, kernel)?;
    let (co, ci, kh, kw) = (kernel.out_channels(), kernel.in_channels(), kernel.kh(), kernel.kw());
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = Tensor::zeros(&[co, h, w]);
    let x = input.data();
    let out_data = out.data_mut();
    for o in 0..co {
        let oplane = &mut out_data[o * h * w..(o + 1) * h * w];
        for c in 0..ci {
            let iplane = &x[c * h * w..(c + 1) * h * w];
            for i in 0..kh {
                let (ylo, yhi) = valid_range(i, ph, h);
                for j in 0..kw {
                    let wv = kernel.at(o, c, i, j);
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = valid_range(j, pw, w);
                    if xlo >= xhi {
                        continue;
                    }
                    for y in ylo..yhi {
                        let src = (y + i - ph) * w + j + xlo - pw;
                        let dst = &mut oplane[y * w + xlo..y * w + xhi];
                        let s = &iplane[src..src + (xhi - xlo)];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of a scalar loss with respect to the input of [`conv2d`]
/// (the adjoint of the zero-padded correlation).
pub fn conv2d_backward_input(grad_out: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    grad_out.expect_ndim(3, "conv2d grad_out")?;
    if grad_out.shape()[0] != kernel.out_channels() {
        return Err(contract!(
            "conv2d backward: gradient has {} channels, kernel produces {}",
            grad_out.shape()[0],
            kernel.out_channels()
        ));
    }
    let (h, w) = (grad_out.shape()[1], grad_out.shape()[2]);
    let (co, ci, kh, kw) = (kernel.out_channels(), kernel.in_channels(), kernel.kh(), kernel.kw());
    let (ph, pw) = (kh / 2, kw / 2);
    let mut gin = Tensor::zeros(&[ci, h, w]);
    let g = grad_out.data();
    let gin_data = gin.data_mut();
    for o in 0..co {
        let gplane = &g[o * h * w..(o + 1) * h * w];
        for c in 0..ci {
            let iplane = &mut gin_data[c * h * w..(c + 1) * h * w];
            for i in 0..kh {
                let (ylo, yhi) = valid_range(i, ph, h);
                for j in 0..kw {
                    let wv = kernel.at(o, c, i, j);
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = valid_range(j, pw, w);
                    if xlo >= xhi {
                        continue;
                    }
                    for y in ylo..yhi {
                        let dst = (y + i - ph) * w + j + xlo - pw;
                        let s = &gplane[y * w + xlo..y * w + xhi];
                        for (d, &v) in iplane[dst..dst + (xhi - xlo)].iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    Ok(gin)
}

/// Gradient with respect to the kernel weights, shaped like the kernel.
pub fn conv2d_backward_kernel(input: &Tensor, grad_out: &Tensor, kh: usize, kw: usize) -> Result<Tensor> {
    input.expect_ndim(3, "conv2d input")?;
    grad_out.expect_ndim(3, "conv2d grad_out")?;
    if input.shape()[1..] != grad_out.shape()[1..] {
        return Err(contract!(
            "conv2d backward: input {:?} and gradient {:?} differ spatially",
            input.shape(),
            grad_out.shape()
        ));
    }
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let co = grad_out.shape()[0];
    let (ph, pw) = (kh / 2, kw / 2);
    let mut gk = Tensor::zeros(&[co, ci, kh, kw]);
    let x = input.data();
    let g = grad_out.data();
    let gk_data = gk.data_mut();
    for o in 0..co {
        let gplane = &g[o * h * w..(o + 1) * h * w];
        for c in 0..ci {
            let iplane = &x[c * h * w..(c + 1) * h * w];
            for i in 0..kh {
                let (ylo, yhi) = valid_range(i, ph, h);
                for j in 0..kw {
                    let (xlo, xhi) = valid_range(j, pw, w);
                    let mut acc = 0.0;
                    let rows = if xlo < xhi { ylo..yhi } else { 0..0 };
                    for y in rows {
                        let src = (y + i - ph) * w + j + xlo - pw;
                        let gs = &gplane[y * w + xlo..y * w + xhi];
                        acc += gs
                            .iter()
                            .zip(&iplane[src..src + (xhi - xlo)])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                    gk_data[((o * ci + c) * kh + i) * kw + j] = acc;
                }
            }
        }
    }
    Ok(gk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RandomStream;

    /// Direct evaluation of the correlation sum with explicit bounds checks.
    fn naive_conv(input: &Tensor, k: &ConvKernel) -> Tensor {
        let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let co = k.out_channels();
        let (kh, kw) = (k.kh() as isize, k.kw() as isize);
        let mut out = Tensor::zeros(&[co, h, w]);
        for o in 0..co {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let yy = y + i - kh / 2;
                                let xx = x + j - kw / 2;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += k.at(o, c, i as usize, j as usize)
                                    * input.data()[(c * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                    out.data_mut()[(o * h + y as usize) * w + x as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_and_zero_kernels() {
        let mut rng = RandomStream::new(1, 0);
        let x = rng.gaussian_tensor(&[1, 5, 6], 1.0);
        let one = ConvKernel::new(Tensor::filled(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(conv2d(&x, &one).unwrap(), x);
        let zero = ConvKernel::zeros(2, 1, 3, 3).unwrap();
        assert_eq!(conv2d(&x, &zero).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn matches_naive_loop_3x8x8() {
        let mut rng = RandomStream::new(7, 3);
        let x = rng.gaussian_tensor(&[3, 8, 8], 1.0);
        let k = ConvKernel::new(rng.gaussian_tensor(&[2, 3, 3, 3], 1.0)).unwrap();
        let got = conv2d(&x, &k).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&x, &k)).unwrap() <= 1e-12);
    }

    #[test]
    fn matches_naive_loop_random_shapes() {
        let mut rng = RandomStream::new(11, 0);
        for _ in 0..50 {
            let ci = 1 + rng.below(4);
            let co = 1 + rng.below(4);
            let h = 1 + rng.below(8);
            let w = 1 + rng.below(8);
            let k = [1, 3, 7][rng.below(3)];
            let x = rng.gaussian_tensor(&[ci, h, w], 1.0);
            let kern = ConvKernel::new(rng.gaussian_tensor(&[co, ci, k, k], 1.0)).unwrap();
            let d = conv2d(&x, &kern).unwrap().max_abs_diff(&naive_conv(&x, &kern)).unwrap();
            assert!(d <= 1e-12, "ci={ci} co={co} h={h} w={w} k={k}: {d}");
        }
    }

    #[test]
    fn linear_in_input() {
        let mut rng = RandomStream::new(5, 0);
        for _ in 0..10 {
            let x1 = rng.gaussian_tensor(&[2, 6, 5], 1.0);
            let x2 = rng.gaussian_tensor(&[2, 6, 5], 1.0);
            let k = ConvKernel::new(rng.gaussian_tensor(&[3, 2, 3, 3], 1.0)).unwrap();
            let (a, b) = (rng.normal(), rng.normal());
            let mut mix = x1.scale(a);
            mix.axpy(b, &x2).unwrap();
            let lhs = conv2d(&mix, &k).unwrap();
            let mut rhs = conv2d(&x1, &k).unwrap().scale(a);
            rhs.axpy(b, &conv2d(&x2, &k).unwrap()).unwrap();
            assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint() {
        // <conv(x), g> == <x, conv_T(g)> and == <k, dk>
        let mut rng = RandomStream::new(9, 1);
        let x = rng.gaussian_tensor(&[3, 7, 5], 1.0);
        let g = rng.gaussian_tensor(&[2, 7, 5], 1.0);
        let k = ConvKernel::new(rng.gaussian_tensor(&[2, 3, 5, 3], 1.0)).unwrap();
        let lhs = conv2d(&x, &k).unwrap().dot(&g).unwrap();
        let via_input = x.dot(&conv2d_backward_input(&g, &k).unwrap()).unwrap();
        let via_kernel = k.weights().dot(&conv2d_backward_kernel(&x, &g, 5, 3).unwrap()).unwrap();
        assert!((lhs - via_input).abs() < 1e-10);
        assert!((lhs - via_kernel).abs() < 1e-10);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = ConvKernel::zeros(1, 3, 3, 3).unwrap();
        let err = conv2d(&x, &k).unwrap_err().to_string();
        assert!(err.contains("2 channels") && err.contains("expects 3"), "{err}");
        assert!(ConvKernel::new(Tensor::zeros(&[1, 1, 2, 3])).is_err());
    }
}
