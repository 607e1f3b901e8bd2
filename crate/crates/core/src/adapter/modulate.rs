use serde::{Deserialize, Serialize};

use super::fusion::{kernel_to_matrix_view, matrix_view_to_kernel, FusedKernel};
use crate::error::{contract, Result};
use crate::numerics::{conv2d, conv2d_backward_input, gaussian_kernel, ConvKernel, Tensor};

/// Gaussian low-pass settings: odd tap count and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub size: usize,
    pub sigma: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self { size: 7, sigma: 1.0 }
    }
}

/// A task-specific kernel derived from a shared fused base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulatedKernel {
    pub kernel: ConvKernel,
    pub omega: f64,
    pub filter: Option<FilterSpec>,
}

impl ModulatedKernel {
    pub fn matrix_view(&self) -> Tensor {
        kernel_to_matrix_view(self.kernel.weights())
    }
}

/// Elementwise `sin(omega * M)`.
pub fn sine_modulate(base: &FusedKernel, omega: f64) -> ModulatedKernel {
    let w = base.weights().map(|v| (omega * v).sin());
    ModulatedKernel {
        kernel: ConvKernel::new(w).expect("same shape as a valid kernel"),
        omega,
        filter: None,
    }
}

/// Elementwise `omega * M`: frequency as a plain scale, no sine.
pub fn linear_scale(base: &FusedKernel, omega: f64) -> ModulatedKernel {
    ModulatedKernel {
        kernel: ConvKernel::new(base.weights().scale(omega)).expect("same shape as a valid kernel"),
        omega,
        filter: None,
    }
}

/// Returns `(dL/dM, dL/domega)` for [`sine_modulate`].
pub fn sine_backward(base: &FusedKernel, omega: f64, upstream: &Tensor) -> Result<(Tensor, f64)> {
    let m = base.weights();
    upstream.expect_shape(m.shape(), "sine_backward upstream")?;
    let mut grad_base = Tensor::zeros(m.shape());
    let mut grad_omega = 0.0;
    for ((g, &mv), &up) in grad_base.data_mut().iter_mut().zip(m.data()).zip(upstream.data()) {
        let cos = (omega * mv).cos();
        *g = up * omega * cos;
        grad_omega += up * mv * cos;
    }
    Ok((grad_base, grad_omega))
}

/// Returns `(dL/dM, dL/domega)` for [`linear_scale`].
pub fn linear_backward(base: &FusedKernel, omega: f64, upstream: &Tensor) -> Result<(Tensor, f64)> {
    let m = base.weights();
    upstream.expect_shape(m.shape(), "linear_backward upstream")?;
    Ok((upstream.scale(omega), upstream.dot(m)?))
}

fn lowpass_taps(size: usize, sigma: f64) -> Result<ConvKernel> {
    let g = gaussian_kernel(size, sigma)?;
    ConvKernel::new(g.reshape(&[1, 1, size, size])?)
}

/// Smooths a `[m, cols]` matrix with the normalised Gaussian, zero padded.
pub fn lowpass_matrix(view: &Tensor, size: usize, sigma: f64) -> Result<Tensor> {
    view.expect_ndim(2, "low-pass input")?;
    let (m, cols) = (view.shape()[0], view.shape()[1]);
    let taps = lowpass_taps(size, sigma)?;
    let img = view.clone().reshape(&[1, m, cols])?;
    conv2d(&img, &taps)?.reshape(&[m, cols])
}

/// Gaussian low-pass over the kernel's `[m, n*k*k]` matrix view.
pub fn lowpass_filter(mk: &ModulatedKernel, size: usize, sigma: f64) -> Result<ModulatedKernel> {
    let n = mk.kernel.out_channels();
    let k = mk.kernel.kh();
    let smoothed = lowpass_matrix(&mk.matrix_view(), size, sigma)?;
    Ok(ModulatedKernel {
        kernel: ConvKernel::new(matrix_view_to_kernel(&smoothed, n, k)?)?,
        omega: mk.omega,
        filter: Some(FilterSpec { size, sigma }),
    })
}

/// Adjoint of [`lowpass_filter`] applied to a kernel-shaped gradient.
pub fn lowpass_backward(grad_filtered: &Tensor, size: usize, sigma: f64) -> Result<Tensor> {
    grad_filtered.expect_ndim(4, "low-pass gradient")?;
    let s = grad_filtered.shape();
    let (n, m, k) = (s[0], s[1], s[2]);
    let view = kernel_to_matrix_view(grad_filtered);
    let cols = view.shape()[1];
    let taps = lowpass_taps(size, sigma)?;
    let g = conv2d_backward_input(&view.reshape(&[1, m, cols])?, &taps)?;
    matrix_view_to_kernel(&g.reshape(&[m, cols])?, n, k)
}

pub(crate) fn check_filter(spec: &FilterSpec) -> Result<()> {
    if spec.size == 0 || spec.size.is_multiple_of(2) || !(spec.sigma > 0.0) {
        return Err(contract!(
            "invalid low-pass filter: size {} sigma {}",
            spec.size,
            spec.sigma
        ));
    }
    Ok(())
}
