//! Sine-AWB adapter machinery: fusion of the low-rank pipeline into one
//! kernel, per-task frequency modulation, Gaussian smoothing of the modulated
//! kernel, the clock network, and the analytic backward pass of each piece.

mod clock;
mod fusion;
mod modulate;

pub use clock::{
    clock_backward, clock_omega, clocknet_backward, clocknet_forward, ClockNetGrads, ClockNetParams, TaskToken,
};
pub use fusion::{
    fuse_awb, fuse_backward, kernel_to_matrix_view, matrix_view_to_kernel, pipeline_apply, FusedKernel, FusionGrads,
    LowRankFactors, MidKernel,
};
pub(crate) use modulate::check_filter;
pub use modulate::{
    linear_backward, linear_scale, lowpass_backward, lowpass_filter, lowpass_matrix, sine_backward, sine_modulate,
    FilterSpec, ModulatedKernel,
};
