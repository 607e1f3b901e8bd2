//! Dense tensors and the numerical primitives the adapters are built from.

mod conv;
mod gaussian;
mod linalg;
mod resample;
mod rng;
mod tensor;

pub use conv::{conv2d, conv2d_backward_input, conv2d_backward_kernel, ConvKernel};
pub use gaussian::gaussian_kernel;
pub use linalg::singular_values;
pub use resample::{avg_pool2, avg_pool2_backward, upsample_nearest, upsample_nearest_backward};
pub use rng::{sample_gaussian, RandomStream};
pub(crate) use tensor::ensure_finite;
pub use tensor::Tensor;
