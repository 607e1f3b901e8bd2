//! Frequency-switched low-rank adapters for parameter-efficient multi-task
//! learning.
//!
//! A shared low-rank convolution base `A W B^T` is fused into one kernel and
//! turned into task-specific kernels by an elementwise `sin(omega_t * .)`,
//! where each task's frequency comes from a tiny clock network fed by a task
//! token. The crate contains the adapter math with analytic gradients, a
//! desk-scale multi-task model and trainer, and the numerical analyses
//! (decorrelation, rank expansion, gradient conflict) that go with it.

pub mod adapter;
pub mod analysis;
pub mod cli;
pub mod error;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
