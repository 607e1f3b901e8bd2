//! Desk-scale multi-task model: a frozen convolutional encoder with
//! task-agnostic low-rank adapters and frequency-switched task-specific
//! layers, followed by per-task decoder heads sharing one switched conv.

mod backbone;
mod checkpoint;
mod config;
mod gradcheck;
mod layers;
mod network;
mod opcheck;
mod params;

pub use backbone::{FrozenBackbone, FrozenLayer, PhiCache};
pub use checkpoint::{config_hash, Checkpoint, NamedTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Modulation, Variant, NUM_STAGES};
pub use gradcheck::{
    finite_diff_check, finite_diff_check_sampled, model_finite_diff_check, model_finite_diff_check_sampled,
    mse_with_grad, Differentiable, GradCheckReport, ModelGradCheck, ModelProblem, SignFlip, TensorCheck,
    MAX_CHECKED_PARAMS, REL_FLOOR, ZERO_GRAD_ANALYTIC, ZERO_GRAD_NUMERIC,
};
pub use layers::{
    decoder_backward, decoder_forward, ta_backward, ta_forward, task_kernel, task_kernel_backward, ts_backward,
    ts_forward, DecoderCache, DecoderGrads, DecoderTask, NormStats, TaCache, TaskKernel, TsCache, BN_EPS,
};
pub use network::{ForwardCache, Mode, Model, RunningStats, TaskPass, LORA_SCALING};
pub use opcheck::{
    clock_problem, fusion_problem, linear_problem, lowpass_problem, op_problem, sine_problem, OpProblem, OP_NAMES,
};
pub use params::{AwbIdx, ClockIdx, DecoderIdx, GradientBundle, Layout, ParamInfo, ParamStore, TaIdx, TsIdx};
