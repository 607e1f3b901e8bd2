use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{contract, Result};
use crate::numerics::{conv2d, gaussian_kernel, ConvKernel, RandomStream, Tensor};

/// Stream ids used for dataset generation, disjoint from model streams.
const INPUT_STREAM: u64 = 100;
const MIX_STREAM: u64 = 101;

/// Spread of the smoothing applied to raw noise when drawing inputs.
const INPUT_SMOOTH_SIZE: usize = 5;
const INPUT_SMOOTH_SIGMA: f64 = 1.0;

/// Deterministic map from an input image to a task target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TargetOperator {
    GaussianBlur {
        size: usize,
        sigma: f64,
    },
    /// `sqrt(dx^2 + dy^2)` per channel with central differences, zero padded.
    EdgeMagnitude,
    ChannelNegation,
    /// `y = M x` per pixel with a fixed `[C, C]` matrix.
    ChannelMix {
        matrix: Tensor,
    },
}

impl TargetOperator {
    pub fn name(&self) -> &'static str {
        match self {
            TargetOperator::GaussianBlur { .. } => "gaussian-blur",
            TargetOperator::EdgeMagnitude => "edge-magnitude",
            TargetOperator::ChannelNegation => "channel-negation",
            TargetOperator::ChannelMix { .. } => "channel-mix",
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_ndim(3, "target operator input")?;
        match self {
            TargetOperator::GaussianBlur { size, sigma } => depthwise(x, &gaussian_kernel(*size, *sigma)?),
            TargetOperator::EdgeMagnitude => Ok(edge_magnitude(x)),
            TargetOperator::ChannelNegation => Ok(x.scale(-1.0)),
            TargetOperator::ChannelMix { matrix } => conv2d(x, &ConvKernel::pointwise(matrix)?),
        }
    }
}

/// Same 2-D filter on every channel.
fn depthwise(x: &Tensor, taps: &Tensor) -> Result<Tensor> {
    let c = x.shape()[0];
    let k = taps.shape()[0];
    let mut w = Tensor::zeros(&[c, c, k, k]);
    for ch in 0..c {
        let off = (ch * c + ch) * k * k;
        w.data_mut()[off..off + k * k].copy_from_slice(taps.data());
    }
    conv2d(x, &ConvKernel::new(w)?)
}

fn edge_magnitude(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let src = x.channel(ch);
        let at = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                src[y as usize * w + x as usize]
            }
        };
        let dst = out.channel_mut(ch);
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let dx = 0.5 * (at(y, xx + 1) - at(y, xx - 1));
                let dy = 0.5 * (at(y + 1, xx) - at(y - 1, xx));
                dst[y as usize * w + xx as usize] = (dx * dx + dy * dy).sqrt();
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub name: String,
    pub operator: TargetOperator,
    pub lower_is_better: bool,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub train_inputs: Vec<Tensor>,
    pub val_inputs: Vec<Tensor>,
    /// `train_targets[task][image]`.
    pub train_targets: Vec<Vec<Tensor>>,
    pub val_targets: Vec<Vec<Tensor>>,
}

/// Number of operators [`make_toy_suite`] can draw tasks from.
pub const NUM_OPERATORS: usize = 4;

/// The operator behind task slot `id`, in a fixed order.
pub fn operator(config: &TrainConfig, id: usize) -> Result<TargetOperator> {
    let c = config.model.in_channels;
    Ok(match id {
        0 => TargetOperator::GaussianBlur {
            size: config.blur_size,
            sigma: config.blur_sigma,
        },
        1 => TargetOperator::EdgeMagnitude,
        2 => TargetOperator::ChannelNegation,
        3 => {
            let mut rng = RandomStream::new(config.seed, MIX_STREAM);
            TargetOperator::ChannelMix {
                matrix: rng.gaussian_tensor(&[c, c], 1.0 / (c as f64).sqrt()),
            }
        }
        _ => {
            return Err(contract!(
                "task {id} requested but only {NUM_OPERATORS} operators exist"
            ))
        }
    })
}

/// Smooth Gaussian random field, standardised to zero mean and unit variance.
fn smooth_field(rng: &mut RandomStream, c: usize, size: usize, taps: &Tensor) -> Result<Tensor> {
    let raw = rng.gaussian_tensor(&[c, size, size], 1.0);
    let x = depthwise(&raw, taps)?;
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt();
    Ok(x.map(|v| (v - mean) * inv))
}

/// Inputs and targets for the operators listed in `task_ids`.
pub fn make_suite_for(config: &TrainConfig, task_ids: &[usize]) -> Result<(ToyDataset, Vec<ToyTask>)> {
    let weights = config.task_weights();
    let tasks = task_ids
        .iter()
        .map(|&id| {
            let op = operator(config, id)?;
            Ok(ToyTask {
                name: op.name().to_string(),
                operator: op,
                lower_is_better: true,
                weight: weights[id],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = RandomStream::new(config.seed, INPUT_STREAM);
    let taps = gaussian_kernel(INPUT_SMOOTH_SIZE, INPUT_SMOOTH_SIGMA)?;
    let (c, s) = (config.model.in_channels, config.model.image_size);
    let mut draw = |n: usize| -> Result<Vec<Tensor>> { (0..n).map(|_| smooth_field(&mut rng, c, s, &taps)).collect() };
    let train_inputs = draw(config.train_size)?;
    let val_inputs = draw(config.val_size)?;
    let targets = |xs: &[Tensor]| -> Result<Vec<Vec<Tensor>>> {
        tasks
            .iter()
            .map(|t| xs.iter().map(|x| t.operator.apply(x)).collect())
            .collect()
    };
    Ok((
        ToyDataset {
            train_targets: targets(&train_inputs)?,
            val_targets: targets(&val_inputs)?,
            train_inputs,
            val_inputs,
        },
        tasks,
    ))
}

/// The `T` tasks of `config` on a shared set of inputs.
pub fn make_toy_suite(config: &TrainConfig) -> Result<(ToyDataset, Vec<ToyTask>)> {
    let t = config.model.num_tasks;
    if t > NUM_OPERATORS {
        return Err(contract!("{t} tasks requested, at most {NUM_OPERATORS} are defined"));
    }
    make_suite_for(config, &(0..t).collect::<Vec<_>>())
}
