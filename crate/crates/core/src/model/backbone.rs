use super::config::{ModelConfig, NUM_STAGES};
use crate::error::Result;
use crate::numerics::{avg_pool2, avg_pool2_backward, conv2d, conv2d_backward_input, ConvKernel, RandomStream, Tensor};

/// Frozen per-layer map `phi(x) = x + tanh(conv(x, W0))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLayer {
    pub weight: ConvKernel,
}

/// What [`FrozenLayer::forward`] keeps for the backward pass.
#[derive(Clone, Debug)]
pub struct PhiCache {
    pub tanh: Tensor,
}

impl FrozenLayer {
    /// A layer whose frozen map is the identity.
    pub fn identity(channels: usize) -> Result<Self> {
        Ok(Self {
            weight: ConvKernel::zeros(channels, channels, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, PhiCache)> {
        let t = conv2d(x, &self.weight)?.map(f64::tanh);
        Ok((x.add(&t)?, PhiCache { tanh: t }))
    }

    /// Gradient with respect to `x`.
    pub fn backward(&self, cache: &PhiCache, grad: &Tensor) -> Result<Tensor> {
        let gq = grad.zip_map(&cache.tanh, |g, t| g * (1.0 - t * t))?;
        grad.add(&conv2d_backward_input(&gq, &self.weight)?)
    }
}

/// Four-stage frozen convolutional encoder.
///
/// Stage 0 starts with `tanh(conv3x3(x))`; later stages start with a 2x2
/// average pool and a linear 1x1 channel map. Weights are drawn once from
/// the config seed and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    pub stem: ConvKernel,
    pub transitions: Vec<ConvKernel>,
    pub layers: Vec<Vec<FrozenLayer>>,
}

impl FrozenBackbone {
    pub fn init(config: &ModelConfig, rng: &mut RandomStream) -> Result<Self> {
        let ch = &config.stage_channels;
        let stem_std = 1.0 / ((config.in_channels * 9) as f64).sqrt();
        let stem = ConvKernel::new(rng.gaussian_tensor(&[ch[0], config.in_channels, 3, 3], stem_std))?;
        let mut transitions = Vec::new();
        for s in 1..NUM_STAGES {
            let std = 1.0 / (ch[s - 1] as f64).sqrt();
            transitions.push(ConvKernel::new(rng.gaussian_tensor(&[ch[s], ch[s - 1], 1, 1], std))?);
        }
        let k = config.frozen_kernel;
        let mut layers = Vec::new();
        for &c in ch.iter() {
            let std = 1.0 / ((c * k * k) as f64).sqrt();
            let stage = (0..config.layers_per_stage)
                .map(|_| {
                    Ok(FrozenLayer {
                        weight: ConvKernel::new(rng.gaussian_tensor(&[c, c, k, k], std))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(stage);
        }
        Ok(Self {
            stem,
            transitions,
            layers,
        })
    }

    /// First operation of a stage: the stem for stage 0, pool and transition after.
    pub fn entry(&self, stage: usize, x: &Tensor) -> Result<Tensor> {
        if stage == 0 {
            Ok(conv2d(x, &self.stem)?.map(f64::tanh))
        } else {
            conv2d(&avg_pool2(x)?, &self.transitions[stage - 1])
        }
    }

    /// Gradient with respect to the previous stage's output; `None` for the stem.
    pub fn entry_backward(&self, stage: usize, grad: &Tensor) -> Result<Option<Tensor>> {
        if stage == 0 {
            return Ok(None);
        }
        let g = conv2d_backward_input(grad, &self.transitions[stage - 1])?;
        Ok(Some(avg_pool2_backward(&g)?))
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![self.stem.weights()];
        out.extend(self.transitions.iter().map(|k| k.weights()));
        for stage in &self.layers {
            out.extend(stage.iter().map(|l| l.weight.weights()));
        }
        out
    }
}
