use rayon::prelude::*;

use super::backbone::{FrozenBackbone, FrozenLayer};
use super::config::{ModelConfig, NUM_STAGES};
use super::layers::{
    decoder_backward, decoder_forward, ta_backward, ta_forward, task_kernel, task_kernel_backward, ts_backward,
    ts_forward, DecoderCache, DecoderTask, NormStats, TaCache, TaskKernel, TsCache,
};
use super::params::{ClockIdx, GradientBundle, ParamStore, TsIdx};
use crate::adapter::{ClockNetGrads, FusionGrads};
use crate::error::{contract, Error, Result};
use crate::numerics::{ensure_finite, RandomStream, Tensor};

/// Scaling of every task-agnostic low-rank update.
pub const LORA_SCALING: f64 = 1.0;

const BACKBONE_STREAM: u64 = 0;
const PARAM_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in the decoder normalization.
    Train,
    /// Running statistics in the decoder normalization.
    Eval,
}

/// Running normalization statistics of one task's decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    backbone: FrozenBackbone,
    params: ParamStore,
    running: Vec<RunningStats>,
    version: u64,
}

enum LayerCache {
    Ta(TaCache),
    Ts(TsCache),
}

struct ImageCache {
    stages: Vec<Vec<LayerCache>>,
}

/// Everything [`Model::backward`] needs from a forward pass.
pub struct ForwardCache {
    task: usize,
    version: u64,
    images: Vec<ImageCache>,
    enc_kernels: Vec<TaskKernel>,
    dec_kernel: TaskKernel,
    decoder: DecoderCache,
}

impl ForwardCache {
    pub fn task(&self) -> usize {
        self.task
    }

    /// Batch mean and variance seen by the decoder normalization.
    pub fn norm_stats(&self) -> (&Tensor, &Tensor) {
        (&self.decoder.mean, &self.decoder.var)
    }

    /// Which decoder ReLU units are active, image by image.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.decoder.relu_pattern()
    }
}

impl Model {
    /// Backbone and trainable tensors are drawn from independent streams of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = FrozenBackbone::init(&config, &mut RandomStream::new(seed, BACKBONE_STREAM))?;
        let params = ParamStore::init(&config, &mut RandomStream::new(seed, PARAM_STREAM))?;
        let running = (0..config.num_tasks)
            .map(|_| RunningStats {
                mean: Tensor::zeros(&[config.decoder_hidden]),
                var: Tensor::filled(&[config.decoder_hidden], 1.0),
            })
            .collect();
        Ok(Self {
            config,
            backbone,
            params,
            running,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &FrozenBackbone {
        &self.backbone
    }

    /// Replaces the frozen backbone. Meant for tests that need a known `phi`.
    pub fn set_backbone(&mut self, backbone: FrozenBackbone) {
        self.backbone = backbone;
        self.version += 1;
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable access invalidates every outstanding forward cache.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.version += 1;
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    /// `running = (1 - momentum) running + momentum batch`.
    pub fn update_running_stats(&mut self, cache: &ForwardCache, momentum: f64) -> Result<()> {
        let (mean, var) = cache.norm_stats();
        let rs = &mut self.running[cache.task];
        rs.mean = rs.mean.scale(1.0 - momentum);
        rs.mean.axpy(momentum, mean)?;
        rs.var = rs.var.scale(1.0 - momentum);
        rs.var.axpy(momentum, var)?;
        Ok(())
    }

    pub fn num_trainable(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.config.num_tasks {
            Err(Error::UnknownTask(task))
        } else {
            Ok(())
        }
    }

    fn switched_kernel(&self, idx: &TsIdx, task: usize) -> Result<TaskKernel> {
        let (f, w) = self.params.base(idx.base_for(task))?;
        let clock = self.params.clock(idx.clock)?;
        task_kernel(
            &f,
            &w,
            &clock,
            self.params.token(task)?,
            self.config.variant.modulation(),
            self.config.filter,
        )
    }

    /// Final kernel of each task-specific encoder layer, then the decoder's.
    pub fn task_kernels(&self, task: usize) -> Result<Vec<TaskKernel>> {
        self.check_task(task)?;
        let mut out = self
            .params
            .layout
            .ts
            .iter()
            .map(|idx| self.switched_kernel(idx, task))
            .collect::<Result<Vec<_>>>()?;
        out.push(self.switched_kernel(&self.params.layout.decoder.main, task)?);
        Ok(out)
    }

    fn decoder_task(&self, task: usize) -> DecoderTask<'_> {
        let d = &self.params.layout.decoder;
        let p = |i: usize| self.params.get(i);
        DecoderTask {
            proj: d.proj[task].map(p),
            bias: p(d.bias[task]),
            gamma: p(d.gamma[task]),
            beta: p(d.beta[task]),
            tail: p(d.tail[task]),
            tail_bias: p(d.tail_bias[task]),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        x.expect_shape(&[self.config.in_channels, s, s], "model input")
    }

    /// Encoder features of one image; one tensor per stage.
    fn encode(&self, x: &Tensor, kernels: &[TaskKernel]) -> Result<(Vec<Tensor>, ImageCache)> {
        let layout = &self.params.layout;
        let mut feats = Vec::with_capacity(NUM_STAGES);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut cur = x.clone();
        for s in 0..NUM_STAGES {
            let mut h = self.backbone.entry(s, &cur)?;
            let mut caches = Vec::new();
            let layers = &self.backbone.layers[s];
            for (l, ta) in layout.ta[s].iter().enumerate() {
                let f = self.params.factors(ta.a, ta.b)?;
                let (y, c) = ta_forward(&layers[l], &f, LORA_SCALING, &h)?;
                caches.push(LayerCache::Ta(c));
                h = y;
            }
            let (y, c) = ts_forward(layers.last().expect("at least one layer"), &kernels[s], &h)?;
            caches.push(LayerCache::Ts(c));
            feats.push(y.clone());
            stages.push(caches);
            cur = y;
        }
        Ok((feats, ImageCache { stages }))
    }

    /// Predictions for a batch of inputs on one task.
    pub fn forward(&self, batch: &[Tensor], task: usize, mode: Mode) -> Result<(Vec<Tensor>, ForwardCache)> {
        self.check_task(task)?;
        if batch.is_empty() {
            return Err(contract!("forward needs at least one input"));
        }
        for x in batch {
            self.check_input(x)?;
        }
        let mut kernels = self.task_kernels(task)?;
        let dec_kernel = kernels.pop().expect("decoder kernel");
        let mut feats = Vec::with_capacity(batch.len());
        let mut images = Vec::with_capacity(batch.len());
        for x in batch {
            let (f, c) = self.encode(x, &kernels)?;
            feats.push(f);
            images.push(c);
        }
        let stats = match mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => NormStats::Fixed {
                mean: &self.running[task].mean,
                var: &self.running[task].var,
            },
        };
        let (preds, decoder) = decoder_forward(&feats, &self.decoder_task(task), &dec_kernel, stats)?;
        Ok((
            preds,
            ForwardCache {
                task,
                version: self.version,
                images,
                enc_kernels: kernels,
                dec_kernel,
                decoder,
            },
        ))
    }

    /// Encoder stage features only (no decoder), one `Vec` per input.
    pub fn encoder_features(&self, batch: &[Tensor], task: usize) -> Result<Vec<Vec<Tensor>>> {
        let mut kernels = self.task_kernels(task)?;
        kernels.pop();
        batch
            .iter()
            .map(|x| {
                self.check_input(x)?;
                Ok(self.encode(x, &kernels)?.0)
            })
            .collect()
    }

    fn add_switched_grads(
        &self,
        bundle: &mut GradientBundle,
        idx: &TsIdx,
        task: usize,
        fusion: FusionGrads,
        clock: Option<ClockNetGrads>,
    ) -> Result<()> {
        let b = idx.base_for(task);
        bundle.add_to(b.a, &fusion.a)?;
        bundle.add_to(b.b, &fusion.b)?;
        bundle.add_to(b.w, &fusion.w)?;
        if let Some(cg) = clock {
            let ClockIdx { w_q, s, c } = idx.clock;
            bundle.add_to(w_q, &cg.w_q)?;
            bundle.add_scalar(s, cg.s);
            bundle.add_scalar(c, cg.c);
            bundle.add_to(self.params.layout.tokens[task], &cg.token)?;
        }
        Ok(())
    }

    fn switched_backward(
        &self,
        bundle: &mut GradientBundle,
        idx: &TsIdx,
        task: usize,
        tk: &TaskKernel,
        grad: &Tensor,
    ) -> Result<()> {
        let (f, w) = self.params.base(idx.base_for(task))?;
        let clock = self.params.clock(idx.clock)?;
        let (fg, cg) = task_kernel_backward(tk, &f, &w, &clock, self.params.token(task)?, grad)?;
        self.add_switched_grads(bundle, idx, task, fg, cg)
    }

    /// Exact gradients of `sum_i <grads[i], prediction_i>` for every trainable tensor.
    pub fn backward(&self, cache: &ForwardCache, grads: &[Tensor]) -> Result<GradientBundle> {
        if cache.version != self.version {
            return Err(Error::StaleCache);
        }
        let task = cache.task;
        let layout = &self.params.layout;
        let dt = self.decoder_task(task);
        let dg = decoder_backward(&dt, &cache.dec_kernel, &cache.decoder, grads)?;
        let mut bundle = GradientBundle::zeros_like(&self.params);
        let d = &layout.decoder;
        for (s, g) in dg.proj.iter().enumerate() {
            bundle.add_to(d.proj[task][s], g)?;
        }
        bundle.add_to(d.bias[task], &dg.bias)?;
        bundle.add_to(d.gamma[task], &dg.gamma)?;
        bundle.add_to(d.beta[task], &dg.beta)?;
        bundle.add_to(d.tail[task], &dg.tail)?;
        bundle.add_to(d.tail_bias[task], &dg.tail_bias)?;
        self.switched_backward(&mut bundle, &d.main, task, &cache.dec_kernel, &dg.kernel)?;

        let mut enc_kernel_grads: Vec<Tensor> = cache
            .enc_kernels
            .iter()
            .map(|k| Tensor::zeros(k.kernel().weights().shape()))
            .collect();
        for (img, gfeats) in cache.images.iter().zip(&dg.feats) {
            let mut carry: Option<Tensor> = None;
            for s in (0..NUM_STAGES).rev() {
                let mut g = gfeats[s].clone();
                if let Some(c) = carry.take() {
                    g.axpy(1.0, &c)?;
                }
                let layers: &[FrozenLayer] = &self.backbone.layers[s];
                for (l, lc) in img.stages[s].iter().enumerate().rev() {
                    g = match lc {
                        LayerCache::Ts(c) => {
                            let (gx, gk) = ts_backward(&layers[l], &cache.enc_kernels[s], c, &g)?;
                            enc_kernel_grads[s].axpy(1.0, &gk)?;
                            gx
                        }
                        LayerCache::Ta(c) => {
                            let idx = layout.ta[s][l];
                            let f = self.params.factors(idx.a, idx.b)?;
                            let (gx, ga, gb) = ta_backward(&layers[l], &f, LORA_SCALING, c, &g)?;
                            bundle.add_to(idx.a, &ga)?;
                            bundle.add_to(idx.b, &gb)?;
                            gx
                        }
                    };
                }
                carry = self.backbone.entry_backward(s, &g)?;
            }
        }
        for (s, gk) in enc_kernel_grads.iter().enumerate() {
            self.switched_backward(&mut bundle, &layout.ts[s], task, &cache.enc_kernels[s], gk)?;
        }
        for (name, g) in bundle.names().iter().zip(bundle.tensors()) {
            ensure_finite(g, name)?;
        }
        Ok(bundle)
    }

    /// Forward and backward for several tasks on the same batch, each with
    /// its own loss gradient function. Results come back in task order.
    pub fn forward_backward_tasks<F>(
        &self,
        batch: &[Tensor],
        tasks: &[usize],
        mode: Mode,
        loss_grad: F,
    ) -> Result<Vec<TaskPass>>
    where
        F: Fn(usize, &[Tensor]) -> Result<(f64, Vec<Tensor>)> + Sync,
    {
        tasks
            .par_iter()
            .map(|&t| {
                let (preds, cache) = self.forward(batch, t, mode)?;
                let (loss, grads) = loss_grad(t, &preds)?;
                let bundle = self.backward(&cache, &grads)?;
                Ok(TaskPass {
                    task: t,
                    loss,
                    grads: bundle,
                    cache,
                })
            })
            .collect()
    }
}

/// One task's forward/backward result.
pub struct TaskPass {
    pub task: usize,
    pub loss: f64,
    pub grads: GradientBundle,
    pub cache: ForwardCache,
}
