use super::config::{ModelConfig, NUM_STAGES};
use crate::adapter::{ClockNetParams, LowRankFactors, MidKernel};
use crate::error::{contract, Result};
use crate::numerics::{RandomStream, Tensor};

/// Indices of one Sine-AWB base (`A`, `B`, `W`) in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AwbIdx {
    pub a: usize,
    pub b: usize,
    pub w: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClockIdx {
    pub w_q: usize,
    pub s: usize,
    pub c: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaIdx {
    pub a: usize,
    pub b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TsIdx {
    /// One entry, or one per task for the independent-base variant.
    pub bases: Vec<AwbIdx>,
    pub clock: ClockIdx,
}

impl TsIdx {
    pub fn base_for(&self, task: usize) -> AwbIdx {
        if self.bases.len() == 1 {
            self.bases[0]
        } else {
            self.bases[task]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderIdx {
    pub proj: Vec<[usize; NUM_STAGES]>,
    pub main: TsIdx,
    pub bias: Vec<usize>,
    pub gamma: Vec<usize>,
    pub beta: Vec<usize>,
    pub tail: Vec<usize>,
    pub tail_bias: Vec<usize>,
}

/// Where every trainable tensor lives in the flat store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    /// `ta[stage][layer]` for the task-agnostic layers of each stage.
    pub ta: Vec<Vec<TaIdx>>,
    pub ts: Vec<TsIdx>,
    pub tokens: Vec<usize>,
    pub decoder: DecoderIdx,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    /// Set when only one task's loss reaches this tensor.
    pub task: Option<usize>,
    /// Part of the shared encoder (task-agnostic and switched bases, clock nets).
    pub shared_encoder: bool,
}

/// Every trainable tensor of a model, stored flat with names.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub(crate) info: Vec<ParamInfo>,
    pub(crate) tensors: Vec<Tensor>,
    pub(crate) layout: Layout,
}

struct Builder<'a> {
    info: Vec<ParamInfo>,
    tensors: Vec<Tensor>,
    rng: &'a mut RandomStream,
}

impl Builder<'_> {
    fn push(&mut self, name: String, task: Option<usize>, shared: bool, t: Tensor) -> usize {
        self.info.push(ParamInfo {
            name,
            task,
            shared_encoder: shared && task.is_none(),
        });
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn gauss(&mut self, shape: &[usize], std: f64) -> Tensor {
        self.rng.gaussian_tensor(shape, std)
    }

    #[allow(clippy::too_many_arguments)]
    fn awb(
        &mut self,
        prefix: &str,
        task: Option<usize>,
        shared: bool,
        m: usize,
        n: usize,
        r: usize,
        k: usize,
        std: f64,
    ) -> AwbIdx {
        let a = self.gauss(&[m, r], std);
        let b = self.gauss(&[n, r], std);
        let w = self.gauss(&[r, r, k, k], 1.0 / ((r * k * k) as f64).sqrt());
        AwbIdx {
            a: self.push(format!("{prefix}.A"), task, shared, a),
            b: self.push(format!("{prefix}.B"), task, shared, b),
            w: self.push(format!("{prefix}.W"), task, shared, w),
        }
    }

    fn clock(&mut self, prefix: &str, shared: bool, width: usize) -> ClockIdx {
        let p = ClockNetParams::init(width, self.rng);
        ClockIdx {
            w_q: self.push(format!("{prefix}.W_q"), None, shared, p.w_q),
            s: self.push(format!("{prefix}.s"), None, shared, Tensor::scalar(p.s)),
            c: self.push(format!("{prefix}.c"), None, shared, Tensor::scalar(p.c)),
        }
    }

    fn switched(
        &mut self,
        prefix: &str,
        shared: bool,
        copies: usize,
        dims: (usize, usize, usize, usize),
        std: f64,
        token_width: usize,
    ) -> TsIdx {
        let (m, n, r, k) = dims;
        let bases = if copies == 1 {
            vec![self.awb(&format!("{prefix}.base"), None, shared, m, n, r, k, std)]
        } else {
            (0..copies)
                .map(|t| self.awb(&format!("{prefix}.base.t{t}"), Some(t), shared, m, n, r, k, std))
                .collect()
        };
        let clock = self.clock(&format!("{prefix}.clock"), shared, token_width);
        TsIdx { bases, clock }
    }
}

impl ParamStore {
    /// Draws all trainable tensors from `rng`.
    ///
    /// Task-agnostic adapters start as zero deltas (`B = 0`). Switched bases
    /// draw `A`, `B` from `N(0, base_init_std^2)` and `W` from `N(0, 1/(r k^2))`.
    pub fn init(config: &ModelConfig, rng: &mut RandomStream) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            info: Vec::new(),
            tensors: Vec::new(),
            rng,
        };
        let ch = &config.stage_channels;
        let r = config.rank;
        let t_count = config.num_tasks;
        let mut ta = Vec::new();
        let mut ts = Vec::new();
        for (s, &c) in ch.iter().enumerate() {
            let mut stage = Vec::new();
            for l in 0..config.layers_per_stage - 1 {
                let a = b.gauss(&[c, r], 1.0 / (c as f64).sqrt());
                stage.push(TaIdx {
                    a: b.push(format!("enc.s{s}.ta{l}.A"), None, true, a),
                    b: b.push(format!("enc.s{s}.ta{l}.B"), None, true, Tensor::zeros(&[c, r])),
                });
            }
            ta.push(stage);
            ts.push(b.switched(
                &format!("enc.s{s}.ts"),
                true,
                config.encoder_bases(),
                (c, c, r, config.awb_kernel),
                config.base_init_std,
                config.token_width,
            ));
        }
        let tokens = (0..t_count)
            .map(|t| {
                let p = b.gauss(&[config.token_width], 1.0);
                b.push(format!("tokens.t{t}"), Some(t), false, p)
            })
            .collect();

        let d = config.decoder_proj;
        let dh = config.decoder_hidden;
        let out = config.out_channels();
        let tk = config.tail_kernel;
        let mut proj = Vec::new();
        for t in 0..t_count {
            let mut idx = [0; NUM_STAGES];
            for (s, slot) in idx.iter_mut().enumerate() {
                let w = b.gauss(&[d, ch[s]], 1.0 / (ch[s] as f64).sqrt());
                *slot = b.push(format!("dec.t{t}.proj{s}"), Some(t), false, w);
            }
            proj.push(idx);
        }
        let main = b.switched(
            "dec.main",
            false,
            config.decoder_bases(),
            (NUM_STAGES * d, dh, config.decoder_rank, config.awb_kernel),
            config.base_init_std,
            config.token_width,
        );
        let mut decoder = DecoderIdx {
            proj,
            main,
            bias: Vec::new(),
            gamma: Vec::new(),
            beta: Vec::new(),
            tail: Vec::new(),
            tail_bias: Vec::new(),
        };
        for t in 0..t_count {
            decoder
                .bias
                .push(b.push(format!("dec.t{t}.bias"), Some(t), false, Tensor::zeros(&[dh])));
            decoder
                .gamma
                .push(b.push(format!("dec.t{t}.gamma"), Some(t), false, Tensor::filled(&[dh], 1.0)));
            decoder
                .beta
                .push(b.push(format!("dec.t{t}.beta"), Some(t), false, Tensor::zeros(&[dh])));
            let tail = b.gauss(&[out, dh, tk, tk], 1.0 / ((dh * tk * tk) as f64).sqrt());
            decoder
                .tail
                .push(b.push(format!("dec.t{t}.tail"), Some(t), false, tail));
            decoder
                .tail_bias
                .push(b.push(format!("dec.t{t}.tail_bias"), Some(t), false, Tensor::zeros(&[out])));
        }
        Ok(Self {
            info: b.info,
            tensors: b.tensors,
            layout: Layout {
                ta,
                ts,
                tokens,
                decoder,
            },
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.info.iter().position(|i| i.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn factors(&self, a: usize, b: usize) -> Result<LowRankFactors> {
        LowRankFactors::new(self.tensors[a].clone(), self.tensors[b].clone())
    }

    pub fn base(&self, idx: AwbIdx) -> Result<(LowRankFactors, MidKernel)> {
        Ok((
            self.factors(idx.a, idx.b)?,
            MidKernel::new(self.tensors[idx.w].clone())?,
        ))
    }

    pub fn clock(&self, idx: ClockIdx) -> Result<ClockNetParams> {
        ClockNetParams::new(
            self.tensors[idx.w_q].clone(),
            self.tensors[idx.s].data()[0],
            self.tensors[idx.c].data()[0],
        )
    }

    pub fn token(&self, task: usize) -> Result<&Tensor> {
        self.layout
            .tokens
            .get(task)
            .map(|&i| &self.tensors[i])
            .ok_or(crate::Error::UnknownTask(task))
    }

    /// Replaces every tensor, keeping names and shapes.
    pub fn assign(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(contract!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            ));
        }
        for (i, t) in tensors.iter().enumerate() {
            t.expect_shape(self.tensors[i].shape(), &self.info[i].name)?;
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Indices of the shared encoder tensors, in store order.
    pub fn shared_encoder_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.info[i].shared_encoder).collect()
    }
}

/// Gradient for every tensor of a [`ParamStore`], index-aligned with it.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub(crate) names: Vec<String>,
    pub(crate) tensors: Vec<Tensor>,
}

impl GradientBundle {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            names: params.info.iter().map(|i| i.name.clone()).collect(),
            tensors: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub(crate) fn add_to(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        self.tensors[idx].axpy(1.0, g)
    }

    pub(crate) fn add_scalar(&mut self, idx: usize, g: f64) {
        self.tensors[idx].data_mut()[0] += g;
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &GradientBundle) -> Result<()> {
        if other.tensors.len() != self.tensors.len() {
            return Err(contract!("gradient bundles have different layouts"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(1.0, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            *t = t.scale(k);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    /// Concatenated shared-encoder gradient, in store order.
    pub fn shared_encoder_flat(&self, params: &ParamStore) -> Vec<f64> {
        params
            .shared_encoder_indices()
            .into_iter()
            .flat_map(|i| self.tensors[i].data().iter().copied())
            .collect()
    }
}
