use super::backbone::{FrozenLayer, PhiCache};
use super::config::Modulation;
use crate::adapter::{
    clock_backward, clock_omega, fuse_awb, fuse_backward, linear_backward, linear_scale, lowpass_backward,
    lowpass_filter, sine_backward, sine_modulate, ClockNetGrads, ClockNetParams, FilterSpec, FusedKernel, FusionGrads,
    LowRankFactors, MidKernel, ModulatedKernel,
};
use crate::error::{contract, Result};
use crate::numerics::{
    conv2d, conv2d_backward_input, conv2d_backward_kernel, upsample_nearest, upsample_nearest_backward, ConvKernel,
    Tensor,
};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Task-agnostic layer: `phi(x) + scaling * B A^T x` applied per pixel.
pub fn ta_forward(
    layer: &FrozenLayer,
    factors: &LowRankFactors,
    scaling: f64,
    x: &Tensor,
) -> Result<(Tensor, TaCache)> {
    let (phi, phi_cache) = layer.forward(x)?;
    let reduce = ConvKernel::pointwise(&factors.a().transpose2()?)?;
    let expand = ConvKernel::pointwise(factors.b())?;
    let z = conv2d(x, &reduce)?;
    let mut y = phi;
    y.axpy(scaling, &conv2d(&z, &expand)?)?;
    Ok((
        y,
        TaCache {
            x: x.clone(),
            z,
            phi: phi_cache,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct TaCache {
    x: Tensor,
    z: Tensor,
    phi: PhiCache,
}

/// Returns `(dx, dA, dB)`.
pub fn ta_backward(
    layer: &FrozenLayer,
    factors: &LowRankFactors,
    scaling: f64,
    cache: &TaCache,
    grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let reduce = ConvKernel::pointwise(&factors.a().transpose2()?)?;
    let expand = ConvKernel::pointwise(factors.b())?;
    let g = grad.scale(scaling);
    let (n, r, m) = (factors.n(), factors.rank(), factors.m());
    let gb = conv2d_backward_kernel(&cache.z, &g, 1, 1)?.reshape(&[n, r])?;
    let gz = conv2d_backward_input(&g, &expand)?;
    let ga = conv2d_backward_kernel(&cache.x, &gz, 1, 1)?
        .reshape(&[r, m])?
        .transpose2()?;
    let mut gx = layer.backward(&cache.phi, grad)?;
    gx.axpy(1.0, &conv2d_backward_input(&gz, &reduce)?)?;
    Ok((gx, ga, gb))
}

/// A task's kernel derived from a shared base, plus what its backward needs.
#[derive(Clone, Debug)]
pub struct TaskKernel {
    pub base: FusedKernel,
    pub omega: f64,
    pub modulated: ModulatedKernel,
    pub modulation: Modulation,
}

impl TaskKernel {
    pub fn kernel(&self) -> &ConvKernel {
        &self.modulated.kernel
    }
}

/// `lowpass(mod(omega_t, A W B^T))` with `omega_t` from the clock net.
///
/// Without modulation the base is used as-is and the clock net is bypassed.
pub fn task_kernel(
    factors: &LowRankFactors,
    mid: &MidKernel,
    clock: &ClockNetParams,
    token: &Tensor,
    modulation: Modulation,
    filter: Option<FilterSpec>,
) -> Result<TaskKernel> {
    let base = fuse_awb(factors, mid)?;
    let (omega, modulated) = match modulation {
        Modulation::Sine => {
            let w = clock_omega(clock, token)?;
            (w, sine_modulate(&base, w))
        }
        Modulation::Linear => {
            let w = clock_omega(clock, token)?;
            (w, linear_scale(&base, w))
        }
        Modulation::Identity => (1.0, linear_scale(&base, 1.0)),
    };
    let modulated = match filter {
        Some(f) => lowpass_filter(&modulated, f.size, f.sigma)?,
        None => modulated,
    };
    Ok(TaskKernel {
        base,
        omega,
        modulated,
        modulation,
    })
}

/// Pulls a gradient on the final task kernel back to the base factors and,
/// when the frequency is learned, to the clock net and token.
pub fn task_kernel_backward(
    tk: &TaskKernel,
    factors: &LowRankFactors,
    mid: &MidKernel,
    clock: &ClockNetParams,
    token: &Tensor,
    grad_kernel: &Tensor,
) -> Result<(FusionGrads, Option<ClockNetGrads>)> {
    let g = match tk.modulated.filter {
        Some(f) => lowpass_backward(grad_kernel, f.size, f.sigma)?,
        None => grad_kernel.clone(),
    };
    let (g_base, g_omega) = match tk.modulation {
        Modulation::Sine => sine_backward(&tk.base, tk.omega, &g)?,
        Modulation::Linear => linear_backward(&tk.base, tk.omega, &g)?,
        Modulation::Identity => (g, 0.0),
    };
    let fusion = fuse_backward(factors, mid, &g_base)?;
    let clock_grads = match tk.modulation {
        Modulation::Identity => None,
        _ => Some(clock_backward(clock, token, g_omega)?),
    };
    Ok((fusion, clock_grads))
}

#[derive(Clone, Debug)]
pub struct TsCache {
    x: Tensor,
    phi: PhiCache,
}

/// Task-specific layer: `phi(x) + conv(x, M_t)`.
pub fn ts_forward(layer: &FrozenLayer, kernel: &TaskKernel, x: &Tensor) -> Result<(Tensor, TsCache)> {
    let (phi, phi_cache) = layer.forward(x)?;
    let y = phi.add(&conv2d(x, kernel.kernel())?)?;
    Ok((
        y,
        TsCache {
            x: x.clone(),
            phi: phi_cache,
        },
    ))
}

/// Returns `(dx, d kernel)`.
pub fn ts_backward(
    layer: &FrozenLayer,
    kernel: &TaskKernel,
    cache: &TsCache,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let k = kernel.kernel();
    let gk = conv2d_backward_kernel(&cache.x, grad, k.kh(), k.kw())?;
    let mut gx = layer.backward(&cache.phi, grad)?;
    gx.axpy(1.0, &conv2d_backward_input(grad, k)?)?;
    Ok((gx, gk))
}

/// Borrowed per-task decoder tensors.
#[derive(Clone, Copy, Debug)]
pub struct DecoderTask<'a> {
    /// `[d, c_i]` projection matrices, one per stage.
    pub proj: [&'a Tensor; 4],
    pub bias: &'a Tensor,
    pub gamma: &'a Tensor,
    pub beta: &'a Tensor,
    pub tail: &'a Tensor,
    pub tail_bias: &'a Tensor,
}

/// How the decoder normalization gets its statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Batch-and-spatial statistics of the current batch.
    Batch,
    /// Fixed mean and variance, as in evaluation.
    Fixed { mean: &'a Tensor, var: &'a Tensor },
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    feats: Vec<Vec<Tensor>>,
    concat: Vec<Tensor>,
    hhat: Vec<Tensor>,
    act: Vec<Tensor>,
    relu: Vec<Tensor>,
    inv_std: Vec<f64>,
    batch_stats: bool,
    pub mean: Tensor,
    pub var: Tensor,
}

impl DecoderCache {
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.act
            .iter()
            .flat_map(|a| a.data().iter().map(|&v| v > 0.0))
            .collect()
    }
}

fn add_channel_bias(x: &mut Tensor, bias: &Tensor) {
    for c in 0..bias.len() {
        let b = bias.data()[c];
        for v in x.channel_mut(c) {
            *v += b;
        }
    }
}

fn channel_sums(xs: &[Tensor]) -> Vec<f64> {
    let c = xs[0].shape()[0];
    (0..c)
        .map(|ch| xs.iter().map(|x| x.channel(ch).iter().sum::<f64>()).sum())
        .collect()
}

/// Decoder head for one task over a batch of multi-scale features.
///
/// Each stage is projected by a 1x1 conv, upsampled to full size and
/// concatenated; the shared switched conv and task bias follow, then
/// normalization, ReLU and the task's tail conv.
pub fn decoder_forward(
    feats: &[Vec<Tensor>],
    dt: &DecoderTask<'_>,
    kernel: &TaskKernel,
    stats: NormStats<'_>,
) -> Result<(Vec<Tensor>, DecoderCache)> {
    if feats.is_empty() {
        return Err(contract!("decoder needs a non-empty batch"));
    }
    let (height, width) = {
        let f0 = feats[0]
            .first()
            .ok_or_else(|| contract!("decoder needs stage features"))?;
        (f0.shape()[1], f0.shape()[2])
    };
    let mut concat = Vec::with_capacity(feats.len());
    let mut hs = Vec::with_capacity(feats.len());
    for f in feats {
        if f.len() != dt.proj.len() {
            return Err(contract!("decoder expects {} stages, got {}", dt.proj.len(), f.len()));
        }
        let parts = f
            .iter()
            .zip(dt.proj)
            .map(|(g, p)| upsample_nearest(&conv2d(g, &ConvKernel::pointwise(p)?)?, height, width))
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::concat_channels(&parts)?;
        let mut h = conv2d(&x, kernel.kernel())?;
        add_channel_bias(&mut h, dt.bias);
        concat.push(x);
        hs.push(h);
    }
    let dh = hs[0].shape()[0];
    let count = (feats.len() * height * width) as f64;
    let batch_stats = matches!(stats, NormStats::Batch);
    let (mean, var) = match stats {
        NormStats::Batch => {
            let mean: Vec<f64> = channel_sums(&hs).into_iter().map(|s| s / count).collect();
            let var: Vec<f64> = (0..dh)
                .map(|c| {
                    hs.iter()
                        .flat_map(|h| h.channel(c).iter())
                        .map(|v| (v - mean[c]).powi(2))
                        .sum::<f64>()
                        / count
                })
                .collect();
            (Tensor::new(vec![dh], mean)?, Tensor::new(vec![dh], var)?)
        }
        NormStats::Fixed { mean, var } => {
            mean.expect_shape(&[dh], "running mean")?;
            var.expect_shape(&[dh], "running variance")?;
            (mean.clone(), var.clone())
        }
    };
    let inv_std: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let tail = ConvKernel::new(dt.tail.clone())?;
    let mut hhat = Vec::new();
    let mut act = Vec::new();
    let mut relu = Vec::new();
    let mut preds = Vec::new();
    for h in &hs {
        let mut n = h.clone();
        let mut a = h.clone();
        for c in 0..dh {
            let (mu, is) = (mean.data()[c], inv_std[c]);
            let (g, b) = (dt.gamma.data()[c], dt.beta.data()[c]);
            for (nv, av) in n.channel_mut(c).iter_mut().zip(a.channel_mut(c).iter_mut()) {
                *nv = (*nv - mu) * is;
                *av = g * *nv + b;
            }
        }
        let r = a.map(|v| v.max(0.0));
        let mut y = conv2d(&r, &tail)?;
        add_channel_bias(&mut y, dt.tail_bias);
        hhat.push(n);
        act.push(a);
        relu.push(r);
        preds.push(y);
    }
    Ok((
        preds,
        DecoderCache {
            feats: feats.to_vec(),
            concat,
            hhat,
            act,
            relu,
            inv_std,
            batch_stats,
            mean,
            var,
        },
    ))
}

/// Decoder gradients for one task.
#[derive(Clone, Debug)]
pub struct DecoderGrads {
    pub proj: Vec<Tensor>,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub tail: Tensor,
    pub tail_bias: Tensor,
    pub kernel: Tensor,
    /// Gradient on each image's stage features.
    pub feats: Vec<Vec<Tensor>>,
}

pub fn decoder_backward(
    dt: &DecoderTask<'_>,
    kernel: &TaskKernel,
    cache: &DecoderCache,
    grads: &[Tensor],
) -> Result<DecoderGrads> {
    if grads.len() != cache.hhat.len() {
        return Err(contract!(
            "decoder backward got {} gradients for a batch of {}",
            grads.len(),
            cache.hhat.len()
        ));
    }
    let tail = ConvKernel::new(dt.tail.clone())?;
    let (tkh, tkw) = (tail.kh(), tail.kw());
    let dh = cache.inv_std.len();
    let mut g_tail = Tensor::zeros(dt.tail.shape());
    let mut g_gamma = vec![0.0; dh];
    let mut g_beta = vec![0.0; dh];
    let mut g_hhat = Vec::with_capacity(grads.len());
    for (i, gy) in grads.iter().enumerate() {
        g_tail.axpy(1.0, &conv2d_backward_kernel(&cache.relu[i], gy, tkh, tkw)?)?;
        let gr = conv2d_backward_input(gy, &tail)?;
        let ga = gr.zip_map(&cache.act[i], |g, a| if a > 0.0 { g } else { 0.0 })?;
        let mut gn = ga.clone();
        for c in 0..dh {
            let gam = dt.gamma.data()[c];
            for (j, (gv, &nv)) in ga.channel(c).iter().zip(cache.hhat[i].channel(c)).enumerate() {
                g_gamma[c] += gv * nv;
                g_beta[c] += gv;
                gn.channel_mut(c)[j] = gv * gam;
            }
        }
        g_hhat.push(gn);
    }
    let g_tail_bias: Vec<f64> = channel_sums(grads);

    let mut g_h = g_hhat;
    if cache.batch_stats {
        let plane = cache.hhat[0].channel(0).len();
        let count = (cache.hhat.len() * plane) as f64;
        for c in 0..dh {
            let mut sum_g = 0.0;
            let mut sum_gn = 0.0;
            for (gh, nh) in g_h.iter().zip(&cache.hhat) {
                for (g, n) in gh.channel(c).iter().zip(nh.channel(c)) {
                    sum_g += g;
                    sum_gn += g * n;
                }
            }
            let is = cache.inv_std[c];
            for (gh, nh) in g_h.iter_mut().zip(&cache.hhat) {
                for (g, &n) in gh.channel_mut(c).iter_mut().zip(nh.channel(c)) {
                    *g = is / count * (count * *g - sum_g - n * sum_gn);
                }
            }
        }
    } else {
        for gh in g_h.iter_mut() {
            for c in 0..dh {
                let is = cache.inv_std[c];
                for g in gh.channel_mut(c) {
                    *g *= is;
                }
            }
        }
    }
    let g_bias = channel_sums(&g_h);

    let k = kernel.kernel();
    let mut g_kernel = Tensor::zeros(k.weights().shape());
    let mut g_proj: Vec<Tensor> = dt.proj.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut g_feats = Vec::with_capacity(g_h.len());
    let d = dt.proj[0].shape()[0];
    for (i, gh) in g_h.iter().enumerate() {
        g_kernel.axpy(1.0, &conv2d_backward_kernel(&cache.concat[i], gh, k.kh(), k.kw())?)?;
        let gx = conv2d_backward_input(gh, k)?;
        let parts = gx.split_channels(&vec![d; dt.proj.len()])?;
        let mut per_stage = Vec::with_capacity(parts.len());
        for (s, gp_up) in parts.iter().enumerate() {
            let f = &cache.feats[i][s];
            let gp = upsample_nearest_backward(gp_up, f.shape()[1], f.shape()[2])?;
            let c = f.shape()[0];
            g_proj[s].axpy(1.0, &conv2d_backward_kernel(f, &gp, 1, 1)?.reshape(&[d, c])?)?;
            per_stage.push(conv2d_backward_input(&gp, &ConvKernel::pointwise(dt.proj[s])?)?);
        }
        g_feats.push(per_stage);
    }
    Ok(DecoderGrads {
        proj: g_proj,
        bias: Tensor::new(vec![dh], g_bias)?,
        gamma: Tensor::new(vec![dh], g_gamma)?,
        beta: Tensor::new(vec![dh], g_beta)?,
        tail: g_tail,
        tail_bias: Tensor::new(vec![g_tail_bias.len()], g_tail_bias)?,
        kernel: g_kernel,
        feats: g_feats,
    })
}
