use serde::{Deserialize, Serialize};

use super::network::{Mode, Model};
use crate::error::{contract, Error, Result};
use crate::numerics::{RandomStream, Tensor};

/// Largest number of scalars [`finite_diff_check`] will perturb.
pub const MAX_CHECKED_PARAMS: usize = 50_000;

/// Relative-error floor on the denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// A scalar function of named parameter tensors with an analytic gradient.
pub trait Differentiable {
    fn names(&self) -> Vec<String>;
    fn tensors(&self) -> Vec<Tensor>;
    fn set_tensor(&mut self, idx: usize, value: Tensor) -> Result<()>;
    fn loss(&self) -> Result<f64>;
    fn gradient(&self) -> Result<Vec<Tensor>>;

    /// Loss plus the on/off pattern of every piecewise-linear unit. A central
    /// difference whose two sides see a different pattern than the base
    /// point straddles a kink and is not a valid derivative estimate.
    fn loss_with_pattern(&self) -> Result<(f64, Vec<bool>)> {
        Ok((self.loss()?, Vec::new()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub max_analytic: f64,
    pub max_numeric: f64,
    /// Coordinates left out because the step crossed a kink.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_rel_error))
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < tol)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped).sum()
    }
}

/// Central differences on every coordinate of every tensor.
///
/// Per tensor the error is `max |analytic - numeric| / max(max|analytic|,
/// max|numeric|, 1e-8)`.
pub fn finite_diff_check<D: Differentiable>(d: &mut D, h: f64) -> Result<GradCheckReport> {
    let total: usize = d.tensors().iter().map(Tensor::len).sum();
    if total > MAX_CHECKED_PARAMS {
        return Err(Error::TooManyParameters {
            count: total,
            limit: MAX_CHECKED_PARAMS,
        });
    }
    check_coords(d, h, |len| (0..len).collect())
}

/// Central differences at up to `points` random coordinates per tensor.
pub fn finite_diff_check_sampled<D: Differentiable>(
    d: &mut D,
    h: f64,
    points: usize,
    rng: &mut RandomStream,
) -> Result<GradCheckReport> {
    check_coords(d, h, |len| {
        if len <= points {
            (0..len).collect()
        } else {
            (0..points).map(|_| rng.below(len)).collect()
        }
    })
}

fn check_coords<D: Differentiable>(
    d: &mut D,
    h: f64,
    mut coords: impl FnMut(usize) -> Vec<usize>,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(contract!("finite-difference step must be positive, got {h}"));
    }
    let names = d.names();
    let base = d.tensors();
    let (_, pattern) = d.loss_with_pattern()?;
    let analytic = d.gradient()?;
    if analytic.len() != base.len() {
        return Err(contract!(
            "gradient has {} tensors, parameters have {}",
            analytic.len(),
            base.len()
        ));
    }
    let mut out = Vec::with_capacity(base.len());
    for (i, t) in base.iter().enumerate() {
        analytic[i].expect_shape(t.shape(), &names[i])?;
        let idxs = coords(t.len());
        let mut max_abs_err: f64 = 0.0;
        let mut max_a: f64 = 0.0;
        let mut max_n: f64 = 0.0;
        let mut skipped = 0;
        for &j in &idxs {
            let mut plus = t.clone();
            plus.data_mut()[j] += h;
            d.set_tensor(i, plus)?;
            let (lp, pp) = d.loss_with_pattern()?;
            let mut minus = t.clone();
            minus.data_mut()[j] -= h;
            d.set_tensor(i, minus)?;
            let (lm, pm) = d.loss_with_pattern()?;
            if pp != pattern || pm != pattern {
                skipped += 1;
                continue;
            }
            let num = (lp - lm) / (2.0 * h);
            let a = analytic[i].data()[j];
            max_abs_err = max_abs_err.max((a - num).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(num.abs());
        }
        d.set_tensor(i, t.clone())?;
        out.push(TensorCheck {
            name: names[i].clone(),
            checked: idxs.len() - skipped,
            skipped,
            max_abs_error: max_abs_err,
            max_rel_error: max_abs_err / max_a.max(max_n).max(REL_FLOOR),
            max_analytic: max_a,
            max_numeric: max_n,
        });
    }
    Ok(GradCheckReport { step: h, tensors: out })
}

/// Wraps a problem and negates the analytic gradient of one tensor.
pub struct SignFlip<D> {
    pub inner: D,
    pub tensor: usize,
}

impl<D: Differentiable> Differentiable for SignFlip<D> {
    fn names(&self) -> Vec<String> {
        self.inner.names()
    }

    fn tensors(&self) -> Vec<Tensor> {
        self.inner.tensors()
    }

    fn set_tensor(&mut self, idx: usize, value: Tensor) -> Result<()> {
        self.inner.set_tensor(idx, value)
    }

    fn loss(&self) -> Result<f64> {
        self.inner.loss()
    }

    fn loss_with_pattern(&self) -> Result<(f64, Vec<bool>)> {
        self.inner.loss_with_pattern()
    }

    fn gradient(&self) -> Result<Vec<Tensor>> {
        let mut g = self.inner.gradient()?;
        g[self.tensor] = g[self.tensor].scale(-1.0);
        Ok(g)
    }
}

/// Summed MSE of a model over a fixed batch and target set.
pub struct ModelProblem {
    pub model: Model,
    pub mode: Mode,
    pub inputs: Vec<Tensor>,
    /// `targets[k][i]` is the target of `tasks[k]` for `inputs[i]`.
    pub targets: Vec<Vec<Tensor>>,
    pub tasks: Vec<usize>,
}

/// Mean squared error over a batch and its gradient with respect to each prediction.
pub fn mse_with_grad(preds: &[Tensor], targets: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let count: usize = preds.iter().map(Tensor::len).sum();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, y) in preds.iter().zip(targets) {
        let diff = p.sub(y)?;
        loss += diff.norm_sq();
        grads.push(diff.scale(2.0 / count as f64));
    }
    Ok((loss / count as f64, grads))
}

impl ModelProblem {
    pub fn new(model: Model, inputs: Vec<Tensor>, targets: Vec<Vec<Tensor>>, tasks: Vec<usize>) -> Result<Self> {
        if targets.len() != tasks.len() || targets.iter().any(|t| t.len() != inputs.len()) {
            return Err(contract!("targets must be given per task and per input"));
        }
        Ok(Self {
            model,
            mode: Mode::Train,
            inputs,
            targets,
            tasks,
        })
    }

    /// Random inputs and targets for every task of `model`.
    pub fn random(model: Model, batch: usize, rng: &mut RandomStream) -> Result<Self> {
        let cfg = model.config().clone();
        let s = cfg.image_size;
        let inputs = (0..batch)
            .map(|_| rng.gaussian_tensor(&[cfg.in_channels, s, s], 1.0))
            .collect();
        let targets = (0..cfg.num_tasks)
            .map(|_| {
                (0..batch)
                    .map(|_| rng.gaussian_tensor(&[cfg.out_channels(), s, s], 1.0))
                    .collect()
            })
            .collect();
        Self::new(model, inputs, targets, (0..cfg.num_tasks).collect())
    }

    /// Gives every trainable tensor generic random values (scaled by `scale`)
    /// so that no gradient is structurally zero.
    pub fn perturb(&mut self, scale: f64, rng: &mut RandomStream) {
        for t in self.model.params_mut().tensors_mut() {
            let noise = rng.gaussian_tensor(t.shape(), scale);
            t.axpy(1.0, &noise).expect("same shape");
        }
    }

    /// Sets every task's running statistics to its current batch statistics.
    pub fn calibrate_running_stats(&mut self) -> Result<()> {
        for &t in &self.tasks {
            let (_, cache) = self.model.forward(&self.inputs, t, Mode::Train)?;
            self.model.update_running_stats(&cache, 1.0)?;
        }
        Ok(())
    }
}

impl Differentiable for ModelProblem {
    fn names(&self) -> Vec<String> {
        self.model.params().info().iter().map(|i| i.name.clone()).collect()
    }

    fn tensors(&self) -> Vec<Tensor> {
        self.model.params().tensors().to_vec()
    }

    fn set_tensor(&mut self, idx: usize, value: Tensor) -> Result<()> {
        let p = self.model.params_mut();
        value.expect_shape(p.get(idx).shape(), "replacement tensor")?;
        p.tensors_mut()[idx] = value;
        Ok(())
    }

    fn loss(&self) -> Result<f64> {
        Ok(self.loss_with_pattern()?.0)
    }

    fn loss_with_pattern(&self) -> Result<(f64, Vec<bool>)> {
        let mut total = 0.0;
        let mut pattern = Vec::new();
        for (k, &t) in self.tasks.iter().enumerate() {
            let (preds, cache) = self.model.forward(&self.inputs, t, self.mode)?;
            total += mse_with_grad(&preds, &self.targets[k])?.0;
            pattern.extend(cache.relu_pattern());
        }
        Ok((total, pattern))
    }

    fn gradient(&self) -> Result<Vec<Tensor>> {
        let passes = self
            .model
            .forward_backward_tasks(&self.inputs, &self.tasks, self.mode, |t, preds| {
                let k = self.tasks.iter().position(|&x| x == t).expect("task listed");
                mse_with_grad(preds, &self.targets[k])
            })?;
        let mut total = passes
            .first()
            .ok_or_else(|| contract!("no tasks to differentiate"))?
            .grads
            .clone();
        for p in &passes[1..] {
            total.accumulate(&p.grads)?;
        }
        Ok(total.tensors().to_vec())
    }
}

/// Both normalization modes of a full-model check.
///
/// With batch statistics the pre-normalization decoder biases cancel out of
/// the loss, so in train mode their gradient is identically zero and only its
/// absolute size is meaningful; they are listed in `zero_in_train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGradCheck {
    pub eval: GradCheckReport,
    pub train: GradCheckReport,
    pub zero_in_train: Vec<String>,
}

/// Largest gradient magnitude still counted as zero for `zero_in_train` tensors.
pub const ZERO_GRAD_ANALYTIC: f64 = 1e-12;
pub const ZERO_GRAD_NUMERIC: f64 = 1e-8;

impl ModelGradCheck {
    fn relative(&self) -> impl Iterator<Item = &TensorCheck> {
        self.eval.tensors.iter().chain(
            self.train
                .tensors
                .iter()
                .filter(|t| !self.zero_in_train.contains(&t.name)),
        )
    }

    pub fn max_rel_error(&self) -> f64 {
        self.relative().fold(0.0, |m, t| m.max(t.max_rel_error))
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.relative()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn zero_grads_hold(&self) -> bool {
        self.train
            .tensors
            .iter()
            .filter(|t| self.zero_in_train.contains(&t.name))
            .all(|t| t.max_analytic <= ZERO_GRAD_ANALYTIC && t.max_numeric <= ZERO_GRAD_NUMERIC)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol && self.zero_grads_hold()
    }
}

/// Full finite-difference check of `problem` in eval and train mode.
pub fn model_finite_diff_check<D>(problem: &mut D, h: f64) -> Result<ModelGradCheck>
where
    D: Differentiable + AsMut<ModelProblem>,
{
    model_check(problem, |p| finite_diff_check(p, h))
}

/// As [`model_finite_diff_check`] at up to `points` random coordinates per tensor.
pub fn model_finite_diff_check_sampled<D>(
    problem: &mut D,
    h: f64,
    points: usize,
    rng: &mut RandomStream,
) -> Result<ModelGradCheck>
where
    D: Differentiable + AsMut<ModelProblem>,
{
    model_check(problem, |p| finite_diff_check_sampled(p, h, points, rng))
}

fn model_check<D>(problem: &mut D, mut check: impl FnMut(&mut D) -> Result<GradCheckReport>) -> Result<ModelGradCheck>
where
    D: Differentiable + AsMut<ModelProblem>,
{
    problem.as_mut().calibrate_running_stats()?;
    problem.as_mut().mode = Mode::Eval;
    let eval = check(problem)?;
    problem.as_mut().mode = Mode::Train;
    let train = check(problem)?;
    let params = problem.as_mut().model.params();
    let zero_in_train = params
        .layout()
        .decoder
        .bias
        .iter()
        .map(|&i| params.info()[i].name.clone())
        .collect();
    Ok(ModelGradCheck {
        eval,
        train,
        zero_in_train,
    })
}

impl AsMut<ModelProblem> for ModelProblem {
    fn as_mut(&mut self) -> &mut ModelProblem {
        self
    }
}

impl<D: AsMut<ModelProblem>> AsMut<ModelProblem> for SignFlip<D> {
    fn as_mut(&mut self) -> &mut ModelProblem {
        self.inner.as_mut()
    }
}
