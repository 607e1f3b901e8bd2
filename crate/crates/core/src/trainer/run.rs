use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::{delta_m, mse};
use super::optim::{optimizer_step, AdamState};
use super::suite::{make_suite_for, ToyDataset, ToyTask};
use crate::analysis::{epoch_grad_sim, pairwise_grad_cosine, vec_correlation, GradSimMatrix};
use crate::error::{contract, Error, Result};
use crate::model::{mse_with_grad, Mode, Model, ModelConfig, ParamStore, Variant};
use crate::numerics::{RandomStream, Tensor};

pub const REPORT_FORMAT: &str = "sinewich-run-report";
pub const REPORT_VERSION: u32 = 1;

const SHUFFLE_STREAM: u64 = 200;

/// How the single-task baselines are obtained.
pub const BASELINE_NOTE: &str = "single-task baselines retrain the sinewich adapter \
architecture with one task on the same frozen backbone, seed and budget";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss of each task over the epoch; before any update for epoch 0.
    pub train_loss: Vec<f64>,
    /// Validation MSE of each task in eval mode.
    pub val_metric: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub shared_encoder: usize,
    pub task_agnostic: usize,
    /// Base plus clock net of each task-specific encoder layer.
    pub task_specific_layers: Vec<usize>,
    pub tokens: usize,
    pub decoder: usize,
}

impl ParamCounts {
    pub fn of(params: &ParamStore) -> Self {
        let mut c = ParamCounts {
            total: params.num_scalars(),
            shared_encoder: 0,
            task_agnostic: 0,
            task_specific_layers: vec![0; params.layout().ts.len()],
            tokens: 0,
            decoder: 0,
        };
        for (info, t) in params.info().iter().zip(params.tensors()) {
            let n = t.len();
            if info.shared_encoder {
                c.shared_encoder += n;
            }
            let parts: Vec<&str> = info.name.split('.').collect();
            match parts[0] {
                "tokens" => c.tokens += n,
                "dec" => c.decoder += n,
                "enc" if parts[2].starts_with("ta") => c.task_agnostic += n,
                "enc" => {
                    let stage: usize = parts[1][1..].parse().expect("stage index in name");
                    c.task_specific_layers[stage] += n;
                }
                _ => {}
            }
        }
        c
    }
}

/// Pairwise correlation of the tasks' final kernels in one switched layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelCorrelation {
    pub layer: String,
    pub omegas: Vec<f64>,
    /// Row-major `T x T`; `None` where a kernel is all zero.
    pub corr: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    pub baseline_note: String,
    pub config: TrainConfig,
    pub tasks: Vec<ToyTask>,
    pub param_counts: ParamCounts,
    pub epochs: Vec<EpochRecord>,
    pub grad_sim: Vec<GradSimMatrix>,
    pub final_val: Vec<f64>,
    pub baseline_val: Option<Vec<f64>>,
    pub delta_m: Option<f64>,
    pub kernels: Vec<KernelCorrelation>,
}

/// The trained model together with its report.
pub struct TrainOutcome {
    pub model: Model,
    pub report: RunReport,
}

fn evaluate(model: &Model, data: &ToyDataset, tasks: usize) -> Result<Vec<f64>> {
    (0..tasks)
        .map(|t| {
            let (preds, _) = model.forward(&data.val_inputs, t, Mode::Eval)?;
            mse(&preds, &data.val_targets[t])
        })
        .collect()
}

fn train_losses(model: &Model, data: &ToyDataset, config: &TrainConfig, tasks: usize) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; tasks];
    let batches: Vec<Vec<usize>> = (0..data.train_inputs.len())
        .collect::<Vec<_>>()
        .chunks(config.batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    for b in &batches {
        let xs: Vec<Tensor> = b.iter().map(|&i| data.train_inputs[i].clone()).collect();
        for (t, s) in sums.iter_mut().enumerate() {
            let ys: Vec<Tensor> = b.iter().map(|&i| data.train_targets[t][i].clone()).collect();
            let (preds, _) = model.forward(&xs, t, Mode::Train)?;
            *s += mse(&preds, &ys)?;
        }
    }
    Ok(sums.into_iter().map(|s| s / batches.len() as f64).collect())
}

fn shuffled(n: usize, rng: &mut RandomStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.below(i + 1));
    }
    idx
}

fn kernel_report(model: &Model) -> Result<Vec<KernelCorrelation>> {
    let tasks = model.config().num_tasks;
    let per_task = (0..tasks).map(|t| model.task_kernels(t)).collect::<Result<Vec<_>>>()?;
    let layers = per_task[0].len();
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let name = if l + 1 == layers {
            "dec.main".to_string()
        } else {
            format!("enc.s{l}.ts")
        };
        let mut corr = vec![None; tasks * tasks];
        for i in 0..tasks {
            for j in 0..tasks {
                corr[i * tasks + j] =
                    vec_correlation(per_task[i][l].kernel().weights(), per_task[j][l].kernel().weights()).ok();
            }
        }
        out.push(KernelCorrelation {
            layer: name,
            omegas: per_task.iter().map(|k| k[l].omega).collect(),
            corr,
        });
    }
    Ok(out)
}

/// Joint training of every task in `task_ids` with one optimizer step per batch.
fn fit(config: &TrainConfig, model_cfg: ModelConfig, task_ids: &[usize]) -> Result<(Model, RunReport)> {
    let (data, tasks) = make_suite_for(config, task_ids)?;
    let t_count = tasks.len();
    let mut model = Model::new(model_cfg, config.seed)?;
    let weights: Vec<f64> = tasks.iter().map(|t| t.weight).collect();
    let mut adam = AdamState::new(model.params().tensors());
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss: train_losses(&model, &data, config, t_count)?,
        val_metric: evaluate(&model, &data, t_count)?,
    }];
    let mut grad_sim = Vec::new();
    let task_list: Vec<usize> = (0..t_count).collect();
    for epoch in 1..=config.epochs {
        let mut rng = RandomStream::new(config.seed, SHUFFLE_STREAM + epoch as u64);
        let order = shuffled(data.train_inputs.len(), &mut rng);
        let mut loss_sums = vec![0.0; t_count];
        let mut sims = Vec::new();
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for (iteration, b) in batches.iter().enumerate() {
            let xs: Vec<Tensor> = b.iter().map(|&i| data.train_inputs[i].clone()).collect();
            let passes = model.forward_backward_tasks(&xs, &task_list, Mode::Train, |t, preds| {
                let ys: Vec<Tensor> = b.iter().map(|&i| data.train_targets[t][i].clone()).collect();
                let (loss, grads) = mse_with_grad(preds, &ys)?;
                if !loss.is_finite() || loss > config.divergence_limit {
                    return Err(Error::Diverged { epoch, iteration, loss });
                }
                Ok((loss, grads.iter().map(|g| g.scale(weights[t])).collect()))
            })?;
            let shared: Vec<Vec<f64>> = passes
                .iter()
                .map(|p| p.grads.shared_encoder_flat(model.params()))
                .collect();
            if !shared.is_empty() && !shared[0].is_empty() {
                sims.push(pairwise_grad_cosine(&shared)?);
            }
            let mut total = passes[0].grads.clone();
            for p in &passes[1..] {
                total.accumulate(&p.grads)?;
            }
            for p in &passes {
                loss_sums[p.task] += p.loss;
            }
            for p in &passes {
                model.update_running_stats(&p.cache, config.norm_momentum)?;
            }
            drop(passes);
            let hyper = config.optimizer;
            optimizer_step(model.params_mut().tensors_mut(), total.tensors(), &mut adam, &hyper)?;
        }
        if !sims.is_empty() {
            grad_sim.push(epoch_grad_sim(epoch, &sims)?);
        }
        let val_metric = evaluate(&model, &data, t_count)?;
        if let Some(&loss) = val_metric
            .iter()
            .find(|v| !v.is_finite() || **v > config.divergence_limit)
        {
            return Err(Error::Diverged {
                epoch,
                iteration: batches.len(),
                loss,
            });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sums.iter().map(|s| s / batches.len() as f64).collect(),
            val_metric,
        });
    }
    let final_val = epochs.last().expect("epoch 0 recorded").val_metric.clone();
    let report = RunReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        baseline_note: BASELINE_NOTE.into(),
        config: config.clone(),
        tasks,
        param_counts: ParamCounts::of(model.params()),
        epochs,
        grad_sim,
        final_val,
        baseline_val: None,
        delta_m: None,
        kernels: kernel_report(&model)?,
    };
    Ok((model, report))
}

/// Trains `config` jointly on all its tasks. Baselines are trained too when
/// `config.baselines` is set, unless precomputed values are supplied.
pub fn train_with_baselines(config: &TrainConfig, baselines: Option<&[f64]>) -> Result<TrainOutcome> {
    config.validate()?;
    let ids: Vec<usize> = (0..config.model.num_tasks).collect();
    let (model, mut report) = fit(config, config.model.clone(), &ids)?;
    let st = match baselines {
        Some(b) => Some(b.to_vec()),
        None if config.baselines => Some(baseline_metrics(config)?),
        None => None,
    };
    if let Some(st) = st {
        if st.len() != ids.len() {
            return Err(contract!("{} baselines for {} tasks", st.len(), ids.len()));
        }
        let low: Vec<bool> = report.tasks.iter().map(|t| t.lower_is_better).collect();
        report.delta_m = Some(delta_m(&report.final_val, &st, &low)?);
        report.baseline_val = Some(st);
    }
    Ok(TrainOutcome { model, report })
}

pub fn train(config: &TrainConfig) -> Result<RunReport> {
    Ok(train_with_baselines(config, None)?.report)
}

/// Final validation MSE of task `task` trained alone.
///
/// The baseline always uses the sinewich architecture with a single task,
/// whatever variant `config` names, so that paired variant runs share it.
pub fn train_single_task(config: &TrainConfig, task: usize) -> Result<f64> {
    config.validate()?;
    if task >= config.model.num_tasks {
        return Err(Error::UnknownTask(task));
    }
    let model_cfg = ModelConfig {
        num_tasks: 1,
        variant: Variant::Sinewich,
        ..config.model.clone()
    };
    let (_, report) = fit(config, model_cfg, &[task])?;
    Ok(report.final_val[0])
}

pub fn baseline_metrics(config: &TrainConfig) -> Result<Vec<f64>> {
    (0..config.model.num_tasks)
        .map(|t| train_single_task(config, t))
        .collect()
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `report.json`, `metrics.csv`, `gradsim.csv` and `resolved-config.json`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json()? + "\n")?;
        fs::write(
            dir.join("resolved-config.json"),
            serde_json::to_string_pretty(&self.config)? + "\n",
        )?;
        let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
        w.write_record(["epoch", "task", "train_loss", "val_metric"])?;
        for e in &self.epochs {
            for (t, task) in self.tasks.iter().enumerate() {
                w.write_record([
                    e.epoch.to_string(),
                    task.name.clone(),
                    e.train_loss[t].to_string(),
                    e.val_metric[t].to_string(),
                ])?;
            }
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("gradsim.csv"))?;
        w.write_record(["epoch", "task_i", "task_j", "mean_sim", "var_sim"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NaN".into());
        for g in &self.grad_sim {
            for i in 0..g.tasks {
                for j in 0..g.tasks {
                    w.write_record([
                        g.epoch.to_string(),
                        self.tasks[i].name.clone(),
                        self.tasks[j].name.clone(),
                        opt(g.mean_at(i, j)),
                        opt(g.variance_at(i, j)),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}
