//! Self-checks behind `sinewich verify`. Every suite draws instance `i` from
//! seed `base + i`, so a failing instance can be replayed on its own.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    clock_omega, fuse_awb, kernel_to_matrix_view, linear_scale, lowpass_filter, matrix_view_to_kernel, pipeline_apply,
    sine_modulate, ClockNetParams, FusedKernel, LowRankFactors, MidKernel, ModulatedKernel,
};
use crate::analysis::{gaussian_corr_oracle, monte_carlo_corr, rank_report, vec_correlation, DEFAULT_RANK_EPSILON};
use crate::error::{contract, Result};
use crate::model::{
    finite_diff_check, model_finite_diff_check, model_finite_diff_check_sampled, op_problem, GradCheckReport, Model,
    ModelConfig, ModelGradCheck, ModelProblem, SignFlip, OP_NAMES,
};
use crate::numerics::{conv2d, ConvKernel, RandomStream, Tensor};

pub const SUITES: [&str; 8] = [
    "fusion",
    "sine-range",
    "frequency-bound",
    "prop1",
    "prop2",
    "lowpass",
    "rank",
    "gradcheck",
];

/// Tolerances and sizes of the suites.
pub const FUSION_INSTANCES: usize = 100;
pub const FUSION_TOL: f64 = 1e-10;
pub const FREQUENCY_DRAWS: usize = 10_000;
pub const PROP1_TRIPLES: usize = 100;
pub const PROP1_SAMPLES: usize = 100_000;
pub const PROP1_MIN_WITHIN: usize = 95;
pub const PROP1_ORACLE_MAX: f64 = 0.01;
pub const PROP1_SEPARATION: f64 = 4.0;
pub const PROP2_INSTANCES: usize = 100;
pub const PROP2_TOL: f64 = 1e-12;
pub const LOWPASS_CONSTANT_TOL: f64 = 1e-12;
pub const LOWPASS_CHECKER_TOL: f64 = 0.05;
pub const RANK_SEEDS: usize = 20;
pub const RANK_DIM: usize = 32;
pub const RANK_MIN_EXPANDED: f64 = 0.8;
pub const RANK_MAX_BELOW: f64 = 0.05;
pub const OP_GRAD_TOL: f64 = 1e-5;
pub const MODEL_GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Deliberately corrupts the suites that support it (test harness only).
    pub inject_fault: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub passed: bool,
    pub instances: usize,
    pub failures: usize,
    /// Seed of the first failing instance.
    pub failing_seed: Option<u64>,
    pub measured: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub passed: bool,
    pub seed: u64,
    pub suites: Vec<SuiteResult>,
}

struct Tally {
    suite: &'static str,
    instances: usize,
    failing: Vec<u64>,
    measured: BTreeMap<String, f64>,
}

impl Tally {
    fn new(suite: &'static str) -> Self {
        Self {
            suite,
            instances: 0,
            failing: Vec::new(),
            measured: BTreeMap::new(),
        }
    }

    fn record(&mut self, seed: u64, ok: bool) {
        self.instances += 1;
        if !ok {
            self.failing.push(seed);
        }
    }

    fn max(&mut self, key: &str, v: f64) {
        let e = self.measured.entry(key.to_string()).or_insert(v);
        *e = e.max(v);
    }

    fn set(&mut self, key: &str, v: f64) {
        self.measured.insert(key.to_string(), v);
    }

    /// `extra` is an aggregate condition on top of the per-instance ones.
    fn finish(self, extra: bool) -> SuiteResult {
        SuiteResult {
            suite: self.suite.to_string(),
            passed: self.failing.is_empty() && extra,
            instances: self.instances,
            failures: self.failing.len(),
            failing_seed: self.failing.first().copied(),
            measured: self.measured,
        }
    }
}

fn random_fused(rng: &mut RandomStream, m: usize, n: usize, r: usize, k: usize) -> Result<FusedKernel> {
    let f = LowRankFactors::new(rng.gaussian_tensor(&[m, r], 1.0), rng.gaussian_tensor(&[n, r], 1.0))?;
    fuse_awb(&f, &MidKernel::new(rng.gaussian_tensor(&[r, r, k, k], 1.0))?)
}

pub fn fusion_suite(opts: VerifyOptions) -> Result<SuiteResult> {
    let mut t = Tally::new("fusion");
    for i in 0..FUSION_INSTANCES {
        let seed = opts.seed + i as u64;
        let mut rng = RandomStream::new(seed, 0);
        let m = 1 + rng.below(6);
        let n = 1 + rng.below(6);
        let r = 1 + rng.below(m.min(n));
        let k = [1, 3, 5][rng.below(3)];
        let size = 4 + rng.below(6);
        let f = LowRankFactors::new(rng.gaussian_tensor(&[m, r], 1.0), rng.gaussian_tensor(&[n, r], 1.0))?;
        let w = MidKernel::new(rng.gaussian_tensor(&[r, r, k, k], 1.0))?;
        let x = rng.gaussian_tensor(&[m, size, size], 1.0);
        let mut fused = fuse_awb(&f, &w)?.kernel().clone();
        if opts.inject_fault && i == FUSION_INSTANCES / 2 {
            fused.weights_mut().data_mut()[0] += 1e-6;
        }
        let err = conv2d(&x, &fused)?.max_abs_diff(&pipeline_apply(&f, &w, &x)?)?;
        t.max("max_abs_error", err);
        t.record(seed, err <= FUSION_TOL);
    }
    Ok(t.finish(true))
}

pub fn sine_range_suite(opts: VerifyOptions) -> Result<SuiteResult> {
    let mut t = Tally::new("sine-range");
    for i in 0..100 {
        let seed = opts.seed + i as u64;
        let mut rng = RandomStream::new(seed, 1);
        let scale = 10f64.powf(rng.uniform_in(-2.0, 3.0));
        let base = random_fused(&mut rng, 4, 5, 2, 3)?;
        let base = FusedKernel::from_kernel(ConvKernel::new(base.weights().scale(scale))?)?;
        let omega = rng.uniform_in(-50.0, 50.0);
        let out = sine_modulate(&base, omega);
        let worst = out.kernel.weights().max_abs();
        t.max("max_abs_value", worst);
        t.record(seed, worst <= 1.0 && out.kernel.weights().is_finite());
    }
    Ok(t.finish(true))
}

pub fn frequency_bound_suite(opts: VerifyOptions) -> Result<SuiteResult> {
    let mut t = Tally::new("frequency-bound");
    let mut tightest: f64 = f64::INFINITY;
    for i in 0..FREQUENCY_DRAWS {
        let seed = opts.seed + i as u64;
        let mut rng = RandomStream::new(seed, 2);
        let width = 1 + rng.below(16);
        let spread = rng.uniform_in(0.01, 1.0);
        let w_q = rng.gaussian_tensor(&[1, width], spread);
        let s = rng.uniform_in(0.1, 5.0) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        let c = rng.uniform_in(-3.0, 3.0);
        let p = rng.gaussian_tensor(&[width], 1.0);
        let params = ClockNetParams::new(w_q, s, c)?;
        let omega = clock_omega(&params, &p)?;
        let margin = 1.0 - (omega - s * c).abs() / s.abs();
        tightest = tightest.min(margin);
        t.record(seed, margin > 0.0);
    }
    t.set("min_relative_margin", tightest);
    Ok(t.finish(true))
}

/// Draws a `(omega_s, omega_t, sigma)` triple far enough apart for the limit
/// correlation to be negligible.
pub fn separated_triple(rng: &mut RandomStream) -> (f64, f64, f64) {
    loop {
        let ws = rng.uniform_in(0.5, 10.0);
        let wt = rng.uniform_in(0.5, 10.0);
        let sigma = rng.uniform_in(0.5, 3.0);
        if (ws - wt).abs().min((ws + wt).abs()) * sigma >= PROP1_SEPARATION {
            return (ws, wt, sigma);
        }
    }
}

pub fn prop1_suite(opts: VerifyOptions) -> Result<SuiteResult> {
    let mut t = Tally::new("prop1");
    let rows = (0..PROP1_TRIPLES)
        .into_par_iter()
        .map(|i| {
            let seed = opts.seed + i as u64;
            let mut rng = RandomStream::new(seed, 3);
            let (ws, wt, sigma) = separated_triple(&mut rng);
            let oracle = gaussian_corr_oracle(ws, wt, sigma)?;
            let est = monte_carlo_corr(ws, wt, sigma, PROP1_SAMPLES, &mut rng)?;
            Ok((seed, oracle, est.mean, est.stderr))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut within = 0;
    for (seed, oracle, mean, stderr) in rows {
        let gap = (mean - oracle).abs();
        if gap <= 3.0 * stderr {
            within += 1;
        }
        t.max("max_abs_oracle", oracle.abs());
        t.max("max_gap_in_stderr", gap / stderr);
        t.record(seed, oracle.abs() < PROP1_ORACLE_MAX);
    }
    t.set("within_3_stderr", within as f64);
    Ok(t.finish(within >= PROP1_MIN_WITHIN))
}

pub fn prop2_suite(opts: VerifyOptions) -> Result<SuiteResult> {
    let mut t = Tally::new("prop2");
    for i in 0..PROP2_INSTANCES {
        let seed = opts.seed + i as u64;
        let mut rng = RandomStream::new(seed, 4);
        let m = 2 + rng.below(7);
        let n = 2 + rng.below(7);
        let r = 1 + rng.below(m.min(n));
        let k = [1, 3][rng.below(2)];
        let base = random_fused(&mut rng, m, n, r, k)?;
        let pick = |rng: &mut RandomStream| {
            let v = rng.uniform_in(0.1, 10.0);
            if rng.uniform() < 0.5 {
                -v
            } else {
                v
            }
        };
        let (ws, wt) = (pick(&mut rng), pick(&mut rng));
        let a = linear_scale(&base, ws);
        let b = linear_scale(&base, wt);
        let corr = vec_correlation(a.kernel.weights(), b.kernel.weights())?;
        let dev = (corr.abs() - 1.0).abs();
        t.max("max_abs_corr_deviation", dev);
        t.record(seed, dev < PROP2_TOL);
    }
    Ok(t.finish(true))
}

pub fn lowpass_suite(opts: VerifyOptions) -> Result<SuiteResult> {
    let mut t = Tally::new("lowpass");
    let (size, sigma) = (7, 1.0);
    let half = size / 2;
    for i in 0..20 {
        let seed = opts.seed + i as u64;
        let mut rng = RandomStream::new(seed, 5);
        let (m, n, k) = (8 + rng.below(16), 1 + rng.below(4), 3);
        let cols = n * k * k;
        let value = rng.uniform_in(-5.0, 5.0);
        let wrap = |view: Tensor| -> Result<ModulatedKernel> {
            Ok(ModulatedKernel {
                kernel: ConvKernel::new(matrix_view_to_kernel(&view, n, k)?)?,
                omega: 1.0,
                filter: None,
            })
        };
        let interior = |out: &Tensor| {
            let mut worst: f64 = 0.0;
            let mut dev: f64 = 0.0;
            for r in half..m - half {
                for c in half..cols - half {
                    worst = worst.max(out.at2(r, c).abs());
                    dev = dev.max((out.at2(r, c) - value).abs());
                }
            }
            (worst, dev)
        };
        let flat = lowpass_filter(&wrap(Tensor::filled(&[m, cols], value))?, size, sigma)?;
        let (_, const_dev) = interior(&kernel_to_matrix_view(flat.kernel.weights()));
        let checker = Tensor::from_fn(
            &[m, cols],
            |idx| {
                if (idx / cols + idx % cols) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            },
        );
        let smooth = lowpass_filter(&wrap(checker)?, size, sigma)?;
        let (checker_max, _) = interior(&kernel_to_matrix_view(smooth.kernel.weights()));
        t.max("constant_max_deviation", const_dev);
        t.max("checkerboard_max_abs", checker_max);
        t.record(
            seed,
            const_dev <= LOWPASS_CONSTANT_TOL && checker_max < LOWPASS_CHECKER_TOL,
        );
    }
    Ok(t.finish(true))
}

/// Rank statistics of `sin(omega A B^T)` for one rank `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankExpansion {
    pub rank: usize,
    pub seeds: usize,
    pub expanded: usize,
    pub below_base: usize,
    pub min_eps_rank: usize,
    pub mean_eps_rank: f64,
}

pub fn rank_expansion(rank: usize, seed: u64) -> Result<RankExpansion> {
    let rows = (0..RANK_SEEDS)
        .into_par_iter()
        .map(|i| {
            let mut rng = RandomStream::new(seed + i as u64, 6);
            let a = rng.gaussian_tensor(&[RANK_DIM, rank], 1.0);
            let b = rng.gaussian_tensor(&[RANK_DIM, rank], 1.0);
            let omega = rng.uniform_in(1.0, 8.0);
            let base = a.matmul(&b.transpose2()?)?;
            let base_rank = rank_report(&base, DEFAULT_RANK_EPSILON)?.eps_rank;
            let sine = rank_report(&base.map(|v| (omega * v).sin()), DEFAULT_RANK_EPSILON)?.eps_rank;
            Ok((base_rank, sine))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankExpansion {
        rank,
        seeds: rows.len(),
        expanded: rows.iter().filter(|(_, s)| *s > rank).count(),
        below_base: rows.iter().filter(|(b, s)| s < b).count(),
        min_eps_rank: rows.iter().map(|(_, s)| *s).min().unwrap_or(0),
        mean_eps_rank: rows.iter().map(|(_, s)| *s as f64).sum::<f64>() / rows.len() as f64,
    })
}

impl RankExpansion {
    pub fn passes(&self) -> bool {
        let n = self.seeds as f64;
        self.expanded as f64 >= RANK_MIN_EXPANDED * n && self.below_base as f64 <= RANK_MAX_BELOW * n
    }
}

pub fn rank_suite(opts: VerifyOptions) -> Result<SuiteResult> {
    let mut t = Tally::new("rank");
    for r in [1, 2, 4] {
        let e = rank_expansion(r, opts.seed)?;
        t.set(&format!("r{r}_expanded_fraction"), e.expanded as f64 / e.seeds as f64);
        t.set(&format!("r{r}_min_eps_rank"), e.min_eps_rank as f64);
        t.record(opts.seed, e.passes());
    }
    Ok(t.finish(true))
}

/// Gradient checks of every isolated operation (all coordinates) and of the
/// default model (both normalization modes).
pub fn gradcheck_suite(opts: VerifyOptions) -> Result<SuiteResult> {
    let mut t = Tally::new("gradcheck");
    for (i, name) in OP_NAMES.iter().enumerate() {
        let seed = opts.seed + i as u64;
        let mut rng = RandomStream::new(seed, 7);
        let p = op_problem(name, &mut rng)?;
        let report: GradCheckReport = if opts.inject_fault && *name == "sine" {
            finite_diff_check(&mut SignFlip { inner: p, tensor: 0 }, GRAD_STEP)?
        } else {
            let mut p = p;
            finite_diff_check(&mut p, GRAD_STEP)?
        };
        t.set(&format!("{name}_max_rel_error"), report.max_rel_error());
        t.record(seed, report.passes(OP_GRAD_TOL));
    }
    let seed = opts.seed + OP_NAMES.len() as u64;
    let check = model_check(seed, None)?;
    t.set("model_max_rel_error", check.max_rel_error());
    t.record(seed, check.passes(MODEL_GRAD_TOL));
    Ok(t.finish(true))
}

/// Gradient check of the default model with generic random parameters, at
/// every coordinate or at `points` sampled ones per tensor.
pub fn model_check(seed: u64, points: Option<usize>) -> Result<ModelGradCheck> {
    let model = Model::new(ModelConfig::default(), seed)?;
    let mut rng = RandomStream::new(seed, 8);
    let mut problem = ModelProblem::random(model, 2, &mut rng)?;
    problem.perturb(0.3, &mut rng);
    match points {
        Some(n) => model_finite_diff_check_sampled(&mut problem, GRAD_STEP, n, &mut rng),
        None => model_finite_diff_check(&mut problem, GRAD_STEP),
    }
}

pub fn run_suite(name: &str, opts: VerifyOptions) -> Result<SuiteResult> {
    match name {
        "fusion" => fusion_suite(opts),
        "sine-range" => sine_range_suite(opts),
        "frequency-bound" => frequency_bound_suite(opts),
        "prop1" => prop1_suite(opts),
        "prop2" => prop2_suite(opts),
        "lowpass" => lowpass_suite(opts),
        "rank" => rank_suite(opts),
        "gradcheck" => gradcheck_suite(opts),
        _ => Err(contract!("unknown suite {name:?}, expected one of {SUITES:?}")),
    }
}

pub fn verify(suites: &[String], opts: VerifyOptions) -> Result<VerifySummary> {
    let names: Vec<String> = if suites.is_empty() {
        SUITES.iter().map(|s| s.to_string()).collect()
    } else {
        suites.to_vec()
    };
    let results = names.iter().map(|n| run_suite(n, opts)).collect::<Result<Vec<_>>>()?;
    Ok(VerifySummary {
        passed: results.iter().all(|r| r.passed),
        seed: opts.seed,
        suites: results,
    })
}
