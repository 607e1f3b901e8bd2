use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::Value;

use super::verify::{verify, VerifyOptions, GRAD_STEP, MODEL_GRAD_TOL, OP_GRAD_TOL};
use crate::analysis::{gaussian_corr_oracle, monte_carlo_corr, rank_report};
use crate::error::Error;
use crate::model::{
    finite_diff_check, finite_diff_check_sampled, model_finite_diff_check, model_finite_diff_check_sampled, op_problem,
    GradCheckReport, Model, ModelConfig, ModelProblem,
};
use crate::numerics::RandomStream;
use crate::trainer::{delta_m, format_delta_m, train, TrainConfig};

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "SINEWICH_THREADS";

/// Version tag accepted in config files as `"schema_version"`.
pub const CONFIG_SCHEMA_VERSION: u64 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failure(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } | Error::Io(_) | Error::Csv(_) => CliError::Failure(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "sinewich",
    version,
    about = "Frequency-switched low-rank adapters: checks, analyses and toy training"
)]
struct Cli {
    /// Worker threads; defaults to $SINEWICH_THREADS, else all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the built-in verification suites and print a JSON summary.
    Verify(VerifyArgs),
    /// Monte Carlo correlation of two sine maps against the closed form.
    AnalyzeCorr(CorrArgs),
    /// Singular-value rank of sin(omega A B^T) against A B^T.
    AnalyzeRank(RankArgs),
    /// Finite-difference gradient check of the model or one operation.
    Gradcheck(GradArgs),
    /// Train the multi-task model on the synthetic suite.
    Train(TrainArgs),
    /// Average signed relative improvement over single-task results, in percent.
    DeltaM(DeltaArgs),
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Suite to run (repeatable); all suites when absent.
    #[arg(long = "suite")]
    suites: Vec<String>,
    /// Base seed; instance i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the summary to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct CorrArgs {
    /// Values, comma lists or ranges `a:b[:step]`; repeatable.
    #[arg(long = "omega-s", required = true)]
    omega_s: Vec<String>,
    #[arg(long = "omega-t", required = true)]
    omega_t: Vec<String>,
    #[arg(long, default_values_t = vec!["1".to_string()])]
    sigma: Vec<String>,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[arg(long, default_values_t = vec!["1,2,4".to_string()])]
    rank: Vec<String>,
    #[arg(long, default_values_t = vec!["1:8".to_string()])]
    omega: Vec<String>,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Random factor draws per (rank, omega) pair.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradArgs {
    /// Model config: JSON file or `key=value` override; repeatable.
    #[arg(long = "config")]
    config: Vec<String>,
    /// Check one isolated operation instead of the model.
    #[arg(long)]
    op: Option<String>,
    /// Coordinates per tensor; 0 checks all of them.
    #[arg(long, default_value_t = 0)]
    points: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = GRAD_STEP)]
    step: f64,
    /// Scale of the random perturbation added to every parameter.
    #[arg(long, default_value_t = 0.3)]
    perturb: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON config file or `key=value` override; repeatable, applied in order.
    #[arg(long = "config")]
    config: Vec<String>,
    /// Output directory; may also come from the config's `out` key.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DeltaArgs {
    /// Single-task results, comma separated.
    #[arg(long)]
    st: String,
    /// Multi-task results, comma separated.
    #[arg(long)]
    mtl: String,
    /// 1 where lower is better, else 0; all 0 when absent.
    #[arg(long)]
    signs: Option<String>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_threads(cli.threads).and_then(|()| dispatch(cli.command));
    match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Failure(msg)) => {
            eprintln!("error: {msg}");
            EXIT_FAILURE
        }
    }
}

fn configure_threads(flag: Option<usize>) -> CliResult<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Usage("thread count must be positive".into()));
        }
        // A pool may already exist when embedded; its size then wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(cmd: Command) -> CliResult<i32> {
    match cmd {
        Command::Verify(a) => cmd_verify(a),
        Command::AnalyzeCorr(a) => cmd_analyze_corr(a),
        Command::AnalyzeRank(a) => cmd_analyze_rank(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::DeltaM(a) => cmd_delta_m(a),
    }
}

fn cmd_verify(a: VerifyArgs) -> CliResult<i32> {
    for s in &a.suites {
        if !super::verify::SUITES.contains(&s.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown suite {s:?}; choose from {}",
                super::verify::SUITES.join(", ")
            )));
        }
    }
    let summary = verify(
        &a.suites,
        VerifyOptions {
            seed: a.seed,
            inject_fault: a.inject_fault,
        },
    )?;
    let json = serde_json::to_string_pretty(&summary).map_err(Error::from)? + "\n";
    print!("{json}");
    if let Some(path) = a.out {
        fs::write(path, &json)?;
    }
    for s in summary.suites.iter().filter(|s| !s.passed) {
        match s.failing_seed {
            Some(seed) => eprintln!(
                "suite {} failed; replay with: sinewich verify --suite {} --seed {seed}",
                s.suite, s.suite
            ),
            None => eprintln!("suite {} failed", s.suite),
        }
    }
    Ok(if summary.passed { EXIT_OK } else { EXIT_FAILURE })
}

/// Parses repeated list flags: `1,2.5`, `1:10` (step 1) or `0:1:0.25`.
pub fn parse_values(specs: &[String]) -> Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for spec in specs {
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let parts: Vec<&str> = item.split(':').collect();
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("bad number {s:?} in {item:?}"))
            };
            match parts.len() {
                1 => out.push(num(parts[0])?),
                2 | 3 => {
                    let (lo, hi) = (num(parts[0])?, num(parts[1])?);
                    let step = if parts.len() == 3 { num(parts[2])? } else { 1.0 };
                    if !(step > 0.0) || hi < lo {
                        return Err(format!("bad range {item:?}"));
                    }
                    let n = ((hi - lo) / step + 1e-9).floor() as usize;
                    out.extend((0..=n).map(|i| lo + i as f64 * step));
                }
                _ => return Err(format!("bad range {item:?}")),
            }
        }
    }
    if out.is_empty() {
        return Err("empty value list".into());
    }
    Ok(out)
}

fn values(specs: &[String], flag: &str) -> CliResult<Vec<f64>> {
    parse_values(specs).map_err(|e| CliError::Usage(format!("--{flag}: {e}")))
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn csv_text(header: &[&str], rows: Vec<Vec<String>>) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(Error::from)?;
    for r in rows {
        w.write_record(&r).map_err(Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Failure(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Failure(e.to_string()))
}

fn cmd_analyze_corr(a: CorrArgs) -> CliResult<i32> {
    let ws = values(&a.omega_s, "omega-s")?;
    let wt = values(&a.omega_t, "omega-t")?;
    let sigmas = values(&a.sigma, "sigma")?;
    let mut grid = Vec::new();
    for &s in &ws {
        for &t in &wt {
            for &sg in &sigmas {
                grid.push((s, t, sg));
            }
        }
    }
    let rows = grid
        .par_iter()
        .enumerate()
        .map(|(i, &(s, t, sigma))| {
            let oracle = gaussian_corr_oracle(s, t, sigma)?;
            let mut rng = RandomStream::new(a.seed, i as u64);
            let est = monte_carlo_corr(s, t, sigma, a.samples, &mut rng)?;
            Ok(vec![
                s.to_string(),
                t.to_string(),
                sigma.to_string(),
                est.mean.to_string(),
                est.stderr.to_string(),
                oracle.to_string(),
                (est.mean - oracle).abs().to_string(),
            ])
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let text = csv_text(
        &[
            "omega_s",
            "omega_t",
            "sigma",
            "mc_mean",
            "mc_stderr",
            "oracle",
            "abs_gap",
        ],
        rows,
    )?;
    emit(a.out.as_deref(), &text)?;
    Ok(EXIT_OK)
}

fn cmd_analyze_rank(a: RankArgs) -> CliResult<i32> {
    let ranks = values(&a.rank, "rank")?;
    let omegas = values(&a.omega, "omega")?;
    let mut grid = Vec::new();
    for &r in &ranks {
        if r < 1.0 || r.fract() != 0.0 || r as usize > a.dim {
            return Err(CliError::Usage(format!(
                "--rank {r} must be an integer in 1..={}",
                a.dim
            )));
        }
        for &w in &omegas {
            for s in 0..a.seeds {
                grid.push((r as usize, w, a.seed + s as u64));
            }
        }
    }
    let dim = a.dim;
    let rows = grid
        .par_iter()
        .map(|&(r, omega, seed)| {
            let mut rng = RandomStream::new(seed, 6);
            let fa = rng.gaussian_tensor(&[dim, r], 1.0);
            let fb = rng.gaussian_tensor(&[dim, r], 1.0);
            let base = fa.matmul(&fb.transpose2()?)?;
            let b = rank_report(&base, a.epsilon)?;
            let s = rank_report(&base.map(|v| (omega * v).sin()), a.epsilon)?;
            Ok(vec![
                r.to_string(),
                omega.to_string(),
                seed.to_string(),
                b.eps_rank.to_string(),
                s.eps_rank.to_string(),
                b.stable_rank.to_string(),
                s.stable_rank.to_string(),
            ])
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let text = csv_text(
        &[
            "rank",
            "omega",
            "seed",
            "base_eps_rank",
            "eps_rank",
            "base_stable_rank",
            "stable_rank",
        ],
        rows,
    )?;
    emit(a.out.as_deref(), &text)?;
    Ok(EXIT_OK)
}

fn report_rows(mode: &str, r: &GradCheckReport, zero: &[String], rows: &mut Vec<Vec<String>>) {
    for t in &r.tensors {
        rows.push(vec![
            mode.to_string(),
            t.name.clone(),
            zero.contains(&t.name).to_string(),
            t.checked.to_string(),
            t.skipped.to_string(),
            t.max_abs_error.to_string(),
            t.max_rel_error.to_string(),
        ]);
    }
}

fn cmd_gradcheck(a: GradArgs) -> CliResult<i32> {
    if !(a.step > 0.0) {
        return Err(CliError::Usage("--step must be positive".into()));
    }
    let mut rng = RandomStream::new(a.seed, 9);
    let mut rows = Vec::new();
    let (passed, worst, tol) = if let Some(op) = &a.op {
        if !a.config.is_empty() {
            return Err(CliError::Usage("--config does not apply to --op checks".into()));
        }
        let mut p = op_problem(op, &mut rng)?;
        let r = if a.points == 0 {
            finite_diff_check(&mut p, a.step)?
        } else {
            finite_diff_check_sampled(&mut p, a.step, a.points, &mut rng)?
        };
        report_rows("op", &r, &[], &mut rows);
        (r.passes(OP_GRAD_TOL), r.max_rel_error(), OP_GRAD_TOL)
    } else {
        let mut value = serde_json::to_value(ModelConfig::default()).map_err(Error::from)?;
        for spec in &a.config {
            apply_config_arg(&mut value, spec, None)?;
        }
        let cfg: ModelConfig = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let model = Model::new(cfg, a.seed)?;
        let mut p = ModelProblem::random(model, a.batch, &mut rng)?;
        p.perturb(a.perturb, &mut rng);
        let c = if a.points == 0 {
            model_finite_diff_check(&mut p, a.step)?
        } else {
            model_finite_diff_check_sampled(&mut p, a.step, a.points, &mut rng)?
        };
        report_rows("eval", &c.eval, &[], &mut rows);
        report_rows("train", &c.train, &c.zero_in_train, &mut rows);
        (c.passes(MODEL_GRAD_TOL), c.max_rel_error(), MODEL_GRAD_TOL)
    };
    let text = csv_text(
        &[
            "mode",
            "tensor",
            "expect_zero",
            "checked",
            "skipped",
            "max_abs_error",
            "max_rel_error",
        ],
        rows,
    )?;
    emit(a.out.as_deref(), &text)?;
    eprintln!(
        "gradcheck {}: max relative error {worst:.3e} (tolerance {tol:e})",
        if passed { "passed" } else { "FAILED" }
    );
    Ok(if passed { EXIT_OK } else { EXIT_FAILURE })
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// Applies one `--config` argument: a JSON file merged over `value`, or a
/// dotted `key=value` override. Keys missing at the top level are looked up
/// under `fallback` (the model section for training configs).
fn apply_config_arg(value: &mut Value, spec: &str, fallback: Option<&str>) -> CliResult<()> {
    let path = Path::new(spec);
    if path.is_file() || !spec.contains('=') {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {spec}: {e}")))?;
        let mut doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {spec}: {e}")))?;
        if let Value::Object(map) = &mut doc {
            if let Some(v) = map.remove("schema_version") {
                if v.as_u64() != Some(CONFIG_SCHEMA_VERSION) {
                    return Err(CliError::Usage(format!(
                        "config {spec}: schema_version {v} is not supported (expected {CONFIG_SCHEMA_VERSION})"
                    )));
                }
            }
        }
        merge(value, doc);
        return Ok(());
    }
    let (key, raw) = spec.split_once('=').expect("contains '='");
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad config key {key:?}")));
    }
    if let (Some(fb), Value::Object(top)) = (fallback, &*value) {
        let in_fallback = top.get(fb).and_then(|m| m.get(parts[0])).is_some();
        if !top.contains_key(parts[0]) && in_fallback {
            parts.insert(0, fb);
        }
    }
    let mut slot = &mut *value;
    for p in &parts[..parts.len() - 1] {
        slot = slot
            .get_mut(*p)
            .filter(|s| s.is_object())
            .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?;
    }
    let last = parts[parts.len() - 1];
    match slot {
        Value::Object(m) if m.contains_key(last) => {
            m.insert(last.to_string(), parse_scalar(raw.trim()));
            Ok(())
        }
        _ => Err(CliError::Usage(format!("unknown config key {key:?}"))),
    }
}

/// Builds a training config from `--config` arguments; returns it together
/// with the `out` directory named in a config file, if any.
pub fn resolve_train_config(specs: &[String]) -> Result<(TrainConfig, Option<PathBuf>), String> {
    resolve(specs).map_err(|e| match e {
        CliError::Usage(m) | CliError::Failure(m) => m,
    })
}

fn resolve(specs: &[String]) -> CliResult<(TrainConfig, Option<PathBuf>)> {
    let mut value = serde_json::to_value(TrainConfig::default()).map_err(Error::from)?;
    if let Value::Object(m) = &mut value {
        m.insert("out".into(), Value::Null);
    }
    for spec in specs {
        apply_config_arg(&mut value, spec, Some("model"))?;
    }
    let out = match &mut value {
        Value::Object(m) => m.remove("out"),
        _ => None,
    };
    let out = match out {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(v) => return Err(CliError::Usage(format!("config out must be a path, got {v}"))),
    };
    let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    cfg.validate()?;
    Ok((cfg, out))
}

fn cmd_train(a: TrainArgs) -> CliResult<i32> {
    let (cfg, from_file) = resolve(&a.config)?;
    let out = a
        .out
        .or(from_file)
        .ok_or_else(|| CliError::Usage("an output directory is required (--out)".into()))?;
    let start = Instant::now();
    let report = train(&cfg).map_err(|e| match e {
        Error::Diverged { .. } => CliError::Failure(format!("{e}; lower optimizer.lr or check the config")),
        other => CliError::from(other),
    })?;
    report.write_outputs(&out)?;
    let timing = serde_json::json!({ "wall_seconds": start.elapsed().as_secs_f64() });
    fs::write(out.join("timing.json"), timing.to_string() + "\n")?;
    let dm = report.delta_m.map(format_delta_m).unwrap_or_else(|| "n/a".into());
    println!(
        "{} ({} tasks, {} epochs): final val {:?}, delta_m {dm}",
        cfg.model.variant.name(),
        report.tasks.len(),
        cfg.epochs,
        report.final_val
    );
    Ok(EXIT_OK)
}

fn list(raw: &str, flag: &str) -> CliResult<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Usage(format!("--{flag}: bad number {s:?}")))
        })
        .collect()
}

fn cmd_delta_m(a: DeltaArgs) -> CliResult<i32> {
    let st = list(&a.st, "st")?;
    let mtl = list(&a.mtl, "mtl")?;
    let signs = match &a.signs {
        None => vec![false; st.len()],
        Some(raw) => raw
            .split(',')
            .map(|s| match s.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(CliError::Usage(format!("--signs: expected 0 or 1, got {other:?}"))),
            })
            .collect::<CliResult<Vec<_>>>()?,
    };
    let v = delta_m(&mtl, &st, &signs)?;
    println!("{}", format_delta_m(v));
    Ok(EXIT_OK)
}
