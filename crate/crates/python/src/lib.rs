//! Python bindings. Tensors cross the boundary as `Tensor(shape, data)` with
//! flat row-major data; configs and reports as JSON strings.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sinewich::adapter::{self, FusedKernel, LowRankFactors, MidKernel, ModulatedKernel};
use sinewich::analysis;
use sinewich::cli::{verify as run_verify, VerifyOptions};
use sinewich::model::{self, ModelConfig};
use sinewich::numerics::{self, ConvKernel, RandomStream};
use sinewich::trainer::{self, TrainConfig};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(frozen, from_py_object)]
#[derive(Clone)]
struct Tensor {
    inner: numerics::Tensor,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: numerics::Tensor::new(shape, data).map_err(err)?,
        })
    }

    /// Standard normal entries scaled by `sigma`, from seed `seed`.
    #[staticmethod]
    #[pyo3(signature = (shape, seed, sigma = 1.0))]
    fn randn(shape: Vec<usize>, seed: u64, sigma: f64) -> Self {
        Self {
            inner: RandomStream::new(seed, 0).gaussian_tensor(&shape, sigma),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn wrap(inner: numerics::Tensor) -> Tensor {
    Tensor { inner }
}

fn fused(kernel: &Tensor) -> PyResult<FusedKernel> {
    FusedKernel::from_kernel(ConvKernel::new(kernel.inner.clone()).map_err(err)?).map_err(err)
}

fn factors(a: &Tensor, b: &Tensor, w: &Tensor) -> PyResult<(LowRankFactors, MidKernel)> {
    Ok((
        LowRankFactors::new(a.inner.clone(), b.inner.clone()).map_err(err)?,
        MidKernel::new(w.inner.clone()).map_err(err)?,
    ))
}

/// Fused `[n, m, k, k]` kernel of `A: [m, r]`, `B: [n, r]`, `W: [r, r, k, k]`.
#[pyfunction]
fn fuse_awb(a: &Tensor, b: &Tensor, w: &Tensor) -> PyResult<Tensor> {
    let (f, mid) = factors(a, b, w)?;
    Ok(wrap(adapter::fuse_awb(&f, &mid).map_err(err)?.weights().clone()))
}

/// Applies reduce, spatial and expand convolutions one after another.
#[pyfunction]
fn pipeline_apply(a: &Tensor, b: &Tensor, w: &Tensor, x: &Tensor) -> PyResult<Tensor> {
    let (f, mid) = factors(a, b, w)?;
    Ok(wrap(adapter::pipeline_apply(&f, &mid, &x.inner).map_err(err)?))
}

/// Same-padded convolution of a `[c, h, w]` input.
#[pyfunction]
fn conv2d(x: &Tensor, kernel: &Tensor) -> PyResult<Tensor> {
    let k = ConvKernel::new(kernel.inner.clone()).map_err(err)?;
    Ok(wrap(numerics::conv2d(&x.inner, &k).map_err(err)?))
}

#[pyfunction]
fn sine_modulate(kernel: &Tensor, omega: f64) -> PyResult<Tensor> {
    Ok(wrap(
        adapter::sine_modulate(&fused(kernel)?, omega).kernel.into_weights(),
    ))
}

#[pyfunction]
fn linear_scale(kernel: &Tensor, omega: f64) -> PyResult<Tensor> {
    Ok(wrap(
        adapter::linear_scale(&fused(kernel)?, omega).kernel.into_weights(),
    ))
}

/// Gaussian low-pass over the kernel's matrix view.
#[pyfunction]
#[pyo3(signature = (kernel, size = 7, sigma = 1.0))]
fn lowpass(kernel: &Tensor, size: usize, sigma: f64) -> PyResult<Tensor> {
    let mk = ModulatedKernel {
        kernel: ConvKernel::new(kernel.inner.clone()).map_err(err)?,
        omega: 1.0,
        filter: None,
    };
    Ok(wrap(
        adapter::lowpass_filter(&mk, size, sigma)
            .map_err(err)?
            .kernel
            .into_weights(),
    ))
}

/// `s * (tanh(W_q relu(p)) + c)`.
#[pyfunction]
fn clock_omega(w_q: &Tensor, s: f64, c: f64, token: &Tensor) -> PyResult<f64> {
    let params = adapter::ClockNetParams::new(w_q.inner.clone(), s, c).map_err(err)?;
    adapter::clock_omega(&params, &token.inner).map_err(err)
}

#[pyfunction]
fn vec_correlation(a: &Tensor, b: &Tensor) -> PyResult<f64> {
    analysis::vec_correlation(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn gaussian_corr_oracle(omega_s: f64, omega_t: f64, sigma: f64) -> PyResult<f64> {
    analysis::gaussian_corr_oracle(omega_s, omega_t, sigma).map_err(err)
}

/// Returns `(mean, stderr)`.
#[pyfunction]
#[pyo3(signature = (omega_s, omega_t, sigma, samples, seed = 0))]
fn monte_carlo_corr(omega_s: f64, omega_t: f64, sigma: f64, samples: usize, seed: u64) -> PyResult<(f64, f64)> {
    let mut rng = RandomStream::new(seed, 0);
    let e = analysis::monte_carlo_corr(omega_s, omega_t, sigma, samples, &mut rng).map_err(err)?;
    Ok((e.mean, e.stderr))
}

/// Returns `(eps_rank, stable_rank, singular_values)`.
#[pyfunction]
#[pyo3(signature = (m, epsilon = 1e-6))]
fn rank_report(m: &Tensor, epsilon: f64) -> PyResult<(usize, f64, Vec<f64>)> {
    let r = analysis::rank_report(&m.inner, epsilon).map_err(err)?;
    Ok((r.eps_rank, r.stable_rank, r.singular_values))
}

#[pyfunction]
fn delta_m(mtl: Vec<f64>, st: Vec<f64>, lower_is_better: Vec<bool>) -> PyResult<f64> {
    trainer::delta_m(&mtl, &st, &lower_is_better).map_err(err)
}

#[pyfunction]
fn format_delta_m(v: f64) -> String {
    trainer::format_delta_m(v)
}

/// Runs the verification suites; returns the JSON summary.
#[pyfunction]
#[pyo3(signature = (suites = Vec::new(), seed = 0))]
fn verify(py: Python<'_>, suites: Vec<String>, seed: u64) -> PyResult<String> {
    let summary = py
        .detach(|| {
            run_verify(
                &suites,
                VerifyOptions {
                    seed,
                    inject_fault: false,
                },
            )
        })
        .map_err(err)?;
    serde_json::to_string(&summary).map_err(err)
}

/// Trains from a JSON config (defaults for absent keys); returns the report JSON.
#[pyfunction]
#[pyo3(signature = (config_json = "{}"))]
fn train(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg: TrainConfig = serde_json::from_str(config_json).map_err(err)?;
    let report = py.detach(|| trainer::train(&cfg)).map_err(err)?;
    report.to_json().map_err(err)
}

#[pyclass(frozen)]
struct Model {
    inner: model::Model,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (config_json = None, seed = 0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = match config_json {
            Some(s) => serde_json::from_str(s).map_err(err)?,
            None => ModelConfig::default(),
        };
        Ok(Self {
            inner: model::Model::new(cfg, seed).map_err(err)?,
        })
    }

    #[getter]
    fn num_trainable(&self) -> usize {
        self.inner.num_trainable()
    }

    #[getter]
    fn num_tasks(&self) -> usize {
        self.inner.config().num_tasks
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params().info().iter().map(|i| i.name.clone()).collect()
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(err)
    }

    /// Per-task omegas of every switched layer, encoder first.
    fn omegas(&self, task: usize) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .task_kernels(task)
            .map_err(err)?
            .iter()
            .map(|k| k.omega)
            .collect())
    }

    /// Predictions of `task` for a batch of `[c, h, w]` images.
    #[pyo3(signature = (inputs, task, train_mode = false))]
    fn forward(&self, inputs: Vec<Tensor>, task: usize, train_mode: bool) -> PyResult<Vec<Tensor>> {
        let batch: Vec<numerics::Tensor> = inputs.into_iter().map(|t| t.inner).collect();
        let mode = if train_mode {
            model::Mode::Train
        } else {
            model::Mode::Eval
        };
        let (preds, _) = self.inner.forward(&batch, task, mode).map_err(err)?;
        Ok(preds.into_iter().map(wrap).collect())
    }
}

#[pymodule]
fn sinewich_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(fuse_awb, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline_apply, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(sine_modulate, m)?)?;
    m.add_function(wrap_pyfunction!(linear_scale, m)?)?;
    m.add_function(wrap_pyfunction!(lowpass, m)?)?;
    m.add_function(wrap_pyfunction!(clock_omega, m)?)?;
    m.add_function(wrap_pyfunction!(vec_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_corr_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo_corr, m)?)?;
    m.add_function(wrap_pyfunction!(rank_report, m)?)?;
    m.add_function(wrap_pyfunction!(delta_m, m)?)?;
    m.add_function(wrap_pyfunction!(format_delta_m, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
