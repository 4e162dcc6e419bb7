//! Python bindings: simplex projection, the CBF-QP filter, samplers, model
//! files, toy training and classifier certification.

use std::path::PathBuf;

use invariode::model::{ClassifierModel, Model};
use invariode::network::DynamicsNet;
use invariode::ode::{argmax, rollout, FilteredDynamics, IntegratorConfig, Method, StateSpace};
use invariode::qp::{solve_cbf_qp, ClassK, QpProblem};
use invariode::sampling::{certification_samples, sample_decision_boundary, sample_simplex_grid};
use invariode::simplex::{LevelBand, PotentialKind, SimplexPoint};
use invariode::train::{toy_gaussians as toy, train_classifier, TrainConfig};
use invariode::verify::{BoundMode, ClassifierCertConfig, DEFAULT_DELTA};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: invariode::Error) -> PyErr {
    use invariode::Error as E;
    match e {
        E::Io { .. } => PyIOError::new_err(e.to_string()),
        E::NumericalFailure(_) | E::DegenerateJacobian { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn potential_kind(name: &str) -> PyResult<PotentialKind> {
    match name {
        "margin" => Ok(PotentialKind::Margin),
        "mll" => Ok(PotentialKind::Mll),
        _ => Err(PyValueError::new_err(format!("unknown potential `{name}` (expected margin or mll)"))),
    }
}

/// Euclidean projection onto the probability simplex.
#[pyfunction]
fn project_to_simplex(v: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(invariode::simplex::project_to_simplex(&v).map_err(to_py)?.into_inner())
}

/// The simplex safety filter applied to `f_hat` at state `eta`.
#[pyfunction]
#[pyo3(signature = (f_hat, eta, c1=100.0, c2=0.02))]
fn simplex_filter(f_hat: Vec<f64>, eta: Vec<f64>, c1: f64, c2: f64) -> PyResult<Vec<f64>> {
    let alpha = ClassK::new(c1, c2).map_err(to_py)?;
    let p = QpProblem::simplex_filter(f_hat, &eta, &alpha).map_err(to_py)?;
    Ok(solve_cbf_qp(&p).map_err(to_py)?.f)
}

/// Solves `min ‖f − f̂‖²` subject to `lower ≤ f ≤ upper` and `Σf = b`;
/// returns `(f, λ)`.
#[pyfunction]
fn solve_qp(f_hat: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>, b: f64) -> PyResult<(Vec<f64>, f64)> {
    let p = QpProblem::new(f_hat, lower, upper, b).map_err(to_py)?;
    let s = solve_cbf_qp(&p).map_err(to_py)?;
    Ok((s.f, s.lambda))
}

#[pyfunction]
fn simplex_grid(n: usize, density: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(sample_simplex_grid(n, density).map_err(to_py)?.points)
}

#[pyfunction]
fn decision_boundary(n: usize, density: usize, label: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(sample_decision_boundary(n, density, label).map_err(to_py)?.points)
}

#[pyfunction]
fn kappa_min(eps: f64, l_v: f64, l_fx: f64, v_lower: f64) -> f64 {
    invariode::verify::kappa_min(eps, l_v, l_fx, v_lower)
}

#[pyfunction]
fn time_min(kappa: f64, lle: f64, v_lower: f64, v0: f64) -> f64 {
    invariode::verify::time_min(kappa, lle, v_lower, v0)
}

/// Three Gaussian blobs on a circle; returns `(points, labels)`.
#[pyfunction]
#[pyo3(signature = (count, radius=1.5, sigma=0.3, seed=1))]
fn toy_gaussians(count: usize, radius: f64, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    toy(count, radius, sigma, seed).into_iter().unzip()
}

/// A serialized classifier or controller.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

impl PyModel {
    fn classifier(&self) -> PyResult<&ClassifierModel> {
        match &self.inner {
            Model::Classifier(m) => Ok(m),
            Model::Controller(_) => Err(PyValueError::new_err("this is a controller model")),
        }
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Model::load(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Model::from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn task(&self) -> &'static str {
        match self.inner {
            Model::Classifier(_) => "classifier",
            Model::Controller(_) => "controller",
        }
    }

    #[getter]
    fn kappa(&self) -> f64 {
        match &self.inner {
            Model::Classifier(m) => m.kappa,
            Model::Controller(m) => m.kappa,
        }
    }

    /// Unfiltered network output `f̂(η, x)`.
    fn dynamics(&self, eta: Vec<f64>, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.classifier()?.net.forward(&eta, &x).map_err(to_py)
    }

    /// Controller output `u(x)`.
    fn control(&self, x: Vec<f64>) -> PyResult<f64> {
        match &self.inner {
            Model::Controller(m) => Ok(m.controller.forward(&x).map_err(to_py)?[0]),
            Model::Classifier(_) => Err(PyValueError::new_err("this is a classifier model")),
        }
    }

    /// Integrates the filtered dynamics from the uniform state; returns
    /// `(predicted class, final state)`.
    #[pyo3(signature = (x, dt=0.05, horizon=5.0))]
    fn classify(&self, x: Vec<f64>, dt: f64, horizon: f64) -> PyResult<(usize, Vec<f64>)> {
        let m = self.classifier()?;
        let net = m.net.materialize().map_err(to_py)?;
        let dynamics = FilteredDynamics {
            net: &net,
            x: &x,
            alpha: m.alpha,
        };
        let cfg = IntegratorConfig::new(Method::Rk4, dt, horizon).map_err(to_py)?;
        let start = SimplexPoint::uniform(m.n_classes());
        let traj = rollout(&dynamics, start.coords(), &cfg, StateSpace::Simplex).map_err(to_py)?;
        Ok((argmax(traj.final_state()), traj.final_state().to_vec()))
    }

    /// Certifies that `x` is classified as `label` under every perturbation of
    /// ℓ2 norm at most `eps`; returns the report as JSON.
    #[pyo3(signature = (x, label, eps, density=20, mode="crown", horizon=5.0))]
    fn certify(&self, x: Vec<f64>, label: usize, eps: f64, density: usize, mode: &str, horizon: f64) -> PyResult<String> {
        let m = self.classifier()?;
        let mode = match mode {
            "crown" => BoundMode::Crown,
            "lipschitz" => BoundMode::Lipschitz,
            _ => return Err(PyValueError::new_err(format!("unknown mode `{mode}`"))),
        };
        let n = m.n_classes();
        let band = LevelBand::classifier_default(m.potential, n).map_err(to_py)?;
        let cfg = ClassifierCertConfig {
            eps,
            band,
            horizon,
            mode,
            neighborhood_radius: 1.0 / density as f64,
            delta: DEFAULT_DELTA,
        };
        let samples = certification_samples(m.potential, label, n, density, &band).map_err(to_py)?;
        let report = invariode::verify::certify_classifier(m, &x, label, &cfg, &samples).map_err(to_py)?;
        Ok(report.to_json())
    }
}

/// Trains a classifier on the toy Gaussian task and returns it with the loss
/// history.
#[pyfunction]
#[pyo3(signature = (iterations=400, width=16, seed=7, potential="margin", count=300))]
fn train_toy(iterations: usize, width: usize, seed: u64, potential: &str, count: usize) -> PyResult<(PyModel, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = DynamicsNet::orthogonal(&mut rng, 3, 2, width).map_err(to_py)?;
    let cfg = TrainConfig {
        iterations,
        potential: potential_kind(potential)?,
        ..TrainConfig::default()
    };
    let out = train_classifier(net, ClassK::default(), &toy(count, 1.5, 0.3, 1), &cfg).map_err(to_py)?;
    Ok((
        PyModel {
            inner: Model::Classifier(out.model),
        },
        out.history.iter().map(|r| r.loss).collect(),
    ))
}

#[pymodule]
fn pyinvariode(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(project_to_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(simplex_filter, m)?)?;
    m.add_function(wrap_pyfunction!(solve_qp, m)?)?;
    m.add_function(wrap_pyfunction!(simplex_grid, m)?)?;
    m.add_function(wrap_pyfunction!(decision_boundary, m)?)?;
    m.add_function(wrap_pyfunction!(kappa_min, m)?)?;
    m.add_function(wrap_pyfunction!(time_min, m)?)?;
    m.add_function(wrap_pyfunction!(toy_gaussians, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    Ok(())
}
