//! Fixed-step integration of filtered dynamics and trajectory readout.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::MaterializedDynamics;
use crate::qp::{solve_cbf_qp, ClassK, QpProblem};
use crate::simplex::project_to_simplex;

/// A time-invariant vector field.
pub trait Dynamics {
    fn derivative(&self, state: &[f64]) -> Result<Vec<f64>>;
}

impl<F> Dynamics for F
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    fn derivative(&self, state: &[f64]) -> Result<Vec<f64>> {
        self(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

/// Where trajectories live. Simplex states are re-projected after every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateSpace {
    Simplex,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub method: Method,
    pub dt: f64,
    pub horizon: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            dt: 0.05,
            horizon: 5.0,
        }
    }
}

impl IntegratorConfig {
    pub fn new(method: Method, dt: f64, horizon: f64) -> Result<Self> {
        let cfg = Self { method, dt, horizon };
        cfg.steps()?;
        Ok(cfg)
    }

    /// `horizon / dt`, which must be a positive integer.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.horizon > 0.0 && self.dt.is_finite() && self.horizon.is_finite()) {
            return Err(Error::invalid("dt and horizon must be positive and finite"));
        }
        let ratio = self.horizon / self.dt;
        let k = ratio.round();
        if k < 1.0 || (ratio - k).abs() > 1e-9 * k.max(1.0) {
            return Err(Error::invalid(format!(
                "horizon {} is not an integer multiple of dt {}",
                self.horizon, self.dt
            )));
        }
        Ok(k as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Header `t,eta_0,...,eta_{n-1}`, one row per step.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((0..n).map(|i| format!("eta_{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (t, s) in self.times.iter().zip(&self.states) {
            write!(w, "{t}")?;
            for v in s {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn axpy(y: &[f64], a: f64, x: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(yi, xi)| yi + a * xi).collect()
}

fn step(f: &impl Dynamics, s: &[f64], dt: f64, method: Method) -> Result<Vec<f64>> {
    match method {
        Method::Euler => Ok(axpy(s, dt, &f.derivative(s)?)),
        Method::Rk4 => {
            let k1 = f.derivative(s)?;
            let k2 = f.derivative(&axpy(s, dt / 2.0, &k1))?;
            let k3 = f.derivative(&axpy(s, dt / 2.0, &k2))?;
            let k4 = f.derivative(&axpy(s, dt, &k3))?;
            Ok((0..s.len())
                .map(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect())
        }
    }
}

pub fn rollout(
    dynamics: &impl Dynamics,
    state0: &[f64],
    cfg: &IntegratorConfig,
    space: StateSpace,
) -> Result<Trajectory> {
    let steps = cfg.steps()?;
    let mut state = match space {
        StateSpace::Simplex => crate::simplex::SimplexPoint::new(state0.to_vec())?.into_inner(),
        StateSpace::Euclidean => state0.to_vec(),
    };
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
    };
    traj.times.push(0.0);
    traj.states.push(state.clone());
    for k in 1..=steps {
        let next = step(dynamics, &state, cfg.dt, cfg.method)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!("non-finite state at step {k}")));
        }
        state = match space {
            StateSpace::Simplex => project_to_simplex(&next)?.into_inner(),
            StateSpace::Euclidean => next,
        };
        traj.times.push(k as f64 * cfg.dt);
        traj.states.push(state.clone());
    }
    Ok(traj)
}

/// Index of the largest coordinate; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn classify(traj: &Trajectory) -> usize {
    argmax(traj.final_state())
}

/// `η̇ = f(η, x)`: the network proposal filtered through the simplex CBF-QP.
pub struct FilteredDynamics<'a> {
    pub net: &'a MaterializedDynamics,
    pub x: &'a [f64],
    pub alpha: ClassK,
}

impl FilteredDynamics<'_> {
    pub fn problem(&self, eta: &[f64]) -> Result<QpProblem> {
        let f_hat = self.net.forward(eta, self.x)?;
        QpProblem::simplex_filter(f_hat, eta, &self.alpha)
    }
}

impl Dynamics for FilteredDynamics<'_> {
    fn derivative(&self, eta: &[f64]) -> Result<Vec<f64>> {
        // RK4 stages may step slightly outside the simplex; the filter is
        // evaluated at the nearest simplex point.
        let eta = project_to_simplex(eta)?;
        Ok(solve_cbf_qp(&self.problem(eta.coords())?)?.f)
    }
}
