//! The CBF-QP safety filter: Euclidean projection of raw dynamics onto
//! `{f : 𝟙ᵀf = b, lower ≤ f ≤ upper}`, solved by bisection on the equality
//! multiplier, plus the derivative of the solution map.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_BISECTION_ITERS: usize = 200;
pub const SUM_RESIDUAL_TOL: f64 = 1e-10;
pub const KKT_TOL: f64 = 1e-8;
/// Distance to a bound under which the binding-set classification is ambiguous.
pub const DEGENERACY_TOL: f64 = 1e-6;

/// `α(s) = c1·(exp(c2·s) − 1)`, an extended class-K∞ function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassK {
    pub c1: f64,
    pub c2: f64,
}

impl Default for ClassK {
    fn default() -> Self {
        Self {
            c1: 100.0,
            c2: 0.02,
        }
    }
}

impl ClassK {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        if !(c1 > 0.0 && c2 > 0.0 && c1.is_finite() && c2.is_finite()) {
            return Err(Error::invalid(format!(
                "class-K parameters must be positive, got c1={c1}, c2={c2}"
            )));
        }
        Ok(Self { c1, c2 })
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.c1 * (self.c2 * s).exp_m1()
    }

    pub fn derivative(&self, s: f64) -> f64 {
        self.c1 * self.c2 * (self.c2 * s).exp()
    }
}

/// Projection problem. `upper` entries may be `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub f_hat: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub b: f64,
}

impl QpProblem {
    pub fn new(f_hat: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>, b: f64) -> Result<Self> {
        let n = f_hat.len();
        if n == 0 || lower.len() != n || upper.len() != n {
            return Err(Error::invalid(
                "QP vectors must be nonempty and of equal length",
            ));
        }
        if f_hat.iter().chain(&lower).any(|x| !x.is_finite()) || !b.is_finite() {
            return Err(Error::invalid(
                "QP raw dynamics, lower bounds and b must be finite",
            ));
        }
        if upper.iter().any(|&u| u.is_nan() || u == f64::NEG_INFINITY) {
            return Err(Error::invalid("QP upper bounds must be real or +inf"));
        }
        Ok(Self {
            f_hat,
            lower,
            upper,
            b,
        })
    }

    /// The classifier filter: `𝟙ᵀf = 0`, `f ≥ −α(η)`, no upper bounds.
    pub fn simplex_filter(f_hat: Vec<f64>, eta: &[f64], alpha: &ClassK) -> Result<Self> {
        if eta.len() != f_hat.len() {
            return Err(Error::invalid("state and raw dynamics differ in dimension"));
        }
        let lower = eta.iter().map(|&e| -alpha.eval(e)).collect();
        let upper = vec![f64::INFINITY; eta.len()];
        Self::new(f_hat, lower, upper, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.f_hat.len()
    }

    fn clip(&self, i: usize, lambda: f64) -> f64 {
        (self.f_hat[i] + lambda)
            .max(self.lower[i])
            .min(self.upper[i])
    }

    fn residual(&self, lambda: f64) -> f64 {
        (0..self.dim()).map(|i| self.clip(i, lambda)).sum::<f64>() - self.b
    }

    fn check_feasible(&self) -> Result<()> {
        for i in 0..self.dim() {
            if self.lower[i] > self.upper[i] {
                return Err(Error::Infeasible(format!(
                    "lower bound {} exceeds upper bound {} at coordinate {i}",
                    self.lower[i], self.upper[i]
                )));
            }
        }
        let lo: f64 = self.lower.iter().sum();
        let hi: f64 = self.upper.iter().sum();
        let tol = KKT_TOL * (1.0 + self.b.abs());
        if lo > self.b + tol || hi < self.b - tol {
            return Err(Error::Infeasible(format!(
                "sum constraint {} outside [{lo}, {hi}]",
                self.b
            )));
        }
        Ok(())
    }

    /// Interval guaranteed to contain the multiplier.
    fn bracket(&self) -> (f64, f64) {
        let n = self.dim();
        let lo = (0..n)
            .map(|i| self.lower[i] - self.f_hat[i])
            .fold(f64::INFINITY, f64::min);
        let max_lower_gap = (0..n)
            .map(|i| self.lower[i] - self.f_hat[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let unbounded: Vec<usize> = (0..n).filter(|&i| self.upper[i] == f64::INFINITY).collect();
        let max_upper_gap = (0..n)
            .filter(|&i| self.upper[i].is_finite())
            .map(|i| self.upper[i] - self.f_hat[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let hi = if unbounded.is_empty() {
            max_upper_gap
        } else {
            // Past both gaps every finite upper bound is active and no lower bound
            // is, so the residual is affine in λ with slope |unbounded|.
            let pinned: f64 = (0..n)
                .filter(|&i| self.upper[i].is_finite())
                .map(|i| self.upper[i])
                .sum();
            let free: f64 = unbounded.iter().map(|&i| self.f_hat[i]).sum();
            let root = (self.b - pinned - free) / unbounded.len() as f64;
            max_lower_gap.max(max_upper_gap).max(root)
        };
        (lo, hi.max(lo))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub f: Vec<f64>,
    pub lambda: f64,
    pub binding_lower: Vec<usize>,
    pub binding_upper: Vec<usize>,
}

impl QpSolution {
    /// Coordinates strictly inside their bounds.
    pub fn free_set(&self) -> Vec<usize> {
        (0..self.f.len())
            .filter(|i| !self.binding_lower.contains(i) && !self.binding_upper.contains(i))
            .collect()
    }
}

/// Solves the projection by bisection on λ in `f = clip(f̂ + λ𝟙, lower, upper)`.
///
/// After bisection, λ is polished by solving the equality exactly on the
/// identified free set, which leaves the sum residual at rounding level.
pub fn solve_cbf_qp(problem: &QpProblem) -> Result<QpSolution> {
    problem.check_feasible()?;
    let (mut lo, mut hi) = problem.bracket();
    let mut lambda = 0.5 * (lo + hi);
    for _ in 0..MAX_BISECTION_ITERS {
        lambda = 0.5 * (lo + hi);
        let r = problem.residual(lambda);
        if r.abs() < SUM_RESIDUAL_TOL {
            break;
        }
        if r < 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
        if hi - lo <= f64::EPSILON * lambda.abs().max(1.0) {
            lambda = 0.5 * (lo + hi);
            break;
        }
    }
    let n = problem.dim();
    let free: Vec<usize> = (0..n)
        .filter(|&i| {
            let z = problem.f_hat[i] + lambda;
            z > problem.lower[i] && z < problem.upper[i]
        })
        .collect();
    if !free.is_empty() {
        let pinned: f64 = (0..n)
            .filter(|i| !free.contains(i))
            .map(|i| problem.clip(i, lambda))
            .sum();
        let free_sum: f64 = free.iter().map(|&i| problem.f_hat[i]).sum();
        let polished = (problem.b - pinned - free_sum) / free.len() as f64;
        if problem.residual(polished).abs() <= problem.residual(lambda).abs() {
            lambda = polished;
        }
    }
    let residual = problem.residual(lambda);
    if !(residual.abs() <= KKT_TOL * (1.0 + problem.b.abs())) {
        return Err(Error::NumericalFailure(format!(
            "multiplier search ended with sum residual {residual:e}"
        )));
    }
    let f: Vec<f64> = (0..n).map(|i| problem.clip(i, lambda)).collect();
    let binding_lower = (0..n)
        .filter(|&i| problem.f_hat[i] + lambda <= problem.lower[i])
        .collect();
    let binding_upper = (0..n)
        .filter(|&i| problem.f_hat[i] + lambda >= problem.upper[i])
        .collect();
    Ok(QpSolution {
        f,
        lambda,
        binding_lower,
        binding_upper,
    })
}

/// Derivatives of the solution map. Entry `(i, j)` of each matrix is
/// `∂f_i/∂(input)_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpJacobians {
    pub d_f_d_fhat: DMatrix<f64>,
    pub d_f_d_lower: DMatrix<f64>,
    pub d_f_d_upper: DMatrix<f64>,
}

fn check_nondegenerate(problem: &QpProblem, solution: &QpSolution) -> Result<()> {
    for i in 0..problem.dim() {
        let z = problem.f_hat[i] + solution.lambda;
        let near_lower = (z - problem.lower[i]).abs() <= DEGENERACY_TOL;
        let near_upper =
            problem.upper[i].is_finite() && (z - problem.upper[i]).abs() <= DEGENERACY_TOL;
        if near_lower || near_upper {
            return Err(Error::DegenerateJacobian {
                index: i,
                tol: DEGENERACY_TOL,
            });
        }
    }
    Ok(())
}

/// With `F` the free set and `m = |F|`: moving `f̂` shifts the free block by its
/// centered increment; moving a binding bound drags that coordinate one-for-one
/// and the free block by `−1/m` each to restore the sum.
pub fn qp_jacobians(problem: &QpProblem, solution: &QpSolution) -> Result<QpJacobians> {
    check_nondegenerate(problem, solution)?;
    let n = problem.dim();
    let free = solution.free_set();
    let m = free.len() as f64;
    let mut d_fhat = DMatrix::zeros(n, n);
    for &i in &free {
        for &j in &free {
            d_fhat[(i, j)] = if i == j { 1.0 - 1.0 / m } else { -1.0 / m };
        }
    }
    let bound_jacobian = |binding: &[usize]| {
        let mut d = DMatrix::zeros(n, n);
        for &j in binding {
            d[(j, j)] = 1.0;
            for &i in &free {
                d[(i, j)] = -1.0 / m;
            }
        }
        d
    };
    Ok(QpJacobians {
        d_f_d_fhat: d_fhat,
        d_f_d_lower: bound_jacobian(&solution.binding_lower),
        d_f_d_upper: bound_jacobian(&solution.binding_upper),
    })
}

/// `vᵀ ∂f/∂f̂` without forming the matrix: the free block of `v`, centered.
pub fn vjp_fhat(problem: &QpProblem, solution: &QpSolution, v: &[f64]) -> Result<Vec<f64>> {
    check_nondegenerate(problem, solution)?;
    let free = solution.free_set();
    let mut out = vec![0.0; problem.dim()];
    if free.is_empty() {
        return Ok(out);
    }
    let mean = free.iter().map(|&i| v[i]).sum::<f64>() / free.len() as f64;
    for &i in &free {
        out[i] = v[i] - mean;
    }
    Ok(out)
}

/// `vᵀ ∂f/∂lower`.
pub fn vjp_lower(problem: &QpProblem, solution: &QpSolution, v: &[f64]) -> Result<Vec<f64>> {
    check_nondegenerate(problem, solution)?;
    let free = solution.free_set();
    let mean = if free.is_empty() {
        0.0
    } else {
        free.iter().map(|&i| v[i]).sum::<f64>() / free.len() as f64
    };
    let mut out = vec![0.0; problem.dim()];
    for &j in &solution.binding_lower {
        out[j] = v[j] - mean;
    }
    Ok(out)
}
