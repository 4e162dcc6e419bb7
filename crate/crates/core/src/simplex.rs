//! Probability-simplex geometry and the potential functions (Lyapunov or
//! barrier candidates) defined over it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for simplex membership.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Ties within this distance of the runner-up value select the smallest index.
pub const MARGIN_TIE_TOL: f64 = 1e-9;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    /// Validates membership: coordinates nonnegative and summing to one, both
    /// within [`SIMPLEX_TOL`].
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid(
                "simplex point must have at least one coordinate",
            ));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("simplex point has non-finite coordinate"));
        }
        if let Some(c) = coords.iter().find(|&&c| c < -SIMPLEX_TOL) {
            return Err(Error::invalid(format!("negative simplex coordinate {c}")));
        }
        let sum: f64 = coords.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("simplex coordinates sum to {sum}")));
        }
        Ok(Self(coords))
    }

    /// The barycenter `(1/n, ..., 1/n)`, used as the input-independent initial state.
    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "simplex dimension must be positive");
        Self(vec![1.0 / n as f64; n])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl AsRef<[f64]> for SimplexPoint {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Euclidean projection onto the probability simplex.
///
/// Sort-based: find the largest `k` such that the `k` largest entries stay
/// positive after subtracting the common threshold, then clip.
pub fn project_to_simplex(v: &[f64]) -> Result<SimplexPoint> {
    if v.is_empty() {
        return Err(Error::invalid("cannot project an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("cannot project a non-finite vector"));
    }
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // One renormalization pass removes the last-ulp drift of the threshold.
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        out.iter_mut().for_each(|x| *x /= sum);
    }
    Ok(SimplexPoint(out))
}

/// Lyapunov / barrier candidate.
#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    /// `V(η) = 1 − η_y`.
    Mll { label: usize, n: usize },
    /// `V(η) = 1 − (η_y − max_{i≠y} η_i)`.
    Margin { label: usize, n: usize },
    /// `V(x) = xᵀ P x` for symmetric positive definite `P`.
    Quadratic { p: DMatrix<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PotentialKind {
    Mll,
    Margin,
    Quadratic,
}

impl Potential {
    pub fn mll(label: usize, n: usize) -> Result<Self> {
        check_label(label, n)?;
        Ok(Potential::Mll { label, n })
    }

    pub fn margin(label: usize, n: usize) -> Result<Self> {
        check_label(label, n)?;
        Ok(Potential::Margin { label, n })
    }

    pub fn quadratic(p: DMatrix<f64>) -> Result<Self> {
        if !p.is_square() || p.nrows() == 0 {
            return Err(Error::invalid("quadratic potential needs a square matrix"));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("quadratic potential has non-finite entries"));
        }
        let asym = (&p - p.transpose()).amax();
        if asym > 1e-9 * (1.0 + p.amax()) {
            return Err(Error::invalid(format!(
                "P is not symmetric (max asymmetry {asym:e})"
            )));
        }
        if p.clone().cholesky().is_none() {
            return Err(Error::invalid("P is not positive definite"));
        }
        Ok(Potential::Quadratic { p })
    }

    /// Builds a potential of the given kind for a label (classifier kinds only).
    pub fn for_label(kind: PotentialKind, label: usize, n: usize) -> Result<Self> {
        match kind {
            PotentialKind::Mll => Self::mll(label, n),
            PotentialKind::Margin => Self::margin(label, n),
            PotentialKind::Quadratic => {
                Err(Error::invalid("quadratic potentials are not label-indexed"))
            }
        }
    }

    pub fn kind(&self) -> PotentialKind {
        match self {
            Potential::Mll { .. } => PotentialKind::Mll,
            Potential::Margin { .. } => PotentialKind::Margin,
            Potential::Quadratic { .. } => PotentialKind::Quadratic,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Potential::Mll { n, .. } | Potential::Margin { n, .. } => *n,
            Potential::Quadratic { p } => p.nrows(),
        }
    }

    pub fn label(&self) -> Option<usize> {
        match self {
            Potential::Mll { label, .. } | Potential::Margin { label, .. } => Some(*label),
            Potential::Quadratic { .. } => None,
        }
    }

    fn check_dim(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(Error::invalid(format!(
                "state has dimension {}, potential expects {}",
                p.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn value(&self, p: &[f64]) -> Result<f64> {
        self.check_dim(p)?;
        Ok(match self {
            Potential::Mll { label, .. } => 1.0 - p[*label],
            Potential::Margin { label, .. } => {
                let (_, runner_up) = runner_up(p, *label);
                1.0 - (p[*label] - runner_up)
            }
            Potential::Quadratic { p: m } => {
                let x = DVector::from_column_slice(p);
                (x.transpose() * m * &x)[(0, 0)]
            }
        })
    }

    /// Value and a (sub)gradient. For the margin potential the runner-up index
    /// is the smallest one within [`MARGIN_TIE_TOL`] of the maximum.
    pub fn eval_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_dim(p)?;
        let n = p.len();
        Ok(match self {
            Potential::Mll { label, .. } => {
                let mut g = vec![0.0; n];
                g[*label] = -1.0;
                (1.0 - p[*label], g)
            }
            Potential::Margin { label, .. } => {
                let (i, m) = runner_up(p, *label);
                let mut g = vec![0.0; n];
                g[*label] = -1.0;
                g[i] = 1.0;
                (1.0 - (p[*label] - m), g)
            }
            Potential::Quadratic { p: m } => {
                let x = DVector::from_column_slice(p);
                let px = m * &x;
                let v = x.dot(&px);
                (v, (px * 2.0).as_slice().to_vec())
            }
        })
    }

    /// Upper bound on the ℓ2 Lipschitz constant. `region_radius` bounds ‖x‖₂ over
    /// the region of interest and is only used by the quadratic kind.
    pub fn lipschitz(&self, region_radius: f64) -> f64 {
        match self {
            Potential::Mll { .. } => 1.0,
            Potential::Margin { .. } => std::f64::consts::SQRT_2,
            Potential::Quadratic { p } => 2.0 * spectral_norm(p) * region_radius,
        }
    }
}

fn check_label(label: usize, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(
            "classifier potentials need at least two classes",
        ));
    }
    if label >= n {
        return Err(Error::invalid(format!(
            "label {label} out of range for {n} classes"
        )));
    }
    Ok(())
}

/// Index and value of `max_{i≠label} p_i`, lowest index among near-ties.
pub fn runner_up(p: &[f64], label: usize) -> (usize, f64) {
    let max = p
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let idx = p
        .iter()
        .enumerate()
        .position(|(i, &v)| i != label && v >= max - MARGIN_TIE_TOL)
        .expect("at least two coordinates");
    (idx, max)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// The band `{η : lo ≤ V(η) ≤ hi}` traversed on the way to certification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelBand {
    pub lo: f64,
    pub hi: f64,
}

impl LevelBand {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::invalid(format!("invalid level band [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// Default band for a classifier potential on `n` classes: the band whose
    /// lower level implies correct classification and whose upper level
    /// contains the barycenter.
    pub fn classifier_default(kind: PotentialKind, n: usize) -> Result<Self> {
        match kind {
            PotentialKind::Mll => Self::new(0.5, 1.0 - 1.0 / n as f64),
            PotentialKind::Margin => Self::new(1.0, 1.0),
            PotentialKind::Quadratic => {
                Err(Error::invalid("no default band for quadratic potentials"))
            }
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}
