//! Planar segway plant, closed-loop composition and LQR reference gain.
//!
//! State order is `[φ, v, φ̇]` (angle, velocity, angular velocity); the input
//! is a scalar torque `u`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::Materialized;
use crate::verify::ExprGraph;

/// Control-affine plant `ẋ = f(x, u)` with scalar input.
pub trait Plant: Sync {
    fn state_dim(&self) -> usize;
    fn derivative(&self, x: &[f64], u: f64) -> Vec<f64>;
    /// `∂f/∂u` at `x`.
    fn input_gain(&self, x: &[f64]) -> Vec<f64>;
    /// The same dynamics as a graph with inputs `(x, u)` and outputs `ẋ`.
    fn graph(&self) -> ExprGraph;
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Segway;

pub fn segway_derivative(s: &[f64; 3], u: f64) -> [f64; 3] {
    let [phi, v, phi_dot] = *s;
    let (sn, cs) = phi.sin_cos();
    let w2 = phi_dot * phi_dot;
    let v_dot = (cs * (-1.8 * u + 11.5 * v + 9.8 * sn) - 10.9 * u + 68.4 * v - 1.2 * w2 * sn) / (cs - 24.7);
    let phi_ddot =
        ((9.3 * u - 58.8 * v) * cs + 38.6 * u - 243.5 * v - sn * (208.3 + w2 * cs)) / (cs * cs - 24.7);
    [phi_dot, v_dot, phi_ddot]
}

impl Plant for Segway {
    fn state_dim(&self) -> usize {
        3
    }

    fn derivative(&self, x: &[f64], u: f64) -> Vec<f64> {
        segway_derivative(&[x[0], x[1], x[2]], u).to_vec()
    }

    fn input_gain(&self, x: &[f64]) -> Vec<f64> {
        let cs = x[0].cos();
        vec![0.0, (-1.8 * cs - 10.9) / (cs - 24.7), (9.3 * cs + 38.6) / (cs * cs - 24.7)]
    }

    fn graph(&self) -> ExprGraph {
        segway_graph()
    }
}

/// Expression graph of [`segway_derivative`] with inputs `[φ, v, φ̇, u]`.
pub fn segway_graph() -> ExprGraph {
    let mut g = ExprGraph::new(4);
    let phi = g.input(0);
    let v = g.input(1);
    let w = g.input(2);
    let u = g.input(3);
    let sn = g.sin(phi);
    let cs = g.cos(phi);
    let w2 = g.square(w);

    // v̇ numerator: cos φ(−1.8u + 11.5v + 9.8 sin φ) − 10.9u + 68.4v − 1.2φ̇² sin φ
    let a = g.scale(-1.8, u);
    let b = g.scale(11.5, v);
    let c = g.scale(9.8, sn);
    let ab = g.add(a, b);
    let inner = g.add(ab, c);
    let t1 = g.mul(cs, inner);
    let t2 = g.scale(-10.9, u);
    let t3 = g.scale(68.4, v);
    let w2s = g.mul(w2, sn);
    let t4 = g.scale(-1.2, w2s);
    let n12 = g.add(t1, t2);
    let n123 = g.add(n12, t3);
    let num_v = g.add(n123, t4);
    let k247 = g.constant(24.7);
    let den_v = g.sub(cs, k247);
    let v_dot = g.div(num_v, den_v);

    // φ̈ numerator: (9.3u − 58.8v) cos φ + 38.6u − 243.5v − sin φ(208.3 + φ̇² cos φ)
    let p1 = g.scale(9.3, u);
    let p2 = g.scale(-58.8, v);
    let p12 = g.add(p1, p2);
    let s1 = g.mul(p12, cs);
    let s2 = g.scale(38.6, u);
    let s3 = g.scale(-243.5, v);
    let w2c = g.mul(w2, cs);
    let k2083 = g.constant(208.3);
    let paren = g.add(k2083, w2c);
    let s4 = g.mul(sn, paren);
    let m12 = g.add(s1, s2);
    let m123 = g.add(m12, s3);
    let num_p = g.sub(m123, s4);
    let c2 = g.square(cs);
    let den_p = g.sub(c2, k247);
    let phi_ddot = g.div(num_p, den_p);

    g.set_outputs(vec![w, v_dot, phi_ddot]);
    g
}

/// `ẋ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearPlant {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.len() {
            return Err(Error::invalid("A must be square and match B"));
        }
        Ok(Self { a, b })
    }
}

impl Plant for LinearPlant {
    fn state_dim(&self) -> usize {
        self.b.len()
    }

    fn derivative(&self, x: &[f64], u: f64) -> Vec<f64> {
        (&self.a * DVector::from_column_slice(x) + &self.b * u).as_slice().to_vec()
    }

    fn input_gain(&self, _x: &[f64]) -> Vec<f64> {
        self.b.as_slice().to_vec()
    }

    fn graph(&self) -> ExprGraph {
        let n = self.state_dim();
        let mut g = ExprGraph::new(n + 1);
        let xs: Vec<_> = (0..=n).map(|i| g.input(i)).collect();
        let outs = (0..n)
            .map(|i| {
                let mut acc = g.constant(0.0);
                for j in 0..n {
                    if self.a[(i, j)] != 0.0 {
                        let t = g.scale(self.a[(i, j)], xs[j]);
                        acc = g.add(acc, t);
                    }
                }
                if self.b[i] != 0.0 {
                    let t = g.scale(self.b[i], xs[n]);
                    acc = g.add(acc, t);
                }
                acc
            })
            .collect();
        g.set_outputs(outs);
        g
    }
}

pub fn closed_loop_derivative(plant: &impl Plant, x: &[f64], controller: &Materialized) -> Result<Vec<f64>> {
    let u = controller.forward(x)?;
    if u.len() != 1 {
        return Err(Error::invalid("controller must output a scalar"));
    }
    Ok(plant.derivative(x, u[0]))
}

/// Jacobians `(A, B)` of the segway at the upright equilibrium.
pub fn segway_linearization() -> (DMatrix<f64>, DVector<f64>) {
    let d = -23.7;
    let a = DMatrix::from_row_slice(
        3,
        3,
        &[0.0, 0.0, 1.0, 9.8 / d, 79.9 / d, 0.0, -208.3 / d, -302.3 / d, 0.0],
    );
    let b = DVector::from_vec(vec![0.0, -12.7 / d, 47.9 / d]);
    (a, b)
}

/// Discrete-time LQR gain for `x⁺ = (I + A·dt)x + B·dt·u` with `Q = I`,
/// `R = 1`, from `iters` Riccati iterations. The control law is `u = −Kx`.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DVector<f64>, dt: f64, iters: usize) -> Result<DVector<f64>> {
    let n = a.nrows();
    let ad = DMatrix::identity(n, n) + a * dt;
    let bd = b * dt;
    let q = DMatrix::<f64>::identity(n, n);
    let mut p = q.clone();
    let gain = |p: &DMatrix<f64>| -> DVector<f64> {
        let s = 1.0 + (bd.transpose() * p * &bd)[0];
        (bd.transpose() * p * &ad).transpose() / s
    };
    for _ in 0..iters {
        let k = gain(&p);
        let pb = &p * &bd;
        let s = 1.0 + (bd.transpose() * &pb)[0];
        let next = &q + ad.transpose() * &p * &ad - (ad.transpose() * &pb) * (pb.transpose() * &ad) / s;
        p = (&next + next.transpose()) * 0.5;
        if !p.iter().all(|v| v.is_finite()) || !k.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalFailure("Riccati iteration diverged".into()));
        }
    }
    Ok(gain(&p))
}

/// The reference controller used for imitation: LQR on the segway
/// linearization with `dt = 0.01` and 500 Riccati iterations.
pub fn segway_lqr_gain() -> DVector<f64> {
    let (a, b) = segway_linearization();
    lqr_gain(&a, &b, 0.01, 500).expect("segway Riccati iteration converges")
}

/// Solves `AᵀP + PA = −Q` for a Hurwitz `A` by vectorization.
pub fn lyapunov_matrix(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    // column-major vec: vec(AᵀP) = (I⊗Aᵀ)vec(P), vec(PA) = (Aᵀ⊗I)vec(P)
    let lhs = id.kronecker(&a.transpose()) + a.transpose().kronecker(&id);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NumericalFailure("Lyapunov equation is singular".into()))?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

/// Initial Lyapunov matrix for the segway: the solution of
/// `A_clᵀP + PA_cl = −I` for the LQR closed-loop linearization, scaled to unit
/// largest eigenvalue.
pub fn segway_initial_lyapunov() -> DMatrix<f64> {
    let (a, b) = segway_linearization();
    let acl = &a - &b * segway_lqr_gain().transpose();
    let p = lyapunov_matrix(&acl, &DMatrix::identity(3, 3)).expect("LQR closed loop is Hurwitz");
    let top = p.symmetric_eigenvalues().max();
    p / top
}
