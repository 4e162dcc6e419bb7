//! Feedforward dynamics networks built from dense, orthogonal (Cayley) and
//! ReLU layers, with per-layer vector-Jacobian products.
//!
//! A network is stored in parameter form ([`Layer`]) and evaluated in
//! materialized form ([`Materialized`]), where every orthogonal layer has been
//! turned into a concrete weight matrix. Parameters flatten into a single
//! vector in layer order: weights (or the Cayley parameter) row-major, then the
//! bias.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::simplex::spectral_norm;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense {
        w: DMatrix<f64>,
        b: DVector<f64>,
    },
    /// Weight is the leading `rows × cols` block of the Cayley transform of the
    /// square parameter `a`.
    OrthogonalDense {
        a: DMatrix<f64>,
        rows: usize,
        cols: usize,
        b: DVector<f64>,
    },
    Relu,
}

/// `W = (I − S)(I + S)⁻¹` with `S = (A − Aᵀ)/2`.
pub fn cayley_orthogonalize(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(cayley_with_inverse(a)?.0)
}

/// Returns `(W, (I + S)⁻¹)`.
fn cayley_with_inverse(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !a.is_square() {
        return Err(Error::invalid(format!(
            "Cayley parameter must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let k = a.nrows();
    let s = (a - a.transpose()) * 0.5;
    let id = DMatrix::<f64>::identity(k, k);
    // I + S is invertible for skew-symmetric S (eigenvalues 1 + iω).
    let inv = (&id + &s)
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::NumericalFailure("I + S is singular".into()))?;
    Ok(((&id - &s) * &inv, inv))
}

impl Layer {
    pub fn dense(w: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if w.nrows() != b.len() {
            return Err(Error::invalid(
                "dense bias length must equal the number of rows",
            ));
        }
        Ok(Layer::Dense { w, b })
    }

    pub fn orthogonal(a: DMatrix<f64>, rows: usize, cols: usize, b: DVector<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() < rows.max(cols) {
            return Err(Error::invalid(
                "orthogonal parameter must be square and cover the weight shape",
            ));
        }
        if b.len() != rows {
            return Err(Error::invalid(
                "orthogonal bias length must equal the number of rows",
            ));
        }
        Ok(Layer::OrthogonalDense { a, rows, cols, b })
    }

    /// Glorot-uniform dense layer with zero bias.
    pub fn random_dense(rng: &mut impl Rng, rows: usize, cols: usize) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let w = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit));
        Layer::Dense {
            w,
            b: DVector::zeros(rows),
        }
    }

    pub fn random_orthogonal(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Self {
        let k = rows.max(cols);
        let a = DMatrix::from_fn(k, k, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        });
        Layer::OrthogonalDense {
            a,
            rows,
            cols,
            b: DVector::zeros(rows),
        }
    }

    pub fn is_affine(&self) -> bool {
        !matches!(self, Layer::Relu)
    }

    /// `(rows, cols)` of the weight, or `None` for activations.
    pub fn shape(&self) -> Option<(usize, usize)> {
        match self {
            Layer::Dense { w, .. } => Some((w.nrows(), w.ncols())),
            Layer::OrthogonalDense { rows, cols, .. } => Some((*rows, *cols)),
            Layer::Relu => None,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Layer::Dense { w, b } => w.len() + b.len(),
            Layer::OrthogonalDense { a, b, .. } => a.len() + b.len(),
            Layer::Relu => 0,
        }
    }

    fn push_params(&self, out: &mut Vec<f64>) {
        let (m, b) = match self {
            Layer::Dense { w, b } => (w, b),
            Layer::OrthogonalDense { a, b, .. } => (a, b),
            Layer::Relu => return,
        };
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.push(m[(i, j)]);
            }
        }
        out.extend(b.iter());
    }

    fn read_params(&mut self, src: &[f64]) -> usize {
        let (m, b) = match self {
            Layer::Dense { w, b } => (w, b),
            Layer::OrthogonalDense { a, b, .. } => (a, b),
            Layer::Relu => return 0,
        };
        let (r, c) = (m.nrows(), m.ncols());
        for i in 0..r {
            for j in 0..c {
                m[(i, j)] = src[i * c + j];
            }
        }
        for (k, bk) in b.iter_mut().enumerate() {
            *bk = src[r * c + k];
        }
        r * c + b.len()
    }

    /// Spectral-norm bound used for Lipschitz products.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Layer::Dense { w, .. } => spectral_norm(w),
            Layer::OrthogonalDense { .. } | Layer::Relu => 1.0,
        }
    }

    fn materialize(&self) -> Result<(Op, Option<CayleyCache>)> {
        Ok(match self {
            Layer::Dense { w, b } => (
                Op::Affine {
                    w: w.clone(),
                    b: b.clone(),
                },
                None,
            ),
            Layer::OrthogonalDense { a, rows, cols, b } => {
                let (full, inv) = cayley_with_inverse(a)?;
                let w = full.view((0, 0), (*rows, *cols)).into_owned();
                (
                    Op::Affine { w, b: b.clone() },
                    Some(CayleyCache { full, inv }),
                )
            }
            Layer::Relu => (Op::Relu, None),
        })
    }
}

struct CayleyCache {
    full: DMatrix<f64>,
    inv: DMatrix<f64>,
}

/// A materialized node.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Affine { w: DMatrix<f64>, b: DVector<f64> },
    Relu,
}

impl Op {
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Op::Affine { w, b } => w * x + b,
            Op::Relu => x.map(|v| v.max(0.0)),
        }
    }
}

/// A chain of layers in parameter form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.layers.iter().for_each(|l| l.push_params(&mut out));
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                src.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            off += l.read_params(&src[off..]);
        }
        Ok(())
    }

    /// Checks that consecutive affine shapes compose, starting from `in_dim`,
    /// and returns the output dimension.
    pub fn check_shapes(&self, in_dim: usize) -> Result<usize> {
        let mut d = in_dim;
        for (k, l) in self.layers.iter().enumerate() {
            if let Some((r, c)) = l.shape() {
                if c != d {
                    return Err(Error::invalid(format!(
                        "layer {k} expects input dimension {c}, got {d}"
                    )));
                }
                d = r;
            }
        }
        Ok(d)
    }

    pub fn lipschitz(&self) -> f64 {
        self.layers.iter().map(Layer::lipschitz).product()
    }

    pub fn materialize(&self) -> Result<Materialized> {
        let mut ops = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (op, c) = l.materialize()?;
            ops.push(op);
            caches.push(c);
        }
        Ok(Materialized { ops, caches })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.materialize()?.forward(x)
    }
}

/// Concrete weights plus what the backward pass needs to map weight gradients
/// back to Cayley parameters.
pub struct Materialized {
    pub ops: Vec<Op>,
    caches: Vec<Option<CayleyCache>>,
}

impl Materialized {
    pub fn in_dim(&self) -> Option<usize> {
        self.ops.iter().find_map(|op| match op {
            Op::Affine { w, .. } => Some(w.ncols()),
            Op::Relu => None,
        })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if let Some(d) = self.in_dim() {
            if d != x.len() {
                return Err(Error::invalid(format!(
                    "input has dimension {}, expected {d}",
                    x.len()
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = DVector::from_column_slice(x);
        for op in &self.ops {
            h = op.apply(&h);
        }
        Ok(h.as_slice().to_vec())
    }

    /// Inputs to every op plus the final output.
    pub fn forward_cached(&self, x: &[f64]) -> Result<Vec<DVector<f64>>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.ops.len() + 1);
        acts.push(DVector::from_column_slice(x));
        for op in &self.ops {
            let next = op.apply(acts.last().unwrap());
            acts.push(next);
        }
        Ok(acts)
    }

    /// Length of the weight-space gradient: every affine op's materialized
    /// `W` (row-major) followed by its bias.
    pub fn num_weight_grads(&self) -> usize {
        self.ops
            .iter()
            .map(|op| match op {
                Op::Affine { w, b } => w.len() + b.len(),
                Op::Relu => 0,
            })
            .sum()
    }

    /// Reverse pass. Accumulates gradients with respect to the materialized
    /// weights into `wgrads` (see [`Materialized::num_weight_grads`]) and
    /// returns the cotangent of the input. [`Materialized::pullback`] maps the
    /// accumulated result to parameter space.
    pub fn backward(&self, acts: &[DVector<f64>], cotangent: &[f64], wgrads: &mut [f64]) -> DVector<f64> {
        debug_assert_eq!(wgrads.len(), self.num_weight_grads());
        let mut end = wgrads.len();
        let mut delta = DVector::from_column_slice(cotangent);
        for k in (0..self.ops.len()).rev() {
            let input = &acts[k];
            match &self.ops[k] {
                Op::Relu => {
                    for (d, &z) in delta.iter_mut().zip(input.iter()) {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                Op::Affine { w, b } => {
                    let base = end - w.len() - b.len();
                    let c = w.ncols();
                    for i in 0..w.nrows() {
                        let di = delta[i];
                        if di != 0.0 {
                            let row = &mut wgrads[base + i * c..base + (i + 1) * c];
                            for (g, &xj) in row.iter_mut().zip(input.iter()) {
                                *g += di * xj;
                            }
                        }
                        wgrads[base + w.len() + i] += di;
                    }
                    end = base;
                    delta = w.tr_mul(&delta);
                }
            }
        }
        delta
    }

    /// Maps a weight-space gradient to the flat parameter layout of the
    /// originating [`Sequential`].
    pub fn pullback(&self, wgrads: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        let mut off = 0;
        for (op, cache) in self.ops.iter().zip(&self.caches) {
            let Op::Affine { w, b } = op else { continue };
            let (r, c) = (w.nrows(), w.ncols());
            let gw = &wgrads[off..off + r * c];
            let gb = &wgrads[off + r * c..off + r * c + b.len()];
            match cache {
                None => out.extend_from_slice(gw),
                Some(cache) => {
                    let k = cache.full.nrows();
                    let mut g_full = DMatrix::zeros(k, k);
                    for i in 0..r {
                        for j in 0..c {
                            g_full[(i, j)] = gw[i * c + j];
                        }
                    }
                    let g_a = cayley_vjp(cache, &g_full);
                    for i in 0..k {
                        for j in 0..k {
                            out.push(g_a[(i, j)]);
                        }
                    }
                }
            }
            out.extend_from_slice(gb);
            off += r * c + b.len();
        }
        out
    }
}

/// Pulls `∂L/∂W` back to `∂L/∂A` through `W = (I − S)(I + S)⁻¹`, `S = (A − Aᵀ)/2`.
fn cayley_vjp(cache: &CayleyCache, g_w: &DMatrix<f64>) -> DMatrix<f64> {
    let k = cache.full.nrows();
    let id = DMatrix::<f64>::identity(k, k);
    let g_s = -((&id + &cache.full).transpose() * g_w * cache.inv.transpose());
    (&g_s - g_s.transpose()) * 0.5
}

/// Which input a Lipschitz bound is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LipschitzWrt {
    InputX,
    StateEta,
}

/// `f̂(η, x) = trunk(eta_in·η + g(x))`, e.g. `W₃σ(W₂σ(W₁η + g(x)) + b₂) + b₃`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsNet {
    pub x_branch: Sequential,
    pub eta_in: Layer,
    pub trunk: Sequential,
}

/// Gradients from [`DynamicsNet::backward`]. `params` follows
/// [`DynamicsNet::params`] order: x-branch, state input layer, trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsGrads {
    pub params: Vec<f64>,
    pub d_eta: Vec<f64>,
    pub d_x: Vec<f64>,
}

impl DynamicsNet {
    pub fn new(x_branch: Sequential, eta_in: Layer, trunk: Sequential) -> Result<Self> {
        if !eta_in.is_affine() {
            return Err(Error::invalid("the state input layer must be affine"));
        }
        let net = Self {
            x_branch,
            eta_in,
            trunk,
        };
        net.check_shapes()?;
        Ok(net)
    }

    /// The default classifier architecture: orthogonal layers throughout, so
    /// both Lipschitz bounds are one.
    pub fn orthogonal(rng: &mut impl Rng, n: usize, x_dim: usize, width: usize) -> Result<Self> {
        let scale = 0.5 / (width as f64).sqrt();
        let x_branch = Sequential::new(vec![
            Layer::random_orthogonal(rng, width, x_dim, scale),
            Layer::Relu,
            Layer::random_orthogonal(rng, width, width, scale),
        ]);
        let eta_in = Layer::random_orthogonal(rng, width, n, scale);
        let trunk = Sequential::new(vec![
            Layer::Relu,
            Layer::random_orthogonal(rng, width, width, scale),
            Layer::Relu,
            Layer::random_orthogonal(rng, n, width, scale),
        ]);
        Self::new(x_branch, eta_in, trunk)
    }

    pub fn state_dim(&self) -> usize {
        self.eta_in.shape().map(|s| s.1).unwrap_or(0)
    }

    pub fn input_dim(&self) -> usize {
        match self.x_branch.layers.iter().find_map(Layer::shape) {
            Some((_, c)) => c,
            None => self.eta_in.shape().map(|s| s.0).unwrap_or(0),
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (width, _) = self.eta_in.shape().expect("affine");
        let g_out = self.x_branch.check_shapes(self.input_dim())?;
        if g_out != width {
            return Err(Error::invalid(format!(
                "x branch outputs {g_out} features but the state layer outputs {width}"
            )));
        }
        let out = self.trunk.check_shapes(width)?;
        if out != self.state_dim() {
            return Err(Error::invalid(format!(
                "network output dimension {out} differs from state dimension {}",
                self.state_dim()
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.x_branch.num_params() + self.eta_in.num_params() + self.trunk.num_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = self.x_branch.params();
        self.eta_in.push_params(&mut out);
        out.extend(self.trunk.params());
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                src.len()
            )));
        }
        let nx = self.x_branch.num_params();
        let ne = self.eta_in.num_params();
        self.x_branch.set_params(&src[..nx])?;
        self.eta_in.read_params(&src[nx..nx + ne]);
        self.trunk.set_params(&src[nx + ne..])
    }

    pub fn materialize(&self) -> Result<MaterializedDynamics> {
        let (eta_in, eta_cache) = self.eta_in.materialize()?;
        Ok(MaterializedDynamics {
            x_branch: self.x_branch.materialize()?,
            eta_in: Materialized {
                ops: vec![eta_in],
                caches: vec![eta_cache],
            },
            trunk: self.trunk.materialize()?,
            n_x: self.x_branch.num_params(),
            n_eta: self.eta_in.num_params(),
            n_trunk: self.trunk.num_params(),
            state_dim: self.state_dim(),
            input_dim: self.input_dim(),
        })
    }

    pub fn forward(&self, eta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.materialize()?.forward(eta, x)
    }

    pub fn backward(&self, eta: &[f64], x: &[f64], cotangent: &[f64]) -> Result<DynamicsGrads> {
        self.materialize()?.backward(eta, x, cotangent)
    }

    /// Product of layer norms along the path from the requested input.
    pub fn lipschitz_bound(&self, wrt: LipschitzWrt) -> f64 {
        let head = match wrt {
            LipschitzWrt::InputX => self.x_branch.lipschitz(),
            LipschitzWrt::StateEta => self.eta_in.lipschitz(),
        };
        head * self.trunk.lipschitz()
    }
}

/// A dynamics network with all weights materialized.
pub struct MaterializedDynamics {
    pub x_branch: Materialized,
    pub eta_in: Materialized,
    pub trunk: Materialized,
    n_x: usize,
    n_eta: usize,
    n_trunk: usize,
    state_dim: usize,
    input_dim: usize,
}

impl MaterializedDynamics {
    fn check(&self, eta: &[f64], x: &[f64]) -> Result<()> {
        if eta.len() != self.state_dim || x.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "expected state/input dimensions ({}, {}), got ({}, {})",
                self.state_dim,
                self.input_dim,
                eta.len(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn num_params(&self) -> usize {
        self.n_x + self.n_eta + self.n_trunk
    }

    /// Features fed into the trunk from the input branch alone, `g(x)`.
    pub fn x_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.x_branch.forward(x)
    }

    pub fn forward(&self, eta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check(eta, x)?;
        let g = DVector::from_vec(self.x_branch.forward(x)?);
        let z = DVector::from_vec(self.eta_in.forward(eta)?) + g;
        self.trunk.forward(z.as_slice())
    }

    /// Length of the weight-space gradient used by
    /// [`MaterializedDynamics::backward_weights`].
    pub fn num_weight_grads(&self) -> usize {
        self.x_branch.num_weight_grads() + self.eta_in.num_weight_grads() + self.trunk.num_weight_grads()
    }

    /// Accumulates `vᵀ∂f̂/∂W` into `wgrads` and returns `(vᵀ∂f̂/∂η, vᵀ∂f̂/∂x)`.
    pub fn backward_weights(
        &self,
        eta: &[f64],
        x: &[f64],
        cotangent: &[f64],
        wgrads: &mut [f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(eta, x)?;
        if cotangent.len() != self.state_dim {
            return Err(Error::invalid("cotangent dimension differs from output dimension"));
        }
        if wgrads.len() != self.num_weight_grads() {
            return Err(Error::invalid("weight gradient buffer has the wrong length"));
        }
        let x_acts = self.x_branch.forward_cached(x)?;
        let e_acts = self.eta_in.forward_cached(eta)?;
        let z = x_acts.last().unwrap() + e_acts.last().unwrap();
        let t_acts = self.trunk.forward_cached(z.as_slice())?;
        let nx = self.x_branch.num_weight_grads();
        let (gx, rest) = wgrads.split_at_mut(nx);
        let (ge, gt) = rest.split_at_mut(self.eta_in.num_weight_grads());
        let dz = self.trunk.backward(&t_acts, cotangent, gt);
        let d_eta = self.eta_in.backward(&e_acts, dz.as_slice(), ge);
        let d_x = self.x_branch.backward(&x_acts, dz.as_slice(), gx);
        Ok((d_eta.as_slice().to_vec(), d_x.as_slice().to_vec()))
    }

    /// Maps a weight-space gradient to [`DynamicsNet::params`] order.
    pub fn pullback(&self, wgrads: &[f64]) -> Vec<f64> {
        let nx = self.x_branch.num_weight_grads();
        let ne = self.eta_in.num_weight_grads();
        let mut out = self.x_branch.pullback(&wgrads[..nx]);
        out.extend(self.eta_in.pullback(&wgrads[nx..nx + ne]));
        out.extend(self.trunk.pullback(&wgrads[nx + ne..]));
        debug_assert_eq!(out.len(), self.num_params());
        out
    }

    pub fn backward(&self, eta: &[f64], x: &[f64], cotangent: &[f64]) -> Result<DynamicsGrads> {
        let mut w = vec![0.0; self.num_weight_grads()];
        let (d_eta, d_x) = self.backward_weights(eta, x, cotangent, &mut w)?;
        Ok(DynamicsGrads {
            params: self.pullback(&w),
            d_eta,
            d_x,
        })
    }
}

/// Three-layer ReLU MLP mapping the plant state to a scalar torque.
pub fn controller_mlp(rng: &mut impl Rng, state_dim: usize, hidden: usize) -> Sequential {
    Sequential::new(vec![
        Layer::random_dense(rng, hidden, state_dim),
        Layer::Relu,
        Layer::random_dense(rng, hidden, hidden),
        Layer::Relu,
        Layer::random_dense(rng, 1, hidden),
    ])
}
