//! Sound bound propagation and certification.
//!
//! Interval arithmetic rounds outward by one ulp per operation (two for the
//! transcendental functions), affine maps carry an explicit floating-point
//! error pad, and every certified inequality must hold with a strict margin
//! [`DEFAULT_DELTA`].

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::network::{LipschitzWrt, Materialized, MaterializedDynamics, Op};
use crate::qp::{solve_cbf_qp, ClassK, QpProblem};
use crate::sampling::{box_grid, ellipsoid_half_widths, rejection_filter, DEFAULT_BUDGET};
use crate::simplex::{LevelBand, Potential, PotentialKind, SimplexPoint};

pub const DEFAULT_DELTA: f64 = 1e-6;
/// Padding added to each side of QP interval bounds.
pub const QP_BOUND_PAD: f64 = 1e-9;
const MAX_REPORTED_VIOLATIONS: usize = 100;

fn down(x: f64) -> f64 {
    x.next_down()
}

fn up(x: f64) -> f64 {
    x.next_up()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::invalid(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn add(self, o: Self) -> Self {
        Self {
            lo: down(self.lo + o.lo),
            hi: up(self.hi + o.hi),
        }
    }

    pub fn sub(self, o: Self) -> Self {
        Self {
            lo: down(self.lo - o.hi),
            hi: up(self.hi - o.lo),
        }
    }

    pub fn neg(self) -> Self {
        Self {
            lo: -self.hi,
            hi: -self.lo,
        }
    }

    pub fn mul(self, o: Self) -> Self {
        let c = [self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi];
        // 0·∞ only arises from unbounded inputs; treat it as 0
        let c = c.map(|v| if v.is_nan() { 0.0 } else { v });
        Self {
            lo: down(c.iter().copied().fold(f64::INFINITY, f64::min)),
            hi: up(c.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        }
    }

    pub fn square(self) -> Self {
        let (a, b) = (self.lo.abs(), self.hi.abs());
        let hi = up(a.max(b) * a.max(b));
        let lo = if self.lo <= 0.0 && self.hi >= 0.0 {
            0.0
        } else {
            down(a.min(b) * a.min(b)).max(0.0)
        };
        Self { lo, hi }
    }

    pub fn div(self, o: Self) -> Result<Self> {
        if o.lo <= 0.0 && o.hi >= 0.0 {
            return Err(Error::DivisionBySpanningZero { lo: o.lo, hi: o.hi });
        }
        let recip = Self {
            lo: down(1.0 / o.hi),
            hi: up(1.0 / o.lo),
        };
        Ok(self.mul(recip))
    }

    pub fn relu(self) -> Self {
        Self {
            lo: self.lo.max(0.0),
            hi: self.hi.max(0.0),
        }
    }

    /// Enclosure of `sin` (`shift = 0`) or `cos` (`shift = π/2`, using
    /// `cos x = sin(x + π/2)` only to locate extrema).
    fn trig(self, f: fn(f64) -> f64, peak_offset: f64) -> Self {
        use std::f64::consts::{PI, TAU};
        if !(self.width() < TAU) {
            return Self { lo: -1.0, hi: 1.0 };
        }
        let (a, b) = (f(self.lo), f(self.hi));
        let mut lo = down(down(a.min(b)));
        let mut hi = up(up(a.max(b)));
        // a peak of f sits at peak_offset + 2kπ and a trough at peak_offset + π + 2kπ;
        // the slack keeps the test conservative against rounding of π
        let slack = 1e-12 * (1.0 + self.lo.abs().max(self.hi.abs()));
        let hits = |offset: f64| {
            let k = ((self.lo - offset - slack) / TAU).ceil();
            offset + k * TAU <= self.hi + slack
        };
        if hits(peak_offset) {
            hi = 1.0;
        }
        if hits(peak_offset + PI) {
            lo = -1.0;
        }
        Self {
            lo: lo.max(-1.0),
            hi: hi.min(1.0),
        }
    }

    pub fn sin(self) -> Self {
        self.trig(f64::sin, std::f64::consts::FRAC_PI_2)
    }

    pub fn cos(self) -> Self {
        self.trig(f64::cos, 0.0)
    }

    pub fn hull(self, o: Self) -> Self {
        Self {
            lo: self.lo.min(o.lo),
            hi: self.hi.max(o.hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl IntervalBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::invalid("box bounds have different lengths"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l.is_nan() || u.is_nan() || l > u) {
            return Err(Error::invalid("box needs lower <= upper elementwise"));
        }
        Ok(Self { lower, upper })
    }

    pub fn point(p: &[f64]) -> Self {
        Self {
            lower: p.to_vec(),
            upper: p.to_vec(),
        }
    }

    /// `center ± radius` per coordinate.
    pub fn around(center: &[f64], radius: f64) -> Self {
        Self {
            lower: center.iter().map(|c| c - radius).collect(),
            upper: center.iter().map(|c| c + radius).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn interval(&self, i: usize) -> Interval {
        Interval {
            lo: self.lower[i],
            hi: self.upper[i],
        }
    }

    pub fn intervals(&self) -> Vec<Interval> {
        (0..self.dim()).map(|i| self.interval(i)).collect()
    }

    pub fn from_intervals(iv: &[Interval]) -> Self {
        Self {
            lower: iv.iter().map(|i| i.lo).collect(),
            upper: iv.iter().map(|i| i.hi).collect(),
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim() && p.iter().enumerate().all(|(i, &v)| self.lower[i] <= v && v <= self.upper[i])
    }

    pub fn is_subset_of(&self, o: &Self) -> bool {
        self.dim() == o.dim()
            && (0..self.dim()).all(|i| self.lower[i] >= o.lower[i] && self.upper[i] <= o.upper[i])
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn radii(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (u - l)).collect()
    }

    pub fn intersect(&self, o: &Self) -> Result<Self> {
        Self::new(
            self.lower.iter().zip(&o.lower).map(|(a, b)| a.max(*b)).collect(),
            self.upper.iter().zip(&o.upper).map(|(a, b)| a.min(*b)).collect(),
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Self> {
        Self::new(
            self.lower.iter().map(|v| v.clamp(lo, hi)).collect(),
            self.upper.iter().map(|v| v.clamp(lo, hi)).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Input(usize),
    Const(f64),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Square(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Relu(NodeId),
}

/// A straight-line program over scalar inputs, evaluated either pointwise or
/// with intervals. Nodes are appended in topological order by construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExprGraph {
    nodes: Vec<Node>,
    outputs: Vec<NodeId>,
    n_inputs: usize,
}

impl ExprGraph {
    pub fn new(n_inputs: usize) -> Self {
        Self {
            nodes: Vec::new(),
            outputs: Vec::new(),
            n_inputs,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    fn push(&mut self, n: Node) -> NodeId {
        self.nodes.push(n);
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, i: usize) -> NodeId {
        assert!(i < self.n_inputs, "input index out of range");
        self.push(Node::Input(i))
    }

    pub fn constant(&mut self, c: f64) -> NodeId {
        self.push(Node::Const(c))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Node::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Node::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Node::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Node::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Node::Neg(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Node::Square(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.push(Node::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.push(Node::Cos(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Node::Relu(a))
    }

    pub fn scale(&mut self, c: f64, a: NodeId) -> NodeId {
        let k = self.constant(c);
        self.mul(k, a)
    }

    pub fn set_outputs(&mut self, outputs: Vec<NodeId>) {
        self.outputs = outputs;
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn eval(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        if inputs.len() != self.n_inputs {
            return Err(Error::invalid(format!("graph takes {} inputs, got {}", self.n_inputs, inputs.len())));
        }
        let mut v: Vec<f64> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let x = match *n {
                Node::Input(i) => inputs[i],
                Node::Const(c) => c,
                Node::Add(a, b) => v[a.0] + v[b.0],
                Node::Sub(a, b) => v[a.0] - v[b.0],
                Node::Mul(a, b) => v[a.0] * v[b.0],
                Node::Div(a, b) => v[a.0] / v[b.0],
                Node::Neg(a) => -v[a.0],
                Node::Square(a) => v[a.0] * v[a.0],
                Node::Sin(a) => f64::sin(v[a.0]),
                Node::Cos(a) => f64::cos(v[a.0]),
                Node::Relu(a) => f64::max(v[a.0], 0.0),
            };
            v.push(x);
        }
        Ok(self.outputs.iter().map(|o| v[o.0]).collect())
    }

    pub fn interval_forward(&self, input: &IntervalBox) -> Result<IntervalBox> {
        if input.dim() != self.n_inputs {
            return Err(Error::invalid(format!("graph takes {} inputs, got {}", self.n_inputs, input.dim())));
        }
        let mut v: Vec<Interval> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let x = match *n {
                Node::Input(i) => input.interval(i),
                Node::Const(c) => Interval::point(c),
                Node::Add(a, b) => v[a.0].add(v[b.0]),
                Node::Sub(a, b) => v[a.0].sub(v[b.0]),
                Node::Mul(a, b) => v[a.0].mul(v[b.0]),
                Node::Div(a, b) => v[a.0].div(v[b.0])?,
                Node::Neg(a) => v[a.0].neg(),
                Node::Square(a) => v[a.0].square(),
                Node::Sin(a) => v[a.0].sin(),
                Node::Cos(a) => v[a.0].cos(),
                Node::Relu(a) => v[a.0].relu(),
            };
            v.push(x);
        }
        Ok(IntervalBox::from_intervals(&self.outputs.iter().map(|o| v[o.0]).collect::<Vec<_>>()))
    }

    /// Forward-mode derivatives with intervals: given enclosures of every
    /// input and of its gradient with respect to `m` free variables, encloses
    /// the outputs and their gradients. ReLU kinks contribute the Clarke
    /// interval `[0, 1]`.
    pub fn interval_gradient_forward(
        &self,
        input: &IntervalBox,
        input_grads: &[Vec<Interval>],
    ) -> Result<(IntervalBox, Vec<Vec<Interval>>)> {
        if input.dim() != self.n_inputs || input_grads.len() != self.n_inputs {
            return Err(Error::invalid(format!("graph takes {} inputs, got {}", self.n_inputs, input.dim())));
        }
        let m = input_grads.first().map_or(0, Vec::len);
        if input_grads.iter().any(|g| g.len() != m) {
            return Err(Error::invalid("input gradients differ in length"));
        }
        let zero = Interval::point(0.0);
        let comb = |a: &[Interval], ka: Interval, b: &[Interval], kb: Interval| -> Vec<Interval> {
            a.iter().zip(b).map(|(x, y)| ka.mul(*x).add(kb.mul(*y))).collect()
        };
        let scaled = |a: &[Interval], k: Interval| -> Vec<Interval> { a.iter().map(|x| k.mul(*x)).collect() };
        let mut v: Vec<Interval> = Vec::with_capacity(self.nodes.len());
        let mut d: Vec<Vec<Interval>> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let (x, g) = match *n {
                Node::Input(i) => (input.interval(i), input_grads[i].clone()),
                Node::Const(c) => (Interval::point(c), vec![zero; m]),
                Node::Add(a, b) => (v[a.0].add(v[b.0]), comb(&d[a.0], Interval::point(1.0), &d[b.0], Interval::point(1.0))),
                Node::Sub(a, b) => (v[a.0].sub(v[b.0]), comb(&d[a.0], Interval::point(1.0), &d[b.0], Interval::point(-1.0))),
                Node::Mul(a, b) => (v[a.0].mul(v[b.0]), comb(&d[a.0], v[b.0], &d[b.0], v[a.0])),
                Node::Div(a, b) => {
                    let q = v[a.0].div(v[b.0])?;
                    // (a' − q·b')/b
                    let num = comb(&d[a.0], Interval::point(1.0), &d[b.0], q.neg());
                    let g = num.into_iter().map(|t| t.div(v[b.0])).collect::<Result<_>>()?;
                    (q, g)
                }
                Node::Neg(a) => (v[a.0].neg(), scaled(&d[a.0], Interval::point(-1.0))),
                Node::Square(a) => (v[a.0].square(), scaled(&d[a.0], Interval::point(2.0).mul(v[a.0]))),
                Node::Sin(a) => (v[a.0].sin(), scaled(&d[a.0], v[a.0].cos())),
                Node::Cos(a) => (v[a.0].cos(), scaled(&d[a.0], v[a.0].sin().neg())),
                Node::Relu(a) => {
                    let x = v[a.0];
                    let slope = if x.lo > 0.0 {
                        Interval::point(1.0)
                    } else if x.hi < 0.0 {
                        zero
                    } else {
                        Interval { lo: 0.0, hi: 1.0 }
                    };
                    (x.relu(), scaled(&d[a.0], slope))
                }
            };
            v.push(x);
            d.push(g);
        }
        let vals = self.outputs.iter().map(|o| v[o.0]).collect::<Vec<_>>();
        let grads = self.outputs.iter().map(|o| d[o.0].clone()).collect();
        Ok((IntervalBox::from_intervals(&vals), grads))
    }

    /// Appends `V̇ = 2xᵀP·f(x, …)` for a graph whose first `n` inputs are the
    /// state `x` and whose `n` outputs are `f`; the result has a single output.
    pub fn quadratic_lie_derivative(&self, p: &DMatrix<f64>) -> Result<ExprGraph> {
        let n = self.outputs.len();
        if p.nrows() != n || p.ncols() != n || self.n_inputs < n {
            return Err(Error::invalid("P must match the state dimension of the graph"));
        }
        let mut g = self.clone();
        let xs: Vec<NodeId> = (0..n).map(|i| g.input(i)).collect();
        let fs = self.outputs.clone();
        let mut total: Option<NodeId> = None;
        for i in 0..n {
            let mut px: Option<NodeId> = None;
            for (j, &xj) in xs.iter().enumerate() {
                if p[(i, j)] == 0.0 {
                    continue;
                }
                let t = g.scale(2.0 * p[(i, j)], xj);
                px = Some(match px {
                    Some(acc) => g.add(acc, t),
                    None => t,
                });
            }
            if let Some(px) = px {
                let term = g.mul(px, fs[i]);
                total = Some(match total {
                    Some(acc) => g.add(acc, term),
                    None => term,
                });
            }
        }
        let out = total.unwrap_or_else(|| g.constant(0.0));
        g.set_outputs(vec![out]);
        Ok(g)
    }
}

/// Error pad for an inner product `Σ w_j x_j + b` computed in floating point.
fn dot_pad(terms: usize, magnitude: f64) -> f64 {
    (terms as f64 + 2.0) * f64::EPSILON * magnitude + f64::MIN_POSITIVE
}

fn affine_interval(w: &DMatrix<f64>, b: &DVector<f64>, input: &IntervalBox) -> IntervalBox {
    let c = input.center();
    let r = input.radii();
    let mut lower = Vec::with_capacity(w.nrows());
    let mut upper = Vec::with_capacity(w.nrows());
    for i in 0..w.nrows() {
        let mut mid = b[i];
        let mut rad = 0.0;
        let mut mag = b[i].abs();
        for j in 0..w.ncols() {
            mid += w[(i, j)] * c[j];
            rad += w[(i, j)].abs() * r[j];
            mag += (w[(i, j)] * c[j]).abs() + w[(i, j)].abs() * r[j];
        }
        let pad = dot_pad(w.ncols(), mag);
        lower.push(down(mid - rad - pad));
        upper.push(up(mid + rad + pad));
    }
    IntervalBox { lower, upper }
}

fn check_net_input(ops: &[Op], input: &IntervalBox) -> Result<()> {
    if let Some(Op::Affine { w, .. }) = ops.iter().find(|o| matches!(o, Op::Affine { .. })) {
        if w.ncols() != input.dim() {
            return Err(Error::invalid(format!("network takes {} inputs, box has {}", w.ncols(), input.dim())));
        }
    }
    Ok(())
}

/// Interval bound propagation through affine and ReLU ops; returns the box
/// after every op (index `k` is the input of op `k`).
fn ibp_trace(ops: &[Op], input: &IntervalBox) -> Vec<IntervalBox> {
    let mut out = Vec::with_capacity(ops.len() + 1);
    out.push(input.clone());
    for op in ops {
        let cur = out.last().unwrap();
        let next = match op {
            Op::Affine { w, b } => affine_interval(w, b, cur),
            Op::Relu => IntervalBox {
                lower: cur.lower.iter().map(|v| v.max(0.0)).collect(),
                upper: cur.upper.iter().map(|v| v.max(0.0)).collect(),
            },
        };
        out.push(next);
    }
    out
}

pub fn interval_forward_net(ops: &[Op], input: &IntervalBox) -> Result<IntervalBox> {
    check_net_input(ops, input)?;
    Ok(ibp_trace(ops, input).pop().unwrap())
}

/// Affine envelopes `A_lower·z + b_lower ≤ f(z) ≤ A_upper·z + b_upper` valid on
/// the input box.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBounds {
    pub a_lower: DMatrix<f64>,
    pub b_lower: DVector<f64>,
    pub a_upper: DMatrix<f64>,
    pub b_upper: DVector<f64>,
}

impl LinearBounds {
    /// Concretizes over a box, padded for floating-point error.
    pub fn concretize(&self, input: &IntervalBox) -> IntervalBox {
        let c = input.center();
        let r = input.radii();
        let side = |a: &DMatrix<f64>, b: &DVector<f64>, sign: f64| -> Vec<f64> {
            (0..a.nrows())
                .map(|i| {
                    let mut v = b[i];
                    let mut mag = b[i].abs();
                    for j in 0..a.ncols() {
                        let t = a[(i, j)] * c[j] + sign * a[(i, j)].abs() * r[j];
                        v += t;
                        mag += (a[(i, j)] * c[j]).abs() + a[(i, j)].abs() * r[j];
                    }
                    let pad = dot_pad(a.ncols(), mag);
                    if sign > 0.0 {
                        up(v + pad)
                    } else {
                        down(v - pad)
                    }
                })
                .collect()
        };
        IntervalBox {
            lower: side(&self.a_lower, &self.b_lower, -1.0),
            upper: side(&self.a_upper, &self.b_upper, 1.0),
        }
    }
}

/// Backward linear relaxation of `ops[..end]` given bounds on the input of
/// every ReLU op in that prefix.
fn crown_backward(ops: &[Op], relu_in: &[Option<IntervalBox>], end: usize, out_dim: usize) -> LinearBounds {
    let mut lam_u = DMatrix::<f64>::identity(out_dim, out_dim);
    let mut lam_l = lam_u.clone();
    let mut beta_u = DVector::<f64>::zeros(out_dim);
    let mut beta_l = beta_u.clone();
    for k in (0..end).rev() {
        match &ops[k] {
            Op::Affine { w, b } => {
                beta_u += &lam_u * b;
                beta_l += &lam_l * b;
                lam_u = &lam_u * w;
                lam_l = &lam_l * w;
            }
            Op::Relu => {
                let bounds = relu_in[k].as_ref().expect("bounds computed for every ReLU");
                for j in 0..bounds.dim() {
                    let (l, u) = (bounds.lower[j], bounds.upper[j]);
                    // (upper slope, upper intercept, lower slope); the lower line passes the origin
                    let (su, iu, sl) = if l >= 0.0 {
                        (1.0, 0.0, 1.0)
                    } else if u <= 0.0 {
                        (0.0, 0.0, 0.0)
                    } else {
                        let s = u / (u - l);
                        (s, -s * l, s)
                    };
                    for i in 0..out_dim {
                        let a = lam_u[(i, j)];
                        if a >= 0.0 {
                            lam_u[(i, j)] = a * su;
                            beta_u[i] += a * iu;
                        } else {
                            lam_u[(i, j)] = a * sl;
                        }
                        let a = lam_l[(i, j)];
                        if a >= 0.0 {
                            lam_l[(i, j)] = a * sl;
                        } else {
                            lam_l[(i, j)] = a * su;
                            beta_l[i] += a * iu;
                        }
                    }
                }
            }
        }
    }
    LinearBounds {
        a_lower: lam_l,
        b_lower: beta_l,
        a_upper: lam_u,
        b_upper: beta_u,
    }
}

fn op_out_dim(ops: &[Op], end: usize, in_dim: usize) -> usize {
    ops[..end]
        .iter()
        .rev()
        .find_map(|o| match o {
            Op::Affine { w, .. } => Some(w.nrows()),
            Op::Relu => None,
        })
        .unwrap_or(in_dim)
}

/// CROWN-style bounds for a chain of affine and ReLU ops. Intermediate and
/// final intervals are intersected with interval propagation, so the returned
/// box is never wider than [`interval_forward_net`]'s.
pub fn crown_dense_bounds(ops: &[Op], input: &IntervalBox) -> Result<(LinearBounds, IntervalBox)> {
    check_net_input(ops, input)?;
    let ibp = ibp_trace(ops, input);
    let mut relu_in: Vec<Option<IntervalBox>> = vec![None; ops.len()];
    for k in 0..ops.len() {
        if matches!(ops[k], Op::Relu) {
            let b = if k == 0 {
                input.clone()
            } else {
                let lb = crown_backward(ops, &relu_in, k, op_out_dim(ops, k, input.dim()));
                lb.concretize(input).intersect(&ibp[k])?
            };
            relu_in[k] = Some(b);
        }
    }
    let lb = crown_backward(ops, &relu_in, ops.len(), op_out_dim(ops, ops.len(), input.dim()));
    let out = lb.concretize(input).intersect(ibp.last().unwrap())?;
    Ok((lb, out))
}

/// The raw field as a function of `η` alone at fixed `x`: the input branch is
/// folded into the bias of the state layer.
pub fn eta_ops(net: &MaterializedDynamics, x: &[f64]) -> Result<Vec<Op>> {
    let g = DVector::from_vec(net.x_features(x)?);
    let Some(Op::Affine { w, b }) = net.eta_in.ops.first() else {
        return Err(Error::invalid("state layer must be affine"));
    };
    let mut ops = vec![Op::Affine { w: w.clone(), b: b + g }];
    ops.extend(net.trunk.ops.iter().cloned());
    Ok(ops)
}

/// Per-coordinate bounds on the CBF-QP output over boxes of `η` and `f̂`.
/// Each bound is one QP solve at the monotone corner.
pub fn qp_interval_bounds(eta: &IntervalBox, f_hat: &IntervalBox, alpha: &ClassK, b: f64) -> Result<IntervalBox> {
    let n = eta.dim();
    if f_hat.dim() != n {
        return Err(Error::invalid("state and raw-dynamics boxes differ in dimension"));
    }
    let solve_at = |eta_pt: Vec<f64>, f_pt: Vec<f64>, i: usize| -> Result<f64> {
        let lower = eta_pt.iter().map(|&e| -alpha.eval(e)).collect();
        let prob = QpProblem::new(f_pt, lower, vec![f64::INFINITY; n], b)?;
        Ok(solve_cbf_qp(&prob)?.f[i])
    };
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    for i in 0..n {
        let pick = |own: f64, other: &[f64], j: usize| if j == i { own } else { other[j] };
        let e_lo: Vec<f64> = (0..n).map(|j| pick(eta.upper[i], &eta.lower, j)).collect();
        let f_lo: Vec<f64> = (0..n).map(|j| pick(f_hat.lower[i], &f_hat.upper, j)).collect();
        lo.push(solve_at(e_lo, f_lo, i)? - QP_BOUND_PAD);
        let e_hi: Vec<f64> = (0..n).map(|j| pick(eta.lower[i], &eta.upper, j)).collect();
        let f_hi: Vec<f64> = (0..n).map(|j| pick(f_hat.upper[i], &f_hat.lower, j)).collect();
        hi.push(solve_at(e_hi, f_hi, i)? + QP_BOUND_PAD);
    }
    IntervalBox::new(lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundMode {
    Crown,
    Lipschitz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Certified,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureReason {
    InsufficientKappa,
    InsufficientTime,
    ViolatedBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxViolation {
    pub sample_index: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub verdict: Verdict,
    pub reason: Option<FailureReason>,
    pub samples: usize,
    /// The first violations in sample order (capped); see `violation_count`.
    pub violations: Vec<BoxViolation>,
    pub violation_count: usize,
    pub delta: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kappa_required: Option<f64>,
    /// `null` when no finite horizon suffices.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub time_required: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub level: Option<f64>,
    pub elapsed_s: f64,
}

impl CertificationReport {
    pub fn is_certified(&self) -> bool {
        self.verdict == Verdict::Certified
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON with the wall-clock field zeroed, for determinism comparisons.
    pub fn to_json_without_timing(&self) -> String {
        Self { elapsed_s: 0.0, ..self.clone() }.to_json()
    }
}

/// `ε·L_V·L_f^x / V̲`, the smallest admissible decay rate.
pub fn kappa_min(eps: f64, l_v: f64, l_fx: f64, v_lower: f64) -> f64 {
    eps * l_v * l_fx / v_lower
}

/// Smallest horizon after which `V ≤ V̲` is guaranteed:
/// `−(1/κ)·ln((V̲ − s)/(V₀ − s))` with `s = L_V·L_f^x·ε/κ`, zero when the start
/// is already inside, infinite when `V̲ ≤ s`.
pub fn time_min(kappa: f64, lle: f64, v_lower: f64, v0: f64) -> f64 {
    if v0 <= v_lower {
        return 0.0;
    }
    let s = lle / kappa;
    if v_lower <= s {
        return f64::INFINITY;
    }
    -((v_lower - s) / (v0 - s)).ln() / kappa
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierCertConfig {
    pub eps: f64,
    pub band: LevelBand,
    pub horizon: f64,
    pub mode: BoundMode,
    pub neighborhood_radius: f64,
    pub delta: f64,
}

/// Upper bound of `∂V/∂η·f + κV` over a state box, at fixed `x`.
pub fn classifier_box_bound(
    net: &MaterializedDynamics,
    alpha: &ClassK,
    potential: &Potential,
    kappa: f64,
    x: &[f64],
    eta_box: &IntervalBox,
    mode: BoundMode,
    lipschitz_eta: f64,
) -> Result<f64> {
    let n = eta_box.dim();
    let y = potential
        .label()
        .ok_or_else(|| Error::invalid("classifier certification needs a labelled potential"))?;
    let candidates: Vec<usize> = match potential.kind() {
        PotentialKind::Mll => vec![y],
        PotentialKind::Margin => {
            let best_lo = (0..n).filter(|&j| j != y).map(|j| eta_box.lower[j]).fold(f64::NEG_INFINITY, f64::max);
            (0..n).filter(|&i| i != y && eta_box.upper[i] >= best_lo).collect()
        }
        PotentialKind::Quadratic => return Err(Error::invalid("quadratic potentials certify invariant sets")),
    };
    // ψ_i = (f_i − f_y) + κ(1 − η_y + η_i) for the margin potential and
    // −f_y + κ(1 − η_y) for MLL (encoded as i = y with the f_i, η_i terms dropped)
    let is_mll = potential.kind() == PotentialKind::Mll;
    match mode {
        BoundMode::Crown => {
            let ops = eta_ops(net, x)?;
            let (_, f_hat) = crown_dense_bounds(&ops, eta_box)?;
            let f = qp_interval_bounds(eta_box, &f_hat, alpha, 0.0)?;
            let bound = candidates
                .iter()
                .map(|&i| {
                    if is_mll {
                        -f.lower[y] + kappa * (1.0 - eta_box.lower[y])
                    } else {
                        (f.upper[i] - f.lower[y]) + kappa * (1.0 - eta_box.lower[y] + eta_box.upper[i])
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(up(bound))
        }
        BoundMode::Lipschitz => {
            let c = eta_box.center();
            let rho = eta_box.radii().iter().map(|r| r * r).sum::<f64>().sqrt();
            let prob = QpProblem::simplex_filter(net.forward(&c, x)?, &c, alpha)?;
            let f = solve_cbf_qp(&prob)?.f;
            let max_slope = eta_box.upper.iter().map(|&e| alpha.derivative(e)).fold(0.0, f64::max);
            let l_f = lipschitz_eta + (2.0 + (n as f64).sqrt()) * max_slope;
            let (value_at, lip) = if is_mll {
                (
                    vec![-f[y] + kappa * (1.0 - c[y])],
                    l_f + kappa,
                )
            } else {
                (
                    candidates.iter().map(|&i| (f[i] - f[y]) + kappa * (1.0 - c[y] + c[i])).collect(),
                    std::f64::consts::SQRT_2 * (l_f + kappa),
                )
            };
            let center = value_at.into_iter().fold(f64::NEG_INFINITY, f64::max);
            Ok(up(center + lip * rho + 1e-12 * (1.0 + center.abs())))
        }
    }
}

/// Checks the three robustness conditions for classifying `x` as `label`:
/// the decay rate, the integration time and the per-box decrease bound on every
/// sample's neighborhood.
pub fn certify_classifier(
    model: &ClassifierModel,
    x: &[f64],
    label: usize,
    cfg: &ClassifierCertConfig,
    samples: &[Vec<f64>],
) -> Result<CertificationReport> {
    let start = Instant::now();
    let n = model.n_classes();
    if !(cfg.eps >= 0.0 && cfg.neighborhood_radius > 0.0 && cfg.delta >= 0.0 && cfg.band.lo > 0.0) {
        return Err(Error::invalid("eps >= 0, neighborhood radius > 0 and a positive band are required"));
    }
    if let Some(bad) = samples.iter().position(|s| s.len() != n) {
        return Err(Error::invalid(format!("sample {bad} has the wrong dimension")));
    }
    let potential = model.potential_for(label)?;
    let l_v = potential.lipschitz(1.0);
    let l_fx = model.net.lipschitz_bound(LipschitzWrt::InputX);
    let kappa = model.kappa;
    let k_req = kappa_min(cfg.eps, l_v, l_fx, cfg.band.lo);
    let v0 = potential.value(SimplexPoint::uniform(n).coords())?;
    let t_req = if kappa > 0.0 {
        time_min(kappa, cfg.eps * l_v * l_fx, cfg.band.lo, v0)
    } else {
        f64::INFINITY
    };
    let mut report = CertificationReport {
        verdict: Verdict::Failed,
        reason: None,
        samples: 0,
        violations: Vec::new(),
        violation_count: 0,
        delta: cfg.delta,
        kappa: Some(kappa),
        kappa_required: Some(k_req),
        time_required: t_req.is_finite().then_some(t_req),
        level: None,
        elapsed_s: 0.0,
    };
    if kappa < k_req + cfg.delta {
        report.reason = Some(FailureReason::InsufficientKappa);
    } else if !(cfg.horizon >= t_req) {
        report.reason = Some(FailureReason::InsufficientTime);
    } else {
        let net = model.net.materialize()?;
        let l_eta = model.net.lipschitz_bound(LipschitzWrt::StateEta);
        let results: Vec<Result<Option<BoxViolation>>> = samples
            .par_iter()
            .enumerate()
            .map(|(idx, s)| {
                let bx = IntervalBox::around(s, cfg.neighborhood_radius).clamp(0.0, 1.0)?;
                let bound = classifier_box_bound(&net, &model.alpha, &potential, kappa, x, &bx, cfg.mode, l_eta)?;
                Ok((bound > -cfg.delta).then(|| BoxViolation {
                    sample_index: idx,
                    lower: bx.lower,
                    upper: bx.upper,
                    bound,
                }))
            })
            .collect();
        report.samples = samples.len();
        collect_violations(&mut report, results)?;
    }
    report.elapsed_s = start.elapsed().as_secs_f64();
    Ok(report)
}

fn collect_violations(report: &mut CertificationReport, results: Vec<Result<Option<BoxViolation>>>) -> Result<()> {
    for r in results {
        if let Some(v) = r? {
            report.violation_count += 1;
            if report.violations.len() < MAX_REPORTED_VIOLATIONS {
                report.violations.push(v);
            }
        }
    }
    if report.violation_count > 0 {
        report.reason = Some(FailureReason::ViolatedBox);
    } else {
        report.verdict = Verdict::Certified;
    }
    Ok(())
}

/// Closed-loop system for invariant-set certification: a plant graph with
/// inputs `(x, u)` and outputs `ẋ`, driven by a scalar ReLU controller.
pub struct ClosedLoop<'a> {
    pub plant: &'a ExprGraph,
    pub controller: &'a Materialized,
}

impl ClosedLoop<'_> {
    pub fn state_dim(&self) -> usize {
        self.plant.n_outputs()
    }

    pub fn derivative(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.controller.forward(x)?;
        let mut inp = x.to_vec();
        inp.extend(u);
        self.plant.eval(&inp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvariantCertConfig {
    /// Grid spacing of the rejection sampler.
    pub r: f64,
    pub delta: f64,
    pub budget: u128,
    /// Stop at the first chunk of boxes containing a violation. The report's
    /// `violation_count` is then a lower bound. A certified verdict is
    /// unaffected since every box is still checked.
    pub fail_fast: bool,
}

impl Default for InvariantCertConfig {
    fn default() -> Self {
        Self {
            r: 0.01,
            delta: DEFAULT_DELTA,
            budget: DEFAULT_BUDGET,
            fail_fast: false,
        }
    }
}

/// Boxes per parallel chunk in fail-fast scans.
const SCAN_CHUNK: usize = 4096;

/// Enclosure of the Jacobian of a ReLU network over a box, one row of
/// intervals per output. Unstable neurons contribute slope `[0, 1]`.
pub fn interval_jacobian_net(ops: &[Op], input: &IntervalBox) -> Result<Vec<Vec<Interval>>> {
    check_net_input(ops, input)?;
    let ibp = ibp_trace(ops, input);
    let n = input.dim();
    let mut jac: Vec<Vec<Interval>> = (0..n)
        .map(|i| (0..n).map(|j| Interval::point(if i == j { 1.0 } else { 0.0 })).collect())
        .collect();
    for (k, op) in ops.iter().enumerate() {
        jac = match op {
            Op::Affine { w, .. } => (0..w.nrows())
                .map(|r| {
                    (0..n)
                        .map(|c| {
                            (0..w.ncols()).fold(Interval::point(0.0), |acc, j| acc.add(Interval::point(w[(r, j)]).mul(jac[j][c])))
                        })
                        .collect()
                })
                .collect(),
            Op::Relu => jac
                .into_iter()
                .enumerate()
                .map(|(r, row)| {
                    let (lo, hi) = (ibp[k].lower[r], ibp[k].upper[r]);
                    if lo > 0.0 {
                        row
                    } else if hi < 0.0 {
                        vec![Interval::point(0.0); n]
                    } else {
                        row.into_iter().map(|t| t.hull(Interval::point(0.0))).collect()
                    }
                })
                .collect(),
        };
    }
    Ok(jac)
}

/// Upper bound of `V̇` over a state box, using CROWN on the controller and
/// interval propagation through the plant. The plain interval bound is
/// intersected with a mean-value bound `V̇(c) + Σ ρ_i·|∂V̇/∂x_i|` whose
/// gradient enclosure comes from [`ExprGraph::interval_gradient_forward`];
/// the latter keeps the cancellation inside `xᵀP f(x)` that plain intervals lose.
pub fn lie_derivative_bound(lie: &ExprGraph, controller: &Materialized, state_box: &IntervalBox) -> Result<f64> {
    let n = state_box.dim();
    let (_, u) = crown_dense_bounds(&controller.ops, state_box)?;
    let mut inp = state_box.clone();
    inp.lower.extend(u.lower);
    inp.upper.extend(u.upper);
    let plain = lie.interval_forward(&inp)?.upper[0];

    let mut grads: Vec<Vec<Interval>> = (0..n)
        .map(|i| (0..n).map(|j| Interval::point(if i == j { 1.0 } else { 0.0 })).collect())
        .collect();
    grads.extend(interval_jacobian_net(&controller.ops, state_box)?);
    let (_, g) = lie.interval_gradient_forward(&inp, &grads)?;

    let c = state_box.center();
    let center = IntervalBox::point(&c);
    let (_, uc) = crown_dense_bounds(&controller.ops, &center)?;
    let mut cin = center.clone();
    cin.lower.extend(uc.lower);
    cin.upper.extend(uc.upper);
    let mut mv = Interval::point(lie.interval_forward(&cin)?.upper[0]);
    for i in 0..n {
        let rho = up((state_box.upper[i] - c[i]).max(c[i] - state_box.lower[i]));
        let gi = g[0][i];
        mv = mv.add(Interval::point(rho).mul(Interval::point(gi.lo.abs().max(gi.hi.abs()))));
    }
    Ok(plain.min(mv.hi))
}

/// Certifies that `{x : xᵀPx ≤ c}` is forward invariant by bounding `V̇` on
/// boxes covering the level set `{xᵀPx = c}`.
pub fn certify_invariant_set(
    system: &ClosedLoop<'_>,
    p: &DMatrix<f64>,
    level: f64,
    domain: &IntervalBox,
    cfg: &InvariantCertConfig,
) -> Result<CertificationReport> {
    let start = Instant::now();
    let n = system.state_dim();
    if p.nrows() != n || domain.dim() != n || system.plant.n_inputs() != n + 1 {
        return Err(Error::invalid("plant, P and domain dimensions disagree"));
    }
    if !(level > 0.0 && cfg.r > 0.0) {
        return Err(Error::invalid("level and grid spacing must be positive"));
    }
    let potential = Potential::quadratic(p.clone())?;
    let hw = ellipsoid_half_widths(p, level)?;
    let lo: Vec<f64> = hw.iter().map(|h| -h).collect();
    let outer = IntervalBox::new(lo.clone(), hw.clone())?;
    if !outer.is_subset_of(domain) {
        return Err(Error::invalid(format!("level set {level} is not contained in the domain box")));
    }
    // pad by one cell so level-set points on the box boundary sit inside a cell
    let lo_pad: Vec<f64> = lo.iter().map(|v| v - cfg.r).collect();
    let hi_pad: Vec<f64> = hw.iter().map(|v| v + cfg.r).collect();
    let grid = box_grid(&lo_pad, &hi_pad, cfg.r, cfg.budget)?;
    let accepted = rejection_filter(&grid, cfg.r, &potential, level)?.accepted;
    let lie = system.plant.quadratic_lie_derivative(p)?;
    let check = |idx: usize| -> Result<Option<BoxViolation>> {
        let bx = IntervalBox::around(&accepted[idx], cfg.r / 2.0);
        let bound = lie_derivative_bound(&lie, system.controller, &bx)?;
        Ok((!(bound <= -cfg.delta)).then(|| BoxViolation {
            sample_index: idx,
            lower: bx.lower,
            upper: bx.upper,
            bound,
        }))
    };
    let results: Vec<Result<Option<BoxViolation>>> = if cfg.fail_fast {
        // a fixed pseudo-random order finds scattered violations early
        let mut order: Vec<usize> = (0..accepted.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
        let mut out = Vec::new();
        for chunk in order.chunks(SCAN_CHUNK) {
            let part: Vec<Result<Option<BoxViolation>>> = chunk.par_iter().map(|&i| check(i)).collect();
            let stop = part.iter().any(|r| !matches!(r, Ok(None)));
            out.extend(part);
            if stop {
                break;
            }
        }
        out
    } else {
        (0..accepted.len()).into_par_iter().map(check).collect()
    };
    let mut report = CertificationReport {
        verdict: Verdict::Failed,
        reason: None,
        samples: accepted.len(),
        violations: Vec::new(),
        violation_count: 0,
        delta: cfg.delta,
        kappa: None,
        kappa_required: None,
        time_required: None,
        level: Some(level),
        elapsed_s: 0.0,
    };
    collect_violations(&mut report, results)?;
    report.elapsed_s = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Line search over levels of `xᵀPx`: starts at the largest level set inside
/// the domain and shrinks geometrically until certification succeeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelSearchConfig {
    pub shrink: f64,
    pub max_steps: usize,
    /// Grid spacing as a fraction of the smallest ellipsoid half-width.
    pub relative_r: f64,
    pub delta: f64,
    pub budget: u64,
}

impl Default for LevelSearchConfig {
    fn default() -> Self {
        Self {
            shrink: 0.7,
            max_steps: 20,
            relative_r: 0.02,
            delta: DEFAULT_DELTA,
            budget: DEFAULT_BUDGET as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSearchOutcome {
    /// The certified level, if any.
    pub level: Option<f64>,
    /// The full report at the certified level, or the last failed attempt.
    pub report: CertificationReport,
    /// `(level, r, violations found)` for every attempt.
    pub attempts: Vec<(f64, f64, usize)>,
}

/// Grid spacing used at `level` by [`search_invariant_level`].
pub fn relative_spacing(p: &DMatrix<f64>, level: f64, relative_r: f64) -> Result<f64> {
    let hw = ellipsoid_half_widths(p, level)?;
    Ok(relative_r * hw.iter().cloned().fold(f64::INFINITY, f64::min))
}

pub fn search_invariant_level(
    system: &ClosedLoop<'_>,
    p: &DMatrix<f64>,
    domain: &IntervalBox,
    cfg: &LevelSearchConfig,
) -> Result<LevelSearchOutcome> {
    if !(cfg.shrink > 0.0 && cfg.shrink < 1.0 && cfg.relative_r > 0.0 && cfg.max_steps > 0) {
        return Err(Error::invalid("shrink must lie in (0, 1) with positive spacing and step count"));
    }
    let inv = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("P must be positive definite"))?
        .inverse();
    // largest c with the c-level set inside the domain, slightly inset
    let mut level = (0..p.nrows())
        .map(|i| {
            let d = domain.upper[i].min(-domain.lower[i]);
            d * d / inv[(i, i)]
        })
        .fold(f64::INFINITY, f64::min)
        * (1.0 - 1e-9);
    if !(level > 0.0) {
        return Err(Error::invalid("domain must contain the origin in its interior"));
    }
    let mut attempts = Vec::new();
    let mut last = None;
    for _ in 0..cfg.max_steps {
        let r = relative_spacing(p, level, cfg.relative_r)?;
        let icfg = InvariantCertConfig {
            r,
            delta: cfg.delta,
            budget: cfg.budget.into(),
            fail_fast: true,
        };
        let report = certify_invariant_set(system, p, level, domain, &icfg)?;
        attempts.push((level, r, report.violation_count));
        if report.is_certified() {
            return Ok(LevelSearchOutcome {
                level: Some(level),
                report,
                attempts,
            });
        }
        last = Some(report);
        level *= cfg.shrink;
    }
    Ok(LevelSearchOutcome {
        level: None,
        report: last.expect("at least one attempt"),
        attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{DynamicsNet, Layer, Sequential};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn iv(lo: f64, hi: f64) -> Interval {
        Interval::new(lo, hi).unwrap()
    }

    fn random_ops(rng: &mut impl Rng, dims: &[usize]) -> Vec<Op> {
        let mut ops = Vec::new();
        for k in 0..dims.len() - 1 {
            if k > 0 {
                ops.push(Op::Relu);
            }
            ops.push(Op::Affine {
                w: DMatrix::from_fn(dims[k + 1], dims[k], |_, _| rng.random_range(-1.0..1.0)),
                b: DVector::from_fn(dims[k + 1], |_, _| rng.random_range(-0.5..0.5)),
            });
        }
        ops
    }

    fn eval_ops(ops: &[Op], x: &[f64]) -> Vec<f64> {
        let mut h = DVector::from_column_slice(x);
        for op in ops {
            h = op.apply(&h);
        }
        h.as_slice().to_vec()
    }

    fn random_box(rng: &mut impl Rng, n: usize, max_w: f64) -> IntervalBox {
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..max_w)).collect();
        IntervalBox::new(
            c.iter().zip(&w).map(|(c, w)| c - w).collect(),
            c.iter().zip(&w).map(|(c, w)| c + w).collect(),
        )
        .unwrap()
    }

    fn sample_in(rng: &mut impl Rng, b: &IntervalBox) -> Vec<f64> {
        (0..b.dim())
            .map(|i| if b.lower[i] == b.upper[i] { b.lower[i] } else { rng.random_range(b.lower[i]..=b.upper[i]) })
            .collect()
    }

    #[test]
    fn interval_examples() {
        assert_eq!(iv(-1.0, 1.0).relu(), iv(0.0, 1.0));
        let s = iv(0.0, FRAC_PI_2).sin();
        assert!(s.lo <= 0.0 && s.lo > -1e-15 && s.hi == 1.0);
        let c = iv(-0.5, 0.5).cos();
        assert_eq!(c.hi, 1.0);
        assert!((c.lo - 0.5f64.cos()).abs() < 1e-15);
        let c = iv(3.0, 3.5).cos();
        assert_eq!(c.lo, -1.0);
        assert_eq!(iv(-2.0, 3.0).square().lo, 0.0);
        assert!(matches!(iv(1.0, 2.0).div(iv(-1.0, 1.0)), Err(Error::DivisionBySpanningZero { .. })));
        let q = iv(1.0, 2.0).div(iv(2.0, 4.0)).unwrap();
        assert!(q.contains(0.25) && q.contains(1.0) && q.lo > 0.24 && q.hi < 1.01);
        assert!(Interval::new(1.0, 0.0).is_err());
    }

    #[test]
    fn affine_interval_example() {
        let ops = vec![Op::Affine {
            w: DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            b: DVector::zeros(1),
        }];
        let out = interval_forward_net(&ops, &IntervalBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()).unwrap();
        assert!(out.lower[0] <= -1.0 && out.lower[0] > -1.0 - 1e-14);
        assert!(out.upper[0] >= 1.0 && out.upper[0] < 1.0 + 1e-14);
    }

    #[test]
    fn elementary_enclosures_are_sound() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..2000 {
            let a = rng.random_range(-10.0..10.0);
            let b = a + rng.random_range(0.0..4.0);
            let x = iv(a, b);
            let y = iv(rng.random_range(0.5..2.0), rng.random_range(2.0..3.0));
            for _ in 0..5 {
                let t = rng.random_range(a..=b);
                let s = rng.random_range(y.lo..=y.hi);
                assert!(x.sin().contains(t.sin()));
                assert!(x.cos().contains(t.cos()));
                assert!(x.square().contains(t * t));
                assert!(x.mul(y).contains(t * s));
                assert!(x.div(y).unwrap().contains(t / s));
                assert!(x.sub(y).contains(t - s));
            }
        }
        assert_eq!(iv(0.0, 7.0).sin(), iv(-1.0, 1.0));
        let near_peak = iv(PI / 2.0 - 1e-3, PI / 2.0 + 1e-3).sin();
        assert_eq!(near_peak.hi, 1.0);
    }

    #[test]
    fn graph_eval_and_bounds() {
        // f(a, b) = sin(a)·b − a² / (b + 3)
        let mut g = ExprGraph::new(2);
        let a = g.input(0);
        let b = g.input(1);
        let s = g.sin(a);
        let sb = g.mul(s, b);
        let a2 = g.square(a);
        let three = g.constant(3.0);
        let den = g.add(b, three);
        let q = g.div(a2, den);
        let out = g.sub(sb, q);
        g.set_outputs(vec![out]);
        let v = g.eval(&[0.7, -0.4]).unwrap()[0];
        assert_abs_diff_eq!(v, 0.7f64.sin() * -0.4 - 0.49 / 2.6, epsilon = 1e-15);
        let bx = IntervalBox::new(vec![-1.0, -1.0], vec![1.5, 0.5]).unwrap();
        let out = g.interval_forward(&bx).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..10_000 {
            let p = sample_in(&mut rng, &bx);
            assert!(out.contains(&g.eval(&p).unwrap()));
        }
        let bad = IntervalBox::new(vec![0.0, -4.0], vec![1.0, 0.0]).unwrap();
        assert!(matches!(g.interval_forward(&bad), Err(Error::DivisionBySpanningZero { .. })));
    }

    #[test]
    fn quadratic_lie_derivative_graph() {
        // ẋ = −x, V = xᵀPx ⇒ V̇ = −2xᵀPx
        let mut g = ExprGraph::new(3);
        let outs = (0..2)
            .map(|i| {
                let x = g.input(i);
                g.neg(x)
            })
            .collect();
        g.set_outputs(outs);
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let lie = g.quadratic_lie_derivative(&p).unwrap();
        let x = [0.3, -0.7];
        let v = lie.eval(&[x[0], x[1], 9.0]).unwrap()[0];
        let xp = DVector::from_column_slice(&x);
        assert_abs_diff_eq!(v, -2.0 * (xp.transpose() * &p * &xp)[0], epsilon = 1e-14);
    }

    #[test]
    fn crown_is_exact_on_affine_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let w = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let w2 = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let ops = vec![Op::Affine { w: w.clone(), b: b.clone() }, Op::Affine { w: w2.clone(), b: DVector::zeros(2) }];
        let (lb, _) = crown_dense_bounds(&ops, &random_box(&mut rng, 2, 0.5)).unwrap();
        assert!((&lb.a_lower - &lb.a_upper).amax() == 0.0);
        assert!((&lb.a_lower - &w2 * &w).amax() < 1e-14);
        assert!((&lb.b_upper - &w2 * &b).amax() < 1e-14);
    }

    #[test]
    fn crown_encloses_grid_of_one_hidden_layer_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let ops = random_ops(&mut rng, &[2, 8, 2]);
        let bx = IntervalBox::new(vec![-1.0, -0.5], vec![0.5, 1.0]).unwrap();
        let (lb, out) = crown_dense_bounds(&ops, &bx).unwrap();
        for i in 0..100 {
            for j in 0..100 {
                let p = [-1.0 + 1.5 * i as f64 / 99.0, -0.5 + 1.5 * j as f64 / 99.0];
                let y = eval_ops(&ops, &p);
                assert!(out.contains(&y));
                let z = DVector::from_column_slice(&p);
                let l = &lb.a_lower * &z + &lb.b_lower;
                let u = &lb.a_upper * &z + &lb.b_upper;
                for k in 0..2 {
                    assert!(l[k] <= y[k] + 1e-12 && y[k] <= u[k] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn crown_is_exact_when_all_neurons_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let w1 = DMatrix::from_fn(4, 2, |_, _| rng.random_range(0.1..1.0));
        let ops = vec![
            Op::Affine { w: w1, b: DVector::from_element(4, 0.5) },
            Op::Relu,
            Op::Affine {
                w: DMatrix::from_fn(1, 4, |_, _| rng.random_range(-1.0..1.0)),
                b: DVector::zeros(1),
            },
        ];
        // all pre-activations positive on the box, so the net is affine there
        let bx = IntervalBox::new(vec![0.0, 0.0], vec![0.3, 0.2]).unwrap();
        let (_, out) = crown_dense_bounds(&ops, &bx).unwrap();
        let corners = [[0.0, 0.0], [0.3, 0.0], [0.0, 0.2], [0.3, 0.2]];
        let vals: Vec<f64> = corners.iter().map(|c| eval_ops(&ops, c)[0]).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_abs_diff_eq!(out.lower[0], lo, epsilon = 1e-9);
        assert_abs_diff_eq!(out.upper[0], hi, epsilon = 1e-9);
    }

    #[test]
    fn crown_within_ibp_and_sound() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for _ in 0..200 {
            let ops = random_ops(&mut rng, &[3, 6, 6, 2]);
            let bx = random_box(&mut rng, 3, 0.6);
            let ibp = interval_forward_net(&ops, &bx).unwrap();
            let (_, crown) = crown_dense_bounds(&ops, &bx).unwrap();
            assert!(crown.is_subset_of(&ibp));
            for _ in 0..50 {
                let y = eval_ops(&ops, &sample_in(&mut rng, &bx));
                assert!(crown.contains(&y));
            }
        }
    }

    #[test]
    fn qp_bounds_examples() {
        let alpha = ClassK::default();
        let eta = [0.2, 0.5, 0.3];
        let fh = [0.4, -1.5, 0.2];
        let exact = solve_cbf_qp(&QpProblem::simplex_filter(fh.to_vec(), &eta, &alpha).unwrap()).unwrap().f;
        let b = qp_interval_bounds(&IntervalBox::point(&eta), &IntervalBox::point(&fh), &alpha, 0.0).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(b.lower[i], exact[i], epsilon = 2e-9);
            assert_abs_diff_eq!(b.upper[i], exact[i], epsilon = 2e-9);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let eb = IntervalBox::around(&eta, 0.05);
        let fb = IntervalBox::around(&fh, 0.3);
        let outer = qp_interval_bounds(&eb, &fb, &alpha, 0.0).unwrap();
        for _ in 0..10_000 {
            let e = sample_in(&mut rng, &eb);
            let f = sample_in(&mut rng, &fb);
            let sol = solve_cbf_qp(&QpProblem::simplex_filter(f, &e, &alpha).unwrap()).unwrap();
            assert!(outer.contains(&sol.f));
        }
        let inner = qp_interval_bounds(&IntervalBox::around(&eta, 0.02), &IntervalBox::around(&fh, 0.1), &alpha, 0.0).unwrap();
        assert!(inner.is_subset_of(&outer));
    }

    #[test]
    fn eq14_and_eq15_anchors() {
        assert_abs_diff_eq!(kappa_min(0.1, 1.0, 1.0, 0.5), 0.2, epsilon = 1e-12);
        let t = time_min(1.0, 0.2, 0.5, 2.0 / 3.0);
        assert_abs_diff_eq!(t, -(0.3f64 / (2.0 / 3.0 - 0.2)).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(t, 0.4418, epsilon = 1e-4);
        assert_eq!(time_min(1.0, 0.2, 0.5, 0.4), 0.0);
        assert_eq!(time_min(0.1, 0.2, 0.5, 0.9), f64::INFINITY);
    }

    /// `f̂ = k(e_y − η)` for `η ≥ 0`, with a weak dependence on `x`.
    fn contracting_model(label: usize, k: f64, kappa: f64, x_gain: f64) -> ClassifierModel {
        let n = 3;
        let dense = |w: DMatrix<f64>, b: Vec<f64>| Layer::dense(w, DVector::from_vec(b)).unwrap();
        let mut b3 = vec![0.0; n];
        b3[label] = k;
        let net = DynamicsNet::new(
            Sequential::new(vec![dense(DMatrix::from_element(n, 2, x_gain), vec![0.0; n])]),
            dense(DMatrix::identity(n, n), vec![0.0; n]),
            Sequential::new(vec![
                Layer::Relu,
                dense(DMatrix::identity(n, n), vec![0.0; n]),
                Layer::Relu,
                dense(DMatrix::identity(n, n) * -k, b3),
            ]),
        )
        .unwrap();
        ClassifierModel {
            net,
            alpha: ClassK::default(),
            potential: PotentialKind::Margin,
            kappa,
        }
    }

    fn cert_cfg(eps: f64, horizon: f64, mode: BoundMode) -> ClassifierCertConfig {
        ClassifierCertConfig {
            eps,
            band: LevelBand::new(1.0, 1.0).unwrap(),
            horizon,
            mode,
            neighborhood_radius: 1.0 / 20.0,
            delta: DEFAULT_DELTA,
        }
    }

    #[test]
    fn insufficient_kappa_is_reported() {
        // L_f^x = 1 via a unit-norm x branch and identity trunk
        let mut m = contracting_model(0, 1.0, 0.1, 0.0);
        m.potential = PotentialKind::Mll;
        m.net.x_branch = Sequential::new(vec![Layer::dense(
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            DVector::zeros(3),
        )
        .unwrap()]);
        assert_abs_diff_eq!(m.net.lipschitz_bound(LipschitzWrt::InputX), 1.0, epsilon = 1e-12);
        let cfg = ClassifierCertConfig {
            band: LevelBand::new(0.5, 2.0 / 3.0).unwrap(),
            ..cert_cfg(0.1, 5.0, BoundMode::Crown)
        };
        let r = certify_classifier(&m, &[0.0, 0.0], 0, &cfg, &[]).unwrap();
        assert_eq!(r.reason, Some(FailureReason::InsufficientKappa));
        assert_abs_diff_eq!(r.kappa_required.unwrap(), 0.2, epsilon = 1e-12);
        assert!(r.to_json().contains("\"InsufficientKappa\""));
    }

    #[test]
    fn insufficient_time_is_reported() {
        let mut m = contracting_model(0, 1.0, 1.0, 0.0);
        m.potential = PotentialKind::Mll;
        let cfg = ClassifierCertConfig {
            band: LevelBand::new(0.5, 2.0 / 3.0).unwrap(),
            ..cert_cfg(0.0, 0.1, BoundMode::Crown)
        };
        // V₀ = 2/3 > V̲ = 1/2 ⇒ T ≥ ln(4/3)
        let r = certify_classifier(&m, &[0.0, 0.0], 0, &cfg, &[]).unwrap();
        assert_eq!(r.reason, Some(FailureReason::InsufficientTime));
        assert_abs_diff_eq!(r.time_required.unwrap(), (4.0f64 / 3.0).ln(), epsilon = 1e-12);
    }

    #[test]
    fn contracting_classifier_is_certified_and_robust() {
        use crate::ode::{classify, rollout, FilteredDynamics, IntegratorConfig, Method, StateSpace};
        let eps = 0.1;
        for label in 0..3 {
            let m = contracting_model(label, 1.0, 0.3, 0.01);
            let samples = crate::sampling::sample_decision_boundary(3, 20, label).unwrap().points;
            let x = [0.5, -0.2];
            let r = certify_classifier(&m, &x, label, &cert_cfg(eps, 5.0, BoundMode::Crown), &samples).unwrap();
            assert!(r.is_certified(), "{r:?}");
            let net = m.net.materialize().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(38);
            let cfg = IntegratorConfig::new(Method::Rk4, 0.05, 5.0).unwrap();
            for _ in 0..1000 {
                let d: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let s = eps * rng.random::<f64>() / (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-12);
                let xp = [x[0] + s * d[0], x[1] + s * d[1]];
                let dynm = FilteredDynamics { net: &net, x: &xp, alpha: m.alpha };
                let t = rollout(&dynm, SimplexPoint::uniform(3).coords(), &cfg, StateSpace::Simplex).unwrap();
                assert_eq!(classify(&t), label);
            }
        }
    }

    #[test]
    fn lipschitz_certified_boxes_are_crown_certified() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let mut lip_count = 0;
        for trial in 0..40 {
            let m = contracting_model(trial % 3, rng.random_range(0.5..1.5), rng.random_range(0.05..0.5), 0.01);
            let net = m.net.materialize().unwrap();
            let pot = m.potential_for(trial % 3).unwrap();
            let l_eta = m.net.lipschitz_bound(LipschitzWrt::StateEta);
            let samples = crate::sampling::sample_decision_boundary(3, 20, trial % 3).unwrap().points;
            for s in &samples {
                for r in [0.002, 0.01, 0.05] {
                    let bx = IntervalBox::around(s, r).clamp(0.0, 1.0).unwrap();
                    let x = [0.1, 0.2];
                    let lip = classifier_box_bound(&net, &m.alpha, &pot, m.kappa, &x, &bx, BoundMode::Lipschitz, l_eta).unwrap();
                    let crown = classifier_box_bound(&net, &m.alpha, &pot, m.kappa, &x, &bx, BoundMode::Crown, l_eta).unwrap();
                    if lip <= -DEFAULT_DELTA {
                        lip_count += 1;
                        assert!(crown <= -DEFAULT_DELTA);
                    }
                }
            }
        }
        assert!(lip_count > 0);
    }

    #[test]
    fn box_bounds_are_sound_for_random_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for trial in 0..10 {
            let m = ClassifierModel {
                net: DynamicsNet::orthogonal(&mut rng, 3, 2, 8).unwrap(),
                alpha: ClassK::default(),
                potential: PotentialKind::Margin,
                kappa: 0.2,
            };
            let net = m.net.materialize().unwrap();
            let label = trial % 3;
            let pot = m.potential_for(label).unwrap();
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let s = crate::sampling::sample_decision_boundary(3, 12, label).unwrap().points;
            let c = &s[trial % s.len()];
            let bx = IntervalBox::around(c, 0.05).clamp(0.0, 1.0).unwrap();
            for mode in [BoundMode::Crown, BoundMode::Lipschitz] {
                let bound = classifier_box_bound(&net, &m.alpha, &pot, m.kappa, &x, &bx, mode, 1.0).unwrap();
                for _ in 0..500 {
                    let e = sample_in(&mut rng, &bx);
                    let f = solve_cbf_qp(&QpProblem::simplex_filter(net.forward(&e, &x).unwrap(), &e, &m.alpha).unwrap())
                        .unwrap()
                        .f;
                    let (v, g) = pot.eval_grad(&e).unwrap();
                    let psi: f64 = g.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() + m.kappa * v;
                    assert!(psi <= bound + 1e-9, "{mode:?}: {psi} > {bound}");
                }
            }
        }
    }

    fn linear_plant(sign: f64) -> ExprGraph {
        let mut g = ExprGraph::new(4);
        let outs = (0..3)
            .map(|i| {
                let x = g.input(i);
                g.scale(sign, x)
            })
            .collect();
        g.set_outputs(outs);
        g
    }

    fn zero_controller() -> Materialized {
        Sequential::new(vec![Layer::dense(DMatrix::zeros(1, 3), DVector::zeros(1)).unwrap()]).materialize().unwrap()
    }

    #[test]
    fn stable_linear_loop_is_certified() {
        let plant = linear_plant(-1.0);
        let ctrl = zero_controller();
        let sys = ClosedLoop { plant: &plant, controller: &ctrl };
        let domain = IntervalBox::around(&[0.0; 3], 1.0);
        let cfg = InvariantCertConfig { r: 0.05, ..Default::default() };
        for c in [0.1, 0.5] {
            let r = certify_invariant_set(&sys, &DMatrix::identity(3, 3), c, &domain, &cfg).unwrap();
            assert!(r.is_certified(), "{r:?}");
            assert!(r.samples > 0);
        }
    }

    #[test]
    fn unstable_linear_loop_fails_at_first_sample() {
        let plant = linear_plant(1.0);
        let ctrl = zero_controller();
        let sys = ClosedLoop { plant: &plant, controller: &ctrl };
        let domain = IntervalBox::around(&[0.0; 3], 1.0);
        let cfg = InvariantCertConfig { r: 0.05, ..Default::default() };
        let r = certify_invariant_set(&sys, &DMatrix::identity(3, 3), 0.5, &domain, &cfg).unwrap();
        assert_eq!(r.reason, Some(FailureReason::ViolatedBox));
        assert_eq!(r.violations[0].sample_index, 0);
        assert!(certify_invariant_set(&sys, &DMatrix::identity(3, 3), 4.0, &domain, &cfg).is_err());
    }

    #[test]
    fn report_json_shape() {
        let plant = linear_plant(-1.0);
        let ctrl = zero_controller();
        let sys = ClosedLoop { plant: &plant, controller: &ctrl };
        let domain = IntervalBox::around(&[0.0; 3], 1.0);
        let cfg = InvariantCertConfig { r: 0.1, ..Default::default() };
        let r = certify_invariant_set(&sys, &DMatrix::identity(3, 3), 0.5, &domain, &cfg).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["verdict", "reason", "samples", "violations", "elapsed_s"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["verdict"], "Certified");
    }

    fn segway_like_graph() -> ExprGraph {
        crate::control::segway_graph()
    }

    #[test]
    fn interval_gradients_enclose_finite_differences() {
        let g = segway_like_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let h = 1e-6;
        for _ in 0..300 {
            let bx = random_box(&mut rng, 4, 0.2);
            let seeds: Vec<Vec<Interval>> =
                (0..4).map(|i| (0..4).map(|j| Interval::point(if i == j { 1.0 } else { 0.0 })).collect()).collect();
            let (vals, grads) = g.interval_gradient_forward(&bx, &seeds).unwrap();
            assert_eq!(vals, g.interval_forward(&bx).unwrap());
            for _ in 0..10 {
                let x = sample_in(&mut rng, &bx);
                for k in 0..4 {
                    let mut a = x.clone();
                    let mut b = x.clone();
                    a[k] += h;
                    b[k] -= h;
                    let (fa, fb) = (g.eval(&a).unwrap(), g.eval(&b).unwrap());
                    for o in 0..3 {
                        let d = (fa[o] - fb[o]) / (2.0 * h);
                        let e = grads[o][k];
                        assert!(d >= e.lo - 1e-5 && d <= e.hi + 1e-5, "output {o} input {k}: {d} not in {e:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn network_jacobian_enclosure_is_sound() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        for _ in 0..200 {
            let ops = random_ops(&mut rng, &[3, 6, 5, 2]);
            let bx = random_box(&mut rng, 3, 0.3);
            let jac = interval_jacobian_net(&ops, &bx).unwrap();
            for _ in 0..20 {
                let x = sample_in(&mut rng, &bx);
                let h = 1e-7;
                for c in 0..3 {
                    let mut a = x.clone();
                    a[c] += h;
                    let mut b = x.clone();
                    b[c] -= h;
                    let (fa, fb) = (eval_ops(&ops, &a), eval_ops(&ops, &b));
                    for r in 0..2 {
                        let d = (fa[r] - fb[r]) / (2.0 * h);
                        assert!(d >= jac[r][c].lo - 1e-5 && d <= jac[r][c].hi + 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn lie_derivative_bound_is_sound_on_the_segway() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let g = segway_like_graph();
        for _ in 0..40 {
            let ctrl = crate::network::controller_mlp(&mut rng, 3, 8).materialize().unwrap();
            let p = {
                let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
                a.transpose() * a + DMatrix::identity(3, 3) * 0.1
            };
            let lie = g.quadratic_lie_derivative(&p).unwrap();
            let sys = ClosedLoop { plant: &g, controller: &ctrl };
            for _ in 0..10 {
                let bx = random_box(&mut rng, 3, 0.05);
                let bound = lie_derivative_bound(&lie, &ctrl, &bx).unwrap();
                for _ in 0..25 {
                    let x = sample_in(&mut rng, &bx);
                    let f = DVector::from_vec(sys.derivative(&x).unwrap());
                    let xv = DVector::from_column_slice(&x);
                    let vdot = 2.0 * (&p * &xv).dot(&f);
                    assert!(vdot <= bound, "{vdot} > {bound}");
                }
            }
        }
    }

    #[test]
    fn mean_value_bound_is_tighter_than_plain_intervals() {
        // ẋ = −x with V = xᵀx: plain intervals lose the cancellation in 2x·(−x)
        let plant = linear_plant(-1.0);
        let ctrl = zero_controller();
        let lie = plant.quadratic_lie_derivative(&DMatrix::identity(3, 3)).unwrap();
        let bx = IntervalBox::around(&[0.5, 0.0, 0.0], 0.1);
        let mut inp = bx.clone();
        inp.lower.push(0.0);
        inp.upper.push(0.0);
        let plain = lie.interval_forward(&inp).unwrap().upper[0];
        let mv = lie_derivative_bound(&lie, &ctrl, &bx).unwrap();
        assert!(mv <= plain);
        assert!(mv < 0.0);
    }

    #[test]
    fn fail_fast_agrees_with_full_scan() {
        let ctrl = zero_controller();
        let domain = IntervalBox::around(&[0.0; 3], 1.0);
        for sign in [-1.0, 1.0] {
            let plant = linear_plant(sign);
            let sys = ClosedLoop { plant: &plant, controller: &ctrl };
            let full = InvariantCertConfig { r: 0.05, ..Default::default() };
            let fast = InvariantCertConfig { fail_fast: true, ..full };
            let a = certify_invariant_set(&sys, &DMatrix::identity(3, 3), 0.3, &domain, &full).unwrap();
            let b = certify_invariant_set(&sys, &DMatrix::identity(3, 3), 0.3, &domain, &fast).unwrap();
            assert_eq!(a.verdict, b.verdict);
            assert_eq!(a.samples, b.samples);
            assert!(b.violation_count <= a.violation_count);
            if sign < 0.0 {
                assert_eq!(a.to_json_without_timing(), b.to_json_without_timing());
            }
        }
    }

    #[test]
    fn level_search_certifies_stable_and_rejects_unstable_loops() {
        let ctrl = zero_controller();
        let domain = IntervalBox::around(&[0.0; 3], 1.0);
        let cfg = LevelSearchConfig {
            relative_r: 0.1,
            max_steps: 3,
            ..Default::default()
        };
        let stable = linear_plant(-1.0);
        let sys = ClosedLoop { plant: &stable, controller: &ctrl };
        let out = search_invariant_level(&sys, &DMatrix::identity(3, 3), &domain, &cfg).unwrap();
        let c = out.level.unwrap();
        assert!(c > 0.99 && c <= 1.0);
        assert_eq!(out.attempts.len(), 1);
        assert_eq!(out.report.level, Some(c));
        let unstable = linear_plant(1.0);
        let sys = ClosedLoop { plant: &unstable, controller: &ctrl };
        let out = search_invariant_level(&sys, &DMatrix::identity(3, 3), &domain, &cfg).unwrap();
        assert_eq!(out.level, None);
        assert_eq!(out.attempts.len(), 3);
        assert!(!out.report.is_certified());
    }
}
