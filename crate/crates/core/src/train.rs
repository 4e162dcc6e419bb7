//! Lyapunov and barrier training for classifiers and controllers.
//!
//! Gradients flow from the hinge through the CBF-QP solution map into the
//! network. Samples whose QP solution sits within the degeneracy tolerance of a
//! bound are skipped: they contribute neither loss nor gradient, but still count
//! toward the batch mean. Per-sample terms are summed in fixed-size chunks in
//! batch order, so results do not depend on the thread count.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{segway_initial_lyapunov, segway_lqr_gain, Plant, Segway};
use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::network::{controller_mlp, DynamicsNet, Layer, LipschitzWrt, MaterializedDynamics, Sequential};
use crate::qp::{solve_cbf_qp, vjp_fhat, ClassK, QpProblem};
use crate::sampling::certification_samples;
use crate::simplex::{project_to_simplex, LevelBand, Potential, PotentialKind};

const CHUNK: usize = 16;

/// One training state: a point on the simplex paired with a labelled input.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSample {
    pub eta: Vec<f64>,
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient in [`DynamicsNet::params`] order.
    pub grad: Vec<f64>,
    pub active: usize,
    pub skipped: usize,
}

struct Partial {
    loss: f64,
    wgrad: Vec<f64>,
    active: usize,
    skipped: usize,
}

/// Mean over the batch of `max(0, term)`, where `term(sample, f)` returns the
/// active hinge value and its gradient with respect to the filtered field `f`.
fn hinge_batch<F>(net: &MaterializedDynamics, alpha: &ClassK, batch: &[StateSample], term: F) -> Result<LossGrad>
where
    F: Fn(&StateSample, &[f64]) -> Result<Option<(f64, Vec<f64>)>> + Sync,
{
    let nw = net.num_weight_grads();
    let partials: Vec<Partial> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut p = Partial {
                loss: 0.0,
                wgrad: vec![0.0; nw],
                active: 0,
                skipped: 0,
            };
            for s in chunk {
                let f_hat = net.forward(&s.eta, &s.x)?;
                let prob = QpProblem::simplex_filter(f_hat, &s.eta, alpha)?;
                let sol = solve_cbf_qp(&prob)?;
                let Some((value, d_f)) = term(s, &sol.f)? else { continue };
                let cot = match vjp_fhat(&prob, &sol, &d_f) {
                    Ok(c) => c,
                    Err(Error::DegenerateJacobian { .. }) => {
                        p.skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                p.loss += value;
                p.active += 1;
                net.backward_weights(&s.eta, &s.x, &cot, &mut p.wgrad)?;
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let mut total = Partial {
        loss: 0.0,
        wgrad: vec![0.0; nw],
        active: 0,
        skipped: 0,
    };
    for p in partials {
        total.loss += p.loss;
        total.active += p.active;
        total.skipped += p.skipped;
        for (t, v) in total.wgrad.iter_mut().zip(&p.wgrad) {
            *t += v;
        }
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    let grad = net.pullback(&total.wgrad).into_iter().map(|g| g * scale).collect();
    Ok(LossGrad {
        loss: total.loss * scale,
        grad,
        active: total.active,
        skipped: total.skipped,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Monte Carlo Lyapunov loss: the batch mean of `max(0, ∂V/∂η·f + κV)`. `κ` is
/// a constant here; it carries no gradient.
pub fn lyapunov_loss(
    net: &MaterializedDynamics,
    alpha: &ClassK,
    kind: PotentialKind,
    kappa: f64,
    batch: &[StateSample],
) -> Result<LossGrad> {
    let n = net.state_dim();
    hinge_batch(net, alpha, batch, |s, f| {
        let (v, g) = Potential::for_label(kind, s.label, n)?.eval_grad(&s.eta)?;
        let psi = dot(&g, f) + kappa * v;
        Ok((psi > 0.0).then_some((psi, g)))
    })
}

/// Barrier loss: the batch mean of `max(0, −∂h/∂η·f − α(h(η)))` for a barrier
/// `h` returning its value and gradient.
pub fn barrier_loss<H>(net: &MaterializedDynamics, alpha: &ClassK, h: H, batch: &[StateSample]) -> Result<LossGrad>
where
    H: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    hinge_batch(net, alpha, batch, |s, f| {
        let (hv, hg) = h(&s.eta);
        let value = -dot(&hg, f) - alpha.eval(hv);
        Ok((value > 0.0).then(|| (value, hg.iter().map(|g| -g).collect())))
    })
}

/// Uniform sample from the simplex (Dirichlet with unit concentration).
pub fn sample_dirichlet(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Linear ramp from uniform sampling to band-focused sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingScheduler {
    pub iterations: usize,
    pub final_band_weight: f64,
    /// Fraction of the run after which the band weight stays at its final value.
    pub ramp_fraction: f64,
    /// ℓ∞ radius of the uniform noise added around band samples.
    pub noise_radius: f64,
}

impl SamplingScheduler {
    pub fn new(iterations: usize, final_band_weight: f64, ramp_fraction: f64, noise_radius: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&final_band_weight) || !(ramp_fraction > 0.0 && ramp_fraction <= 1.0) || noise_radius < 0.0 {
            return Err(Error::invalid("band weight must lie in [0, 1] and the ramp fraction in (0, 1]"));
        }
        Ok(Self {
            iterations,
            final_band_weight,
            ramp_fraction,
            noise_radius,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub uniform_weight: f64,
    pub band_weight: f64,
    pub noise_radius: f64,
}

pub fn scheduler_advance(s: &SamplingScheduler, iteration: usize) -> BatchSpec {
    let ramp = (s.ramp_fraction * s.iterations as f64).max(1.0);
    let t = (iteration as f64 / ramp).min(1.0);
    let band_weight = s.final_band_weight * t;
    BatchSpec {
        uniform_weight: 1.0 - band_weight,
        band_weight,
        noise_radius: s.noise_radius,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaPolicy {
    Fixed(f64),
    /// `κ = ε·L_V·L_f^x(θ)/V̲`, recomputed every iteration.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub iterations: usize,
    pub data_batch: usize,
    pub state_batch: usize,
    pub eps: f64,
    pub kappa: KappaPolicy,
    pub seed: u64,
    pub potential: PotentialKind,
    /// Density of the band samples the scheduler concentrates on.
    pub density: usize,
    pub final_band_weight: f64,
    pub ramp_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            iterations: 400,
            data_batch: 32,
            state_batch: 8,
            eps: 0.1,
            kappa: KappaPolicy::Adaptive,
            seed: 0,
            potential: PotentialKind::Margin,
            density: 20,
            final_band_weight: 0.8,
            ramp_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub loss: f64,
    pub kappa: f64,
    pub lipschitz_x: f64,
}

/// Header `iter,loss,kappa,lipschitz_x`.
pub fn write_history_csv(rows: &[HistoryRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "iter,loss,kappa,lipschitz_x")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.iter, r.loss, r.kappa, r.lipschitz_x)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    pub history: Vec<HistoryRow>,
}

/// The decay rate used at the current parameters.
pub fn kappa_for(policy: KappaPolicy, eps: f64, kind: PotentialKind, n: usize, l_fx: f64) -> Result<f64> {
    Ok(match policy {
        KappaPolicy::Fixed(k) => k,
        KappaPolicy::Adaptive => {
            let band = LevelBand::classifier_default(kind, n)?;
            let l_v = Potential::for_label(kind, 0, n)?.lipschitz(1.0);
            eps * l_v * l_fx / band.lo
        }
    })
}

/// Draws a state batch for one data point following the scheduler.
pub fn draw_states(
    rng: &mut impl Rng,
    spec: &BatchSpec,
    band: &[Vec<f64>],
    n: usize,
    count: usize,
) -> Result<Vec<Vec<f64>>> {
    (0..count)
        .map(|_| {
            if !band.is_empty() && rng.random::<f64>() < spec.band_weight {
                let base = band.choose(rng).expect("non-empty band");
                let r = spec.noise_radius;
                let noisy: Vec<f64> = base
                    .iter()
                    .map(|v| if r > 0.0 { v + rng.random_range(-r..=r) } else { *v })
                    .collect();
                Ok(project_to_simplex(&noisy)?.into_inner())
            } else {
                Ok(sample_dirichlet(rng, n))
            }
        })
        .collect()
}

/// Gradient descent on the Lyapunov loss over `(x, y)` pairs.
pub fn train_classifier(
    net: DynamicsNet,
    alpha: ClassK,
    data: &[(Vec<f64>, usize)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !(cfg.lr > 0.0) || cfg.data_batch == 0 || cfg.state_batch == 0 || cfg.density == 0 {
        return Err(Error::invalid("learning rate and batch sizes must be positive"));
    }
    let n = net.state_dim();
    if let Some((_, y)) = data.iter().find(|(_, y)| *y >= n) {
        return Err(Error::invalid(format!("label {y} out of range for {n} classes")));
    }
    if data.is_empty() && cfg.iterations > 0 {
        return Err(Error::invalid("training needs at least one data point"));
    }
    let band = LevelBand::classifier_default(cfg.potential, n)?;
    let band_samples: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|y| certification_samples(cfg.potential, y, n, cfg.density, &band))
        .collect::<Result<_>>()?;
    let sched = SamplingScheduler::new(cfg.iterations, cfg.final_band_weight, cfg.ramp_fraction, 1.0 / cfg.density as f64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = net;
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut kappa = kappa_for(cfg.kappa, cfg.eps, cfg.potential, n, net.lipschitz_bound(LipschitzWrt::InputX))?;
    for it in 0..cfg.iterations {
        let spec = scheduler_advance(&sched, it);
        let mut batch = Vec::with_capacity(cfg.data_batch * cfg.state_batch);
        for _ in 0..cfg.data_batch {
            let (x, y) = data.choose(&mut rng).expect("non-empty data");
            for eta in draw_states(&mut rng, &spec, &band_samples[*y], n, cfg.state_batch)? {
                batch.push(StateSample {
                    eta,
                    x: x.clone(),
                    label: *y,
                });
            }
        }
        let l_fx = net.lipschitz_bound(LipschitzWrt::InputX);
        kappa = kappa_for(cfg.kappa, cfg.eps, cfg.potential, n, l_fx)?;
        let m = net.materialize()?;
        let lg = lyapunov_loss(&m, &alpha, cfg.potential, kappa, &batch)?;
        if !lg.loss.is_finite() || lg.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericalFailure(format!("non-finite loss or gradient at iteration {it}")));
        }
        history.push(HistoryRow {
            iter: it,
            loss: lg.loss,
            kappa,
            lipschitz_x: l_fx,
        });
        let theta: Vec<f64> = net.params().iter().zip(&lg.grad).map(|(t, g)| t - cfg.lr * g).collect();
        net.set_params(&theta)?;
    }
    Ok(TrainOutcome {
        model: ClassifierModel {
            net,
            alpha,
            potential: cfg.potential,
            kappa,
        },
        history,
    })
}

/// Three Gaussian blobs with means on a circle at 120° spacing; labels cycle
/// so the classes are balanced.
pub fn toy_gaussians(count: usize, radius: f64, sigma: f64, seed: u64) -> Vec<(Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let y = i % 3;
            let th = std::f64::consts::TAU * y as f64 / 3.0;
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            (vec![radius * th.cos() + sigma * dx, radius * th.sin() + sigma * dy], y)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerTrainConfig {
    pub seed: u64,
    /// Half-width of the state box `[−d, d]ⁿ` used for imitation and level checks.
    pub domain: f64,
    pub imitation_iters: usize,
    pub imitation_lr: f64,
    pub imitation_batch: usize,
    pub lyapunov_iters: usize,
    pub lyapunov_lr: f64,
    pub p_lr: f64,
    pub batch: usize,
    pub kappa: f64,
    /// Training level as a fraction of the largest level set inside the domain.
    pub level_fraction: f64,
    pub pga_steps: usize,
    /// ℓ∞ radius of the adversarial search around each band sample.
    pub pga_radius: f64,
}

impl Default for ControllerTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            domain: 1.0,
            imitation_iters: 3000,
            imitation_lr: 0.01,
            imitation_batch: 64,
            lyapunov_iters: 300,
            lyapunov_lr: 1e-3,
            p_lr: 1e-3,
            batch: 64,
            kappa: 0.1,
            level_fraction: 0.5,
            pga_steps: 10,
            pga_radius: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControllerOutcome {
    pub controller: Sequential,
    pub p: DMatrix<f64>,
    pub imitation_history: Vec<f64>,
    pub history: Vec<HistoryRow>,
}

/// Fits the controller to `reference` by least squares on uniform states in
/// `[−domain, domain]ⁿ`; returns the per-iteration mean squared error.
pub fn imitate<R>(
    controller: &mut Sequential,
    reference: R,
    n: usize,
    domain: f64,
    iters: usize,
    lr: f64,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>>
where
    R: Fn(&[f64]) -> f64 + Sync,
{
    let mut hist = Vec::with_capacity(iters);
    for it in 0..iters {
        let xs: Vec<Vec<f64>> = (0..batch).map(|_| (0..n).map(|_| rng.random_range(-domain..=domain)).collect()).collect();
        let m = controller.materialize()?;
        let nw = m.num_weight_grads();
        let parts: Vec<(f64, Vec<f64>)> = xs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut loss = 0.0;
                let mut w = vec![0.0; nw];
                for x in chunk {
                    let acts = m.forward_cached(x)?;
                    let err = acts.last().unwrap()[0] - reference(x);
                    loss += err * err;
                    m.backward(&acts, &[2.0 * err], &mut w);
                }
                Ok((loss, w))
            })
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut w = vec![0.0; nw];
        for (l, g) in parts {
            loss += l;
            w.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / batch as f64;
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::NumericalFailure(format!("imitation loss diverged at iteration {it}")));
        }
        hist.push(loss);
        let grad = m.pullback(&w);
        let theta: Vec<f64> = controller.params().iter().zip(&grad).map(|(t, g)| t - lr * scale * g).collect();
        controller.set_params(&theta)?;
    }
    Ok(hist)
}

/// Shifts the output bias so the controller maps the origin to zero input,
/// keeping the origin an equilibrium of the closed loop.
pub fn recenter_controller(controller: &mut Sequential, state_dim: usize) -> Result<()> {
    let u0 = controller.forward(&vec![0.0; state_dim])?;
    match controller.layers.last_mut() {
        Some(Layer::Dense { b, .. }) => {
            for (bi, ui) in b.iter_mut().zip(&u0) {
                *bi -= ui;
            }
            Ok(())
        }
        _ => Err(Error::invalid("controller must end in a dense layer")),
    }
}

/// `P = LᵀL + 1e-3·I` with `L` lower-triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticParam {
    pub l: DMatrix<f64>,
}

pub const P_FLOOR: f64 = 1e-3;

impl QuadraticParam {
    /// The lower-triangular `L` reproducing `p` (which must exceed the floor).
    pub fn from_p(p: &DMatrix<f64>) -> Result<Self> {
        let n = p.nrows();
        // with J the exchange matrix and JMJ = CCᵀ, L = JCᵀJ is lower-triangular and LᵀL = M
        let j = DMatrix::from_fn(n, n, |r, c| if r + c == n - 1 { 1.0 } else { 0.0 });
        let m = p - DMatrix::identity(n, n) * P_FLOOR;
        let c = (&j * m * &j)
            .cholesky()
            .ok_or_else(|| Error::invalid("P must exceed the 1e-3 floor to be parameterized"))?
            .l();
        Ok(Self { l: &j * c.transpose() * &j })
    }

    pub fn p(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        self.l.transpose() * &self.l + DMatrix::identity(n, n) * P_FLOOR
    }
}

/// Largest `c` with `{xᵀPx ≤ c}` inside `[−d, d]ⁿ`.
pub fn max_level_in_box(p: &DMatrix<f64>, d: f64) -> Result<f64> {
    let inv = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("P must be positive definite"))?
        .inverse();
    Ok((0..p.nrows()).map(|i| d * d / inv[(i, i)]).fold(f64::INFINITY, f64::min))
}

/// Normalized closed-loop hinge term `(V̇ + κV)/V` at `x`.
fn controller_psi(plant: &impl Plant, ctrl: &crate::network::Materialized, p: &DMatrix<f64>, kappa: f64, x: &[f64]) -> Result<f64> {
    let u = ctrl.forward(x)?[0];
    let f = DVector::from_vec(plant.derivative(x, u));
    let xv = DVector::from_column_slice(x);
    let px = p * &xv;
    let v = xv.dot(&px);
    Ok(2.0 * px.dot(&f) / v + kappa)
}

/// Stage 1 imitates `reference`; stage 2 jointly descends the normalized
/// Lyapunov hinge over the controller and `P`, on states drawn from the current
/// level set and on adversarial states found by projected sign-gradient ascent.
pub fn train_controller<R>(
    controller: Sequential,
    plant: &impl Plant,
    p_init: &DMatrix<f64>,
    reference: R,
    cfg: &ControllerTrainConfig,
) -> Result<ControllerOutcome>
where
    R: Fn(&[f64]) -> f64 + Sync,
{
    let n = plant.state_dim();
    if controller.check_shapes(n)? != 1 {
        return Err(Error::invalid("controller must map the state to a scalar"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut controller = controller;
    let imitation_history = imitate(
        &mut controller,
        &reference,
        n,
        cfg.domain,
        cfg.imitation_iters,
        cfg.imitation_lr,
        cfg.imitation_batch,
        &mut rng,
    )?;
    recenter_controller(&mut controller, n)?;
    let mut param = QuadraticParam::from_p(p_init)?;
    let mut history = Vec::with_capacity(cfg.lyapunov_iters);
    for it in 0..cfg.lyapunov_iters {
        let p = param.p();
        let level = cfg.level_fraction * max_level_in_box(&p, cfg.domain)?;
        let ctrl = controller.materialize()?;
        let mut states = Vec::with_capacity(2 * cfg.batch);
        for _ in 0..cfg.batch {
            let d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let dv = DVector::from_vec(d);
            let s = (level / dv.dot(&(&p * &dv))).sqrt();
            states.push((dv * s).as_slice().to_vec());
        }
        let seeds = states.clone();
        let adversarial: Vec<Vec<f64>> = seeds
            .par_iter()
            .map(|x0| pga(plant, &ctrl, &p, cfg.kappa, x0, cfg.pga_steps, cfg.pga_radius))
            .collect::<Result<_>>()?;
        states.extend(adversarial);

        let nw = ctrl.num_weight_grads();
        let parts: Vec<(f64, Vec<f64>, DMatrix<f64>)> = states
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut loss = 0.0;
                let mut w = vec![0.0; nw];
                let mut gp = DMatrix::zeros(n, n);
                for x in chunk {
                    let acts = ctrl.forward_cached(x)?;
                    let u = acts.last().unwrap()[0];
                    let f = DVector::from_vec(plant.derivative(x, u));
                    let xv = DVector::from_column_slice(x);
                    let px = &p * &xv;
                    let v = xv.dot(&px);
                    let vdot = 2.0 * px.dot(&f);
                    let psi = vdot / v + cfg.kappa;
                    if psi <= 0.0 {
                        continue;
                    }
                    loss += psi;
                    let gain = DVector::from_vec(plant.input_gain(x));
                    let d_u = 2.0 * px.dot(&gain) / v;
                    ctrl.backward(&acts, &[d_u], &mut w);
                    // ∂ψ/∂P = 2f xᵀ/V − (V̇/V²) x xᵀ
                    gp += (&f * xv.transpose()) * (2.0 / v) - (&xv * xv.transpose()) * (vdot / (v * v));
                }
                Ok((loss, w, gp))
            })
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut w = vec![0.0; nw];
        let mut gp = DMatrix::zeros(n, n);
        for (l, g, q) in parts {
            loss += l;
            w.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            gp += q;
        }
        let scale = 1.0 / states.len() as f64;
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::NumericalFailure(format!("controller loss diverged at iteration {it}")));
        }
        history.push(HistoryRow {
            iter: it,
            loss,
            kappa: cfg.kappa,
            lipschitz_x: controller.lipschitz(),
        });
        let grad = ctrl.pullback(&w);
        let theta: Vec<f64> = controller.params().iter().zip(&grad).map(|(t, g)| t - cfg.lyapunov_lr * scale * g).collect();
        controller.set_params(&theta)?;
        recenter_controller(&mut controller, n)?;
        // ∂ψ/∂L = L(G + Gᵀ), restricted to the lower triangle
        let gl = &param.l * (&gp + gp.transpose()) * scale;
        for r in 0..n {
            for c in 0..=r {
                param.l[(r, c)] -= cfg.p_lr * gl[(r, c)];
            }
        }
    }
    Ok(ControllerOutcome {
        controller,
        p: param.p(),
        imitation_history,
        history,
    })
}

/// The segway pipeline: a ReLU controller imitating the LQR gain, then joint
/// Lyapunov training starting from [`segway_initial_lyapunov`].
pub fn train_segway(hidden: usize, cfg: &ControllerTrainConfig) -> Result<ControllerOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let controller = controller_mlp(&mut rng, 3, hidden);
    let k = segway_lqr_gain();
    let reference = move |x: &[f64]| -(k[0] * x[0] + k[1] * x[1] + k[2] * x[2]);
    train_controller(controller, &Segway, &segway_initial_lyapunov(), reference, cfg)
}

/// Projected sign-gradient ascent on the hinge term inside the ℓ∞ ball of
/// `radius` around `x0`, with central-difference gradients.
fn pga(
    plant: &impl Plant,
    ctrl: &crate::network::Materialized,
    p: &DMatrix<f64>,
    kappa: f64,
    x0: &[f64],
    steps: usize,
    radius: f64,
) -> Result<Vec<f64>> {
    let step = radius / 5.0;
    let h = 1e-6;
    let mut x = x0.to_vec();
    for _ in 0..steps {
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            g[i] = (controller_psi(plant, ctrl, p, kappa, &a)? - controller_psi(plant, ctrl, p, kappa, &b)?) / (2.0 * h);
        }
        for i in 0..x.len() {
            x[i] = (x[i] + step * g[i].signum()).clamp(x0[i] - radius, x0[i] + radius);
        }
    }
    Ok(x)
}
