//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero if any fails. Pass a substring to run a subset.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use invariode::control::{segway_graph, Segway};
use invariode::model::ClassifierModel;
use invariode::network::{DynamicsNet, Op};
use invariode::ode::{classify, rollout, FilteredDynamics, IntegratorConfig, Method, StateSpace, Trajectory};
use invariode::qp::{qp_jacobians, solve_cbf_qp, ClassK, QpProblem};
use invariode::sampling::{
    binomial, certification_samples, for_each_composition, sample_decision_boundary, sample_simplex_grid,
};
use invariode::simplex::{runner_up, LevelBand, Potential, PotentialKind, SimplexPoint};
use invariode::train::{
    lyapunov_loss, sample_dirichlet, toy_gaussians, train_classifier, train_segway, ControllerTrainConfig,
    StateSample, TrainConfig,
};
use invariode::verify::{
    certify_classifier, crown_dense_bounds, interval_forward_net, kappa_min, qp_interval_bounds,
    search_invariant_level, time_min, BoundMode, ClassifierCertConfig, ClosedLoop, FailureReason, IntervalBox,
    LevelSearchConfig, DEFAULT_DELTA,
};
use invariode::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------- CBF-QP ----------

/// Random feasible instance: a mix of simplex filters and general boxes.
fn random_qp(rng: &mut impl Rng) -> QpProblem {
    let n = rng.random_range(1..=10);
    let f_hat: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    if n >= 2 && rng.random_bool(0.5) {
        let eta = sample_dirichlet(rng, n);
        return QpProblem::simplex_filter(f_hat, &eta, &ClassK::default()).unwrap();
    }
    let lower: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..0.5)).collect();
    let upper: Vec<f64> = lower
        .iter()
        .map(|l| if rng.random_bool(0.3) { f64::INFINITY } else { l + rng.random_range(0.0..2.0) })
        .collect();
    let lo: f64 = lower.iter().sum();
    let hi: f64 = upper.iter().sum();
    let b = if hi.is_finite() { rng.random_range(lo..=hi) } else { lo + rng.random_range(0.0..4.0) };
    QpProblem::new(f_hat, lower, upper, b).unwrap()
}

/// Dykstra's alternating projections between the box and the hyperplane;
/// converges to the Euclidean projection onto their intersection.
fn dykstra_oracle(p: &QpProblem) -> Vec<f64> {
    let n = p.dim();
    let mut x = p.f_hat.clone();
    let mut pc = vec![0.0; n];
    let mut qc = vec![0.0; n];
    for _ in 0..1_000_000 {
        let y: Vec<f64> = (0..n).map(|i| (x[i] + pc[i]).max(p.lower[i]).min(p.upper[i])).collect();
        for i in 0..n {
            pc[i] += x[i] - y[i];
        }
        let z: Vec<f64> = (0..n).map(|i| y[i] + qc[i]).collect();
        let shift = (z.iter().sum::<f64>() - p.b) / n as f64;
        let next: Vec<f64> = z.iter().map(|v| v - shift).collect();
        for i in 0..n {
            qc[i] = z[i] - next[i];
        }
        let moved = linf(&next, &x);
        x = next;
        if moved < 1e-15 && linf(&x, &y) < 1e-12 {
            break;
        }
    }
    x
}

fn kkt_residual(p: &QpProblem, f: &[f64], lambda: f64) -> f64 {
    let mut r = (f.iter().sum::<f64>() - p.b).abs();
    for i in 0..p.dim() {
        r = r.max(p.lower[i] - f[i]).max(f[i] - p.upper[i]);
        let g = f[i] - p.f_hat[i] - lambda;
        let at_lower = (f[i] - p.lower[i]).abs() <= 1e-12;
        let at_upper = (f[i] - p.upper[i]).abs() <= 1e-12;
        // stationarity with sign-constrained bound multipliers
        r = r.max(match (at_lower, at_upper) {
            (true, true) => 0.0,
            (true, false) => (-g).max(0.0),
            (false, true) => g.max(0.0),
            (false, false) => g.abs(),
        });
    }
    r
}

fn qp_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let (mut worst_gap, mut worst_kkt) = (0.0f64, 0.0f64);
    for k in 0..10_000 {
        let p = random_qp(&mut rng);
        let s = solve_cbf_qp(&p).map_err(|e| format!("instance {k}: {e}"))?;
        let gap = linf(&s.f, &dykstra_oracle(&p));
        let kkt = kkt_residual(&p, &s.f, s.lambda);
        ensure(gap <= 1e-6, || format!("instance {k}: oracle gap {gap:e}"))?;
        ensure(kkt < 1e-8, || format!("instance {k}: KKT residual {kkt:e}"))?;
        worst_gap = worst_gap.max(gap);
        worst_kkt = worst_kkt.max(kkt);
    }
    Ok(format!("10^4 instances, max gap {worst_gap:.1e}, max KKT residual {worst_kkt:.1e}"))
}

fn qp_jacobian_fd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let h = 1e-7;
    let mut tested = 0;
    let mut worst = 0.0f64;
    while tested < 1000 {
        let p = random_qp(&mut rng);
        let s = solve_cbf_qp(&p).unwrap();
        // well inside a stratum so central differences do not cross a kink
        let safe = (0..p.dim()).all(|i| {
            let z = p.f_hat[i] + s.lambda;
            (z - p.lower[i]).abs() > 1e-3 && (p.upper[i] == f64::INFINITY || (z - p.upper[i]).abs() > 1e-3)
        });
        if !safe {
            continue;
        }
        let jac = qp_jacobians(&p, &s).map_err(|e| e.to_string())?;
        let n = p.dim();
        for j in 0..n {
            let perturbed = |which: usize, d: f64| {
                let mut q = p.clone();
                match which {
                    0 => q.f_hat[j] += d,
                    1 => q.lower[j] += d,
                    _ => q.upper[j] += d,
                }
                solve_cbf_qp(&q).unwrap().f
            };
            for (which, m) in [(0, &jac.d_f_d_fhat), (1, &jac.d_f_d_lower), (2, &jac.d_f_d_upper)] {
                if which == 2 && p.upper[j] == f64::INFINITY {
                    continue;
                }
                let (a, b) = (perturbed(which, h), perturbed(which, -h));
                for i in 0..n {
                    let fd = (a[i] - b[i]) / (2.0 * h);
                    let err = (fd - m[(i, j)]).abs();
                    worst = worst.max(err);
                    ensure(err <= 1e-4, || format!("instance {tested}: d f_{i}/d input_{j} kind {which}: fd {fd} vs {}", m[(i, j)]))?;
                }
            }
        }
        tested += 1;
    }
    Ok(format!("10^3 non-degenerate instances, max deviation {worst:.1e}"))
}

// ---------- Sampling ----------

fn nearest_linf(points: &[Vec<f64>], q: &[f64]) -> f64 {
    points.iter().map(|p| linf(p, q)).fold(f64::INFINITY, f64::min)
}

fn sampler_exactness() -> Outcome {
    for n in 1..=6usize {
        for d in 1..=12usize {
            let g = sample_simplex_grid(n, d).map_err(|e| e.to_string())?;
            let want = binomial((d + n - 1) as u64, (n - 1) as u64);
            ensure(g.points.len() as u128 == want, || format!("grid ({n},{d}): {} points, want {want}", g.points.len()))?;
        }
    }
    let mut checked = 0;
    for n in 2..=5usize {
        for d in 1..=12usize {
            for y in 0..n {
                let got = match sample_decision_boundary(n, d, y) {
                    Ok(s) => s,
                    Err(Error::InvalidInput(_)) => continue,
                    Err(e) => return Err(e.to_string()),
                };
                let mut brute: Vec<Vec<f64>> = Vec::new();
                for_each_composition(n, d, |c| {
                    let runner = (0..n).filter(|&i| i != y).map(|i| c[i]).max().unwrap();
                    if c[y] == runner {
                        brute.push(c.iter().map(|&v| v as f64 / d as f64).collect());
                    }
                });
                brute.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut mine = got.points.clone();
                mine.sort_by(|a, b| a.partial_cmp(b).unwrap());
                ensure(mine == brute, || format!("boundary ({n},{d},{y}) differs from brute force"))?;
                checked += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let mut grid_viol = 0;
    for (n, d) in [(3usize, 12usize), (4, 8), (5, 6), (6, 4)] {
        let pts = sample_simplex_grid(n, d).unwrap().points;
        for _ in 0..25_000 {
            let q = sample_dirichlet(&mut rng, n);
            if nearest_linf(&pts, &q) > 1.0 / d as f64 + 1e-12 {
                grid_viol += 1;
            }
        }
    }
    let mut boundary_viol = 0;
    for (n, d) in [(3usize, 6usize), (4, 6), (5, 8), (6, 8)] {
        let y = n - 1;
        let pts = sample_decision_boundary(n, d, y).unwrap().points;
        for _ in 0..25_000 {
            let mut q = sample_dirichlet(&mut rng, n);
            let m = (0..n).filter(|&i| i != y).map(|i| q[i]).fold(0.0, f64::max);
            q[y] = m;
            let s: f64 = q.iter().sum();
            q.iter_mut().for_each(|v| *v /= s);
            if nearest_linf(&pts, &q) > 1.0 / d as f64 + 1e-12 {
                boundary_viol += 1;
            }
        }
    }
    ensure(grid_viol == 0 && boundary_viol == 0, || {
        format!("covering violations: grid {grid_viol}, boundary {boundary_viol}")
    })?;
    Ok(format!("72 grid sizes, {checked} boundary sets equal brute force, 2x10^5 covering probes clean"))
}

// ---------- Bounds ----------

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
    IntervalBox::new(c.iter().zip(&w).map(|(c, w)| c - w).collect(), c.iter().zip(&w).map(|(c, w)| c + w).collect())
        .unwrap()
}

fn sample_in(rng: &mut impl Rng, b: &IntervalBox) -> Vec<f64> {
    (0..b.dim())
        .map(|i| if b.lower[i] == b.upper[i] { b.lower[i] } else { rng.random_range(b.lower[i]..=b.upper[i]) })
        .collect()
}

fn bound_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut ibp_viol = 0;
    let mut crown_viol = 0;
    let mut graph_viol = 0;
    let mut qp_viol = 0;
    for _ in 0..1000 {
        let ops = random_ops(&mut rng, &[3, 8, 8, 2]);
        let bx = random_box(&mut rng, 3, 0.5);
        let ibp = interval_forward_net(&ops, &bx).unwrap();
        let (_, crown) = crown_dense_bounds(&ops, &bx).unwrap();
        for _ in 0..10 {
            let y = eval_ops(&ops, &sample_in(&mut rng, &bx));
            ibp_viol += (!ibp.contains(&y)) as usize;
            crown_viol += (!crown.contains(&y)) as usize;
        }
    }
    let g = segway_graph();
    for _ in 0..1000 {
        let bx = random_box(&mut rng, 4, 0.3);
        let out = g.interval_forward(&bx).unwrap();
        for _ in 0..10 {
            graph_viol += (!out.contains(&g.eval(&sample_in(&mut rng, &bx)).unwrap())) as usize;
        }
    }
    let alpha = ClassK::default();
    for _ in 0..1000 {
        let n = rng.random_range(2..=6);
        let c = sample_dirichlet(&mut rng, n);
        let eta = IntervalBox::around(&c, rng.random_range(0.0..0.05)).clamp(0.0, 1.0).unwrap();
        let f = random_box(&mut rng, n, 0.3);
        let out = qp_interval_bounds(&eta, &f, &alpha, 0.0).unwrap();
        for _ in 0..10 {
            let e = sample_in(&mut rng, &eta);
            let fh = sample_in(&mut rng, &f);
            let s = solve_cbf_qp(&QpProblem::simplex_filter(fh, &e, &alpha).unwrap()).unwrap();
            qp_viol += (!out.contains(&s.f)) as usize;
        }
    }
    let mut not_tighter = 0;
    for _ in 0..1000 {
        let ops = random_ops(&mut rng, &[4, 10, 10, 3]);
        let bx = random_box(&mut rng, 4, 0.4);
        let ibp = interval_forward_net(&ops, &bx).unwrap();
        let (_, crown) = crown_dense_bounds(&ops, &bx).unwrap();
        not_tighter += (!crown.is_subset_of(&ibp)) as usize;
    }
    ensure(ibp_viol + crown_viol + graph_viol + qp_viol + not_tighter == 0, || {
        format!("violations: ibp {ibp_viol}, crown {crown_viol}, graph {graph_viol}, qp {qp_viol}; crown not within ibp {not_tighter}")
    })?;
    Ok("4x10^4 containment samples and 10^3 tightness checks clean".into())
}

// ---------- Gradients ----------

fn gradient_integrity() -> Outcome {
    let mut checked = 0;
    let mut worst = 0.0f64;
    for (seed, kind) in [(1005, PotentialKind::Mll), (1006, PotentialKind::Margin), (1007, PotentialKind::Margin)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 + (seed as usize % 2);
        let mut net = DynamicsNet::orthogonal(&mut rng, n, 2, 8).unwrap();
        // random biases too, so no ReLU pre-activation sits exactly on its kink
        let theta: Vec<f64> = net.params().iter().map(|v| 4.0 * v + rng.random_range(-0.1..0.1)).collect();
        net.set_params(&theta).unwrap();
        let alpha = ClassK::default();
        let batch: Vec<StateSample> = (0..16)
            .map(|i| StateSample {
                eta: sample_dirichlet(&mut rng, n),
                x: vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                label: i % n,
            })
            .collect();
        let loss_at = |t: &[f64]| {
            let mut m = net.clone();
            m.set_params(t).unwrap();
            lyapunov_loss(&m.materialize().unwrap(), &alpha, kind, 0.3, &batch).unwrap()
        };
        // per-sample stratum: QP active set, margin runner-up and hinge sign
        let signature = |t: &[f64]| {
            let mut m = net.clone();
            m.set_params(t).unwrap();
            let md = m.materialize().unwrap();
            batch
                .iter()
                .map(|s| {
                    let prob = QpProblem::simplex_filter(md.forward(&s.eta, &s.x).unwrap(), &s.eta, &alpha).unwrap();
                    let sol = solve_cbf_qp(&prob).unwrap();
                    let pot = Potential::for_label(kind, s.label, n).unwrap();
                    let (v, g) = pot.eval_grad(&s.eta).unwrap();
                    let psi = g.iter().zip(&sol.f).map(|(a, b)| a * b).sum::<f64>() + 0.3 * v;
                    (sol.binding_lower, runner_up(&s.eta, s.label).0, psi > 0.0)
                })
                .collect::<Vec<_>>()
        };
        let base = loss_at(&theta);
        let base_sig = signature(&theta);
        ensure(base.active > 0, || "no active hinge in the batch".into())?;
        let h = 1e-6;
        for k in 0..theta.len() {
            let mut a = theta.clone();
            a[k] += h;
            let mut b = theta.clone();
            b[k] -= h;
            // the loss is only differentiable where the stencil stays in one stratum
            if signature(&a) != base_sig || signature(&b) != base_sig {
                continue;
            }
            let (la, lb) = (loss_at(&a), loss_at(&b));
            if la.skipped + lb.skipped + base.skipped > 0 {
                continue;
            }
            // one-sided slopes disagree at a ReLU kink of the network
            let (right, left) = ((la.loss - base.loss) / h, (base.loss - lb.loss) / h);
            if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1e-3) {
                continue;
            }
            let fd = (la.loss - lb.loss) / (2.0 * h);
            let an = base.grad[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            worst = worst.max(rel);
            ensure(rel <= 1e-4, || format!("seed {seed} param {k}: fd {fd} vs analytic {an}"))?;
            checked += 1;
        }
    }
    ensure(checked > 500, || format!("only {checked} parameters were in smooth strata"))?;
    Ok(format!("{checked} parameters, max relative deviation {worst:.1e}"))
}

// ---------- Toy classifier ----------

struct ToyRun {
    model: ClassifierModel,
    certified: Vec<(Vec<f64>, usize, Trajectory)>,
}

const CERT_EPS: f64 = 0.05;

fn integrator() -> IntegratorConfig {
    IntegratorConfig::new(Method::Rk4, 0.05, 5.0).unwrap()
}

fn classify_at(model: &ClassifierModel, net: &invariode::network::MaterializedDynamics, x: &[f64]) -> Trajectory {
    let dynamics = FilteredDynamics { net, x, alpha: model.alpha };
    rollout(&dynamics, SimplexPoint::uniform(model.n_classes()).coords(), &integrator(), StateSpace::Simplex).unwrap()
}

fn toy_pipeline(slot: &mut Option<ToyRun>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = DynamicsNet::orthogonal(&mut rng, 3, 2, 16).unwrap();
    let train = toy_gaussians(300, 1.5, 0.3, 1);
    let held = toy_gaussians(60, 1.5, 0.3, 2);
    let out = train_classifier(net, ClassK::default(), &train, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let window = 10;
    let mean = |rows: &[invariode::train::HistoryRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    let first = mean(&out.history[..window]);
    let last = mean(&out.history[out.history.len() - window..]);
    ensure(last < 0.1 * first, || format!("loss {first:.4} -> {last:.4} did not drop below 10%"))?;

    let model = out.model;
    let m = model.net.materialize().unwrap();
    let band = LevelBand::classifier_default(PotentialKind::Margin, 3).unwrap();
    let cfg = ClassifierCertConfig {
        eps: CERT_EPS,
        band,
        horizon: integrator().horizon,
        mode: BoundMode::Crown,
        neighborhood_radius: 1.0 / 20.0,
        delta: DEFAULT_DELTA,
    };
    let samples: Vec<Vec<Vec<f64>>> =
        (0..3).map(|y| certification_samples(PotentialKind::Margin, y, 3, 20, &band).unwrap()).collect();
    let mut correct = 0;
    let mut certified = Vec::new();
    for (x, y) in &held {
        let traj = classify_at(&model, &m, x);
        if classify(&traj) != *y {
            continue;
        }
        correct += 1;
        let report = certify_classifier(&model, x, *y, &cfg, &samples[*y]).map_err(|e| e.to_string())?;
        if report.is_certified() {
            certified.push((x.clone(), *y, traj));
        }
    }
    let frac = certified.len() as f64 / correct.max(1) as f64;
    ensure(frac >= 0.5, || format!("only {}/{correct} correct points certified", certified.len()))?;

    // random directions on the ε-sphere, then coordinate descent on the angle
    let margin = |x: &[f64], y: usize| {
        let t = classify_at(&model, &m, x);
        let s = t.final_state();
        s[y] - (0..3).filter(|&i| i != y).map(|i| s[i]).fold(f64::NEG_INFINITY, f64::max)
    };
    let mut attacks = 0usize;
    for (x, y, _) in &certified {
        let at = |th: f64| vec![x[0] + CERT_EPS * th.cos(), x[1] + CERT_EPS * th.sin()];
        let broken = |xa: &[f64]| classify(&classify_at(&model, &m, xa)) != *y;
        let mut best = (0.0, f64::INFINITY);
        for _ in 0..900 {
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            let xa = at(th);
            ensure(!broken(&xa), || format!("random attack broke certified point {x:?}"))?;
            let mg = margin(&xa, *y);
            if mg < best.1 {
                best = (th, mg);
            }
            attacks += 1;
        }
        let mut step = 0.2;
        for _ in 0..50 {
            for th in [best.0 + step, best.0 - step] {
                let xa = at(th);
                ensure(!broken(&xa), || format!("coordinate attack broke certified point {x:?}"))?;
                let mg = margin(&xa, *y);
                if mg < best.1 {
                    best = (th, mg);
                }
                attacks += 1;
            }
            step *= 0.9;
        }
    }
    let detail = format!(
        "loss {first:.4} -> {last:.5}, certified {}/{correct} correct held-out points, {attacks} attacks failed",
        certified.len()
    );
    *slot = Some(ToyRun { model, certified });
    Ok(detail)
}

fn decay_envelope(slot: &Option<ToyRun>) -> Outcome {
    let run = slot.as_ref().ok_or("toy pipeline did not produce a model")?;
    ensure(!run.certified.is_empty(), || "no certified points to check".into())?;
    let kappa = run.model.kappa;
    let mut steps = 0;
    for (x, y, traj) in &run.certified {
        let v = run.model.potential_for(*y).unwrap();
        let v0 = v.value(&traj.states[0]).unwrap();
        for (t, s) in traj.times.iter().zip(&traj.states) {
            let val = v.value(s).unwrap();
            let env = v0 * (-kappa * t).exp() + 1e-6;
            ensure(val <= env, || format!("x = {x:?}: V({t}) = {val} exceeds envelope {env}"))?;
            steps += 1;
        }
    }
    Ok(format!("{} trajectories, {steps} recorded steps within V(0)e^(-{kappa:.4} t)", run.certified.len()))
}

// ---------- Segway ----------

fn segway_pipeline() -> Outcome {
    let out = train_segway(16, &ControllerTrainConfig::default()).map_err(|e| e.to_string())?;
    let m = out.controller.materialize().unwrap();
    let g = segway_graph();
    let sys = ClosedLoop { plant: &g, controller: &m };
    let domain = IntervalBox::new(vec![-1.0; 3], vec![1.0; 3]).unwrap();
    let search = search_invariant_level(&sys, &out.p, &domain, &LevelSearchConfig::default()).map_err(|e| e.to_string())?;
    let c = search.level.ok_or_else(|| format!("no certified level; attempts {:?}", search.attempts))?;

    let p = &out.p;
    let v = |x: &[f64]| {
        let xv = DVector::from_column_slice(x);
        xv.dot(&(p * &xv))
    };
    let hw = invariode::sampling::ellipsoid_half_widths(p, c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1008);
    let cfg = IntegratorConfig::new(Method::Rk4, 0.01, 10.0).unwrap();
    let closed = |x: &[f64]| invariode::control::closed_loop_derivative(&Segway, x, &m);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let x0 = loop {
            let x: Vec<f64> = hw.iter().map(|h| rng.random_range(-h..*h)).collect();
            if v(&x) <= c {
                break x;
            }
        };
        let traj = rollout(&closed, &x0, &cfg, StateSpace::Euclidean).map_err(|e| e.to_string())?;
        for s in &traj.states {
            worst = worst.max(v(s) / c);
            ensure(v(s) <= c, || format!("trajectory {k} left the level set at V = {}", v(s)))?;
        }
    }
    Ok(format!(
        "certified c = {c:.5} over {} boxes after {} attempts; 100 rollouts over 10 s stay inside (max V/c {worst:.3})",
        search.report.samples,
        search.attempts.len()
    ))
}

// ---------- Arithmetic anchors ----------

fn arithmetic_anchors() -> Outcome {
    let k = kappa_min(0.1, 1.0, 1.0, 0.5);
    ensure((k - 0.2).abs() <= 1e-9, || format!("kappa_min = {k}"))?;
    let want = -(0.3f64 / (2.0 / 3.0 - 0.2)).ln();
    let t = time_min(1.0, 0.2, 0.5, 2.0 / 3.0);
    ensure((t - want).abs() <= 1e-9 && (t - 0.4418).abs() < 1e-4, || format!("time_min = {t}"))?;

    // the same numbers through the certifier: an orthogonal net has L_f^x = 1
    let mut rng = ChaCha8Rng::seed_from_u64(1009);
    let net = DynamicsNet::orthogonal(&mut rng, 3, 2, 4).unwrap();
    let model = |kappa| ClassifierModel { net: net.clone(), alpha: ClassK::default(), potential: PotentialKind::Mll, kappa };
    let band = LevelBand::classifier_default(PotentialKind::Mll, 3).unwrap();
    let cfg = |eps, horizon| ClassifierCertConfig {
        eps,
        band,
        horizon,
        mode: BoundMode::Crown,
        neighborhood_radius: 0.05,
        delta: DEFAULT_DELTA,
    };
    let r = certify_classifier(&model(0.1), &[0.0, 0.0], 0, &cfg(0.1, 10.0), &[]).map_err(|e| e.to_string())?;
    let kr = r.kappa_required.unwrap_or(f64::NAN);
    ensure((kr - 0.2).abs() <= 1e-9, || format!("certifier kappa_required = {kr}"))?;
    ensure(r.reason == Some(FailureReason::InsufficientKappa), || format!("reason {:?}", r.reason))?;
    let r = certify_classifier(&model(1.0), &[0.0, 0.0], 0, &cfg(0.2, 0.44), &[]).map_err(|e| e.to_string())?;
    let tr = r.time_required.unwrap_or(f64::NAN);
    ensure((tr - want).abs() <= 1e-9, || format!("certifier time_required = {tr}"))?;
    ensure(r.reason == Some(FailureReason::InsufficientTime), || format!("reason {:?}", r.reason))?;
    Ok(format!("kappa_min = {k}, T_min = {t:.10}"))
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut toy: Option<ToyRun> = None;
    let mut failed = HashSet::new();
    let mut run = |name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        if !selected(name) {
            return;
        }
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if elapsed > l => Err(format!("runtime {:.1}s exceeds {:.0}s", elapsed.as_secs_f64(), l.as_secs_f64())),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {name} ({:.1}s): {detail}", elapsed.as_secs_f64()),
            Err(why) => {
                println!("FAIL {name} ({:.1}s): {why}", elapsed.as_secs_f64());
                failed.insert(name.to_string());
            }
        }
    };
    let secs = |s| Some(Duration::from_secs(s));
    run("qp_oracle_equivalence", secs(60), &mut qp_oracle_equivalence);
    run("qp_jacobians", secs(60), &mut qp_jacobian_fd);
    run("sampler_exactness", secs(120), &mut sampler_exactness);
    run("bound_soundness", secs(300), &mut bound_soundness);
    run("gradient_integrity", secs(120), &mut gradient_integrity);
    run("toy_classification_pipeline", secs(900), &mut || toy_pipeline(&mut toy));
    if selected("exponential_decay") && toy.is_none() && !selected("toy_classification_pipeline") {
        // the decay check needs the trained toy model
        let _ = toy_pipeline(&mut toy);
    }
    run("exponential_decay", None, &mut || decay_envelope(&toy));
    run("segway_invariant_set", secs(1200), &mut segway_pipeline);
    run("arithmetic_anchors", None, &mut arithmetic_anchors);
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
