//! Subcommand implementations. Each writes its artifacts into the run's
//! output directory.

use std::collections::btree_map::{BTreeMap, Entry};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use invariode::control::{closed_loop_derivative, segway_graph, Segway};
use invariode::model::{ClassifierModel, ControllerModel, Model};
use invariode::network::DynamicsNet;
use invariode::ode::{argmax, rollout as integrate, FilteredDynamics, StateSpace};
use invariode::qp::ClassK;
use invariode::sampling::{
    certification_samples, ellipsoid_half_widths, sample_decision_boundary, sample_simplex_grid, write_samples,
};
use invariode::simplex::{LevelBand, SimplexPoint};
use invariode::train::{toy_gaussians, train_segway, write_history_csv};
use invariode::verify::{
    certify_invariant_set, relative_spacing, search_invariant_level, CertificationReport, ClassifierCertConfig,
    ClosedLoop, IntervalBox, InvariantCertConfig,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{RunConfig, TaskKind};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, missing files or I/O trouble: exit 2.
    Usage(String),
    /// A certificate was not obtained: exit 1.
    Failed(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<invariode::Error> for CliError {
    fn from(e: invariode::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

const SEGWAY_COLUMNS: [&str; 3] = ["phi", "v", "phi_dot"];

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

fn require_task(cfg: &RunConfig, task: TaskKind) -> CliResult {
    if cfg.task != task {
        return Err(CliError::Usage(format!("this command needs `task = \"{}\"`", task_name(task))));
    }
    Ok(())
}

fn task_name(t: TaskKind) -> &'static str {
    match t {
        TaskKind::Classifier => "classifier",
        TaskKind::Controller => "controller",
    }
}

fn load_model(cfg: &RunConfig) -> CliResult<Model> {
    let path = cfg.model_path();
    if !path.exists() {
        return Err(CliError::Usage(format!("model file {} not found", path.display())));
    }
    Ok(Model::load(&path)?)
}

fn load_classifier(cfg: &RunConfig) -> CliResult<ClassifierModel> {
    match load_model(cfg)? {
        Model::Classifier(m) => Ok(m),
        Model::Controller(_) => Err(CliError::Usage("expected a classifier model".into())),
    }
}

fn load_controller(cfg: &RunConfig) -> CliResult<ControllerModel> {
    match load_model(cfg)? {
        Model::Controller(m) => Ok(m),
        Model::Classifier(_) => Err(CliError::Usage("expected a controller model".into())),
    }
}

/// Certification and rollout inputs: the configured list, or the held-out toy
/// points.
fn classifier_inputs(cfg: &RunConfig) -> Vec<(Vec<f64>, Option<usize>)> {
    if cfg.certify.inputs.is_empty() {
        let d = &cfg.dataset;
        toy_gaussians(d.holdout, d.radius, d.sigma, d.holdout_seed)
            .into_iter()
            .map(|(x, y)| (x, Some(y)))
            .collect()
    } else {
        cfg.certify.inputs.iter().map(|i| (i.x.clone(), i.label)).collect()
    }
}

fn predict(model: &ClassifierModel, x: &[f64], cfg: &RunConfig) -> CliResult<(usize, invariode::ode::Trajectory)> {
    let net = model.net.materialize()?;
    let dynamics = FilteredDynamics {
        net: &net,
        x,
        alpha: model.alpha,
    };
    let start = SimplexPoint::uniform(model.n_classes());
    let traj = integrate(&dynamics, start.coords(), &cfg.integrator, StateSpace::Simplex)?;
    Ok((argmax(traj.final_state()), traj))
}

pub fn train_classifier(cfg: &RunConfig) -> CliResult {
    require_task(cfg, TaskKind::Classifier)?;
    let d = &cfg.dataset;
    let data = toy_gaussians(d.count, d.radius, d.sigma, d.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = DynamicsNet::orthogonal(&mut rng, 3, 2, cfg.network.width)?;
    let outcome = invariode::train::train_classifier(net, ClassK::default(), &data, &cfg.train)?;

    let model_path = cfg.model_path();
    Model::Classifier(outcome.model.clone()).save(&model_path)?;
    let hp = cfg.output_dir.join("history.csv");
    let mut w = create(&hp)?;
    write_history_csv(&outcome.history, &mut w).and_then(|_| w.flush()).map_err(io_at(&hp))?;
    let dp = cfg.output_dir.join("dataset.csv");
    let mut w = create(&dp)?;
    (|| {
        writeln!(w, "x0,x1,label")?;
        for (x, y) in &data {
            writeln!(w, "{},{},{y}", x[0], x[1])?;
        }
        w.flush()
    })()
    .map_err(io_at(&dp))?;

    let first = outcome.history.first().map_or(f64::NAN, |r| r.loss);
    let last = outcome.history.last().map_or(f64::NAN, |r| r.loss);
    eprintln!("loss {first:.6} -> {last:.6}, kappa {:.6}", outcome.model.kappa);
    let held = toy_gaussians(d.holdout, d.radius, d.sigma, d.holdout_seed);
    let mut correct = 0;
    for (x, y) in &held {
        if predict(&outcome.model, x, cfg)?.0 == *y {
            correct += 1;
        }
    }
    eprintln!("held-out accuracy {correct}/{}", held.len());
    eprintln!("wrote {}", model_path.display());
    Ok(())
}

pub fn train_controller(cfg: &RunConfig) -> CliResult {
    require_task(cfg, TaskKind::Controller)?;
    let ct = cfg.controller_train.clone();
    let outcome = train_segway(cfg.network.hidden, &ct)?;
    let model = ControllerModel {
        controller: outcome.controller,
        p: outcome.p,
        alpha: ClassK::default(),
        kappa: ct.kappa,
        level: None,
    };
    let model_path = cfg.model_path();
    Model::Controller(model).save(&model_path)?;
    let hp = cfg.output_dir.join("history.csv");
    let mut w = create(&hp)?;
    write_history_csv(&outcome.history, &mut w).and_then(|_| w.flush()).map_err(io_at(&hp))?;
    let ip = cfg.output_dir.join("imitation.csv");
    let mut w = create(&ip)?;
    (|| {
        writeln!(w, "iter,mse")?;
        for (i, l) in outcome.imitation_history.iter().enumerate() {
            writeln!(w, "{i},{l}")?;
        }
        w.flush()
    })()
    .map_err(io_at(&ip))?;
    eprintln!(
        "imitation mse {:.3e}, final hinge {:.3e}",
        outcome.imitation_history.last().copied().unwrap_or(f64::NAN),
        outcome.history.last().map_or(f64::NAN, |r| r.loss)
    );
    eprintln!("wrote {}", model_path.display());
    Ok(())
}

#[derive(Serialize)]
struct PointResult {
    index: usize,
    x: Vec<f64>,
    label: usize,
    predicted: usize,
    report: CertificationReport,
}

#[derive(Serialize)]
struct ClassifierReport {
    evaluated: usize,
    certified: usize,
    results: Vec<PointResult>,
}

pub fn certify_classifier(cfg: &RunConfig) -> CliResult {
    require_task(cfg, TaskKind::Classifier)?;
    let mut model = load_classifier(cfg)?;
    model.potential = cfg.certify.potential;
    let n = model.n_classes();
    let c = &cfg.certify;
    let band = match c.band {
        Some([lo, hi]) => LevelBand::new(lo, hi)?,
        None => LevelBand::classifier_default(c.potential, n)?,
    };
    let cert = ClassifierCertConfig {
        eps: c.eps,
        band,
        horizon: cfg.integrator.horizon,
        mode: c.mode,
        neighborhood_radius: c.neighborhood_radius.unwrap_or(1.0 / c.density as f64),
        delta: c.delta,
    };
    let mut samples: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    let mut results = Vec::new();
    for (index, (x, label)) in classifier_inputs(cfg).into_iter().enumerate() {
        if x.len() != model.net.input_dim() {
            return Err(CliError::Usage(format!("input {index} has dimension {}, expected {}", x.len(), model.net.input_dim())));
        }
        let (predicted, _) = predict(&model, &x, cfg)?;
        let label = label.unwrap_or(predicted);
        if label >= n {
            return Err(CliError::Usage(format!("input {index}: label {label} out of range")));
        }
        let points = match samples.entry(label) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(certification_samples(c.potential, label, n, c.density, &band)?),
        };
        let report = invariode::verify::certify_classifier(&model, &x, label, &cert, points)?;
        results.push(PointResult {
            index,
            x,
            label,
            predicted,
            report,
        });
    }
    let out = ClassifierReport {
        evaluated: results.len(),
        certified: results.iter().filter(|r| r.report.is_certified()).count(),
        results,
    };
    let path = cfg.output_dir.join("report.json");
    write_text(&path, &serde_json::to_string_pretty(&out).expect("report serializes"))?;
    eprintln!("certified {}/{}", out.certified, out.evaluated);
    if out.certified < out.evaluated {
        return Err(CliError::Failed(format!(
            "{} of {} inputs failed certification; see {}",
            out.evaluated - out.certified,
            out.evaluated,
            path.display()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct Attempt {
    level: f64,
    r: f64,
    violations: usize,
}

#[derive(Serialize)]
struct ControllerReport {
    level: Option<f64>,
    attempts: Vec<Attempt>,
    report: CertificationReport,
}

fn domain_box(cfg: &RunConfig, dim: usize) -> CliResult<IntervalBox> {
    let d = cfg.certify.domain;
    Ok(IntervalBox::new(vec![-d; dim], vec![d; dim])?)
}

pub fn certify_controller(cfg: &RunConfig) -> CliResult {
    require_task(cfg, TaskKind::Controller)?;
    let mut model = load_controller(cfg)?;
    let plant = segway_graph();
    let ctrl = model.controller.materialize()?;
    let system = ClosedLoop {
        plant: &plant,
        controller: &ctrl,
    };
    let domain = domain_box(cfg, 3)?;
    let s = cfg.certify.search;
    let out = match cfg.certify.level {
        Some(level) => {
            let icfg = InvariantCertConfig {
                r: relative_spacing(&model.p, level, s.relative_r)?,
                delta: s.delta,
                budget: s.budget.into(),
                fail_fast: false,
            };
            let report = certify_invariant_set(&system, &model.p, level, &domain, &icfg)?;
            ControllerReport {
                level: report.is_certified().then_some(level),
                attempts: vec![Attempt {
                    level,
                    r: icfg.r,
                    violations: report.violation_count,
                }],
                report,
            }
        }
        None => {
            let found = search_invariant_level(&system, &model.p, &domain, &s)?;
            ControllerReport {
                level: found.level,
                attempts: found
                    .attempts
                    .iter()
                    .map(|&(level, r, violations)| Attempt { level, r, violations })
                    .collect(),
                report: found.report,
            }
        }
    };
    let path = cfg.output_dir.join("report.json");
    write_text(&path, &serde_json::to_string_pretty(&out).expect("report serializes"))?;
    match out.level {
        Some(level) => {
            model.level = Some(level);
            Model::Controller(model).save(&cfg.model_path())?;
            eprintln!("certified level {level:.6e} ({} boxes)", out.report.samples);
            Ok(())
        }
        None => Err(CliError::Failed(format!("no certified level; see {}", path.display()))),
    }
}

fn quad(p: &DMatrix<f64>, x: &[f64]) -> f64 {
    let v = DVector::from_column_slice(x);
    (v.transpose() * p * &v)[(0, 0)]
}

pub fn rollout(cfg: &RunConfig) -> CliResult {
    let path = cfg.output_dir.join("trajectories.csv");
    let mut w = create(&path)?;
    match cfg.task {
        TaskKind::Classifier => {
            let model = load_classifier(cfg)?;
            let n = model.n_classes();
            let header: Vec<String> = (0..n).map(|i| format!("eta_{i}")).collect();
            writeln!(w, "traj,t,{}", header.join(",")).map_err(io_at(&path))?;
            for (k, (x, _)) in classifier_inputs(cfg).iter().enumerate() {
                let (_, traj) = predict(&model, x, cfg)?;
                for (t, s) in traj.times.iter().zip(&traj.states) {
                    let row: Vec<String> = s.iter().map(f64::to_string).collect();
                    writeln!(w, "{k},{t},{}", row.join(",")).map_err(io_at(&path))?;
                }
            }
        }
        TaskKind::Controller => {
            let model = load_controller(cfg)?;
            let level = model
                .level
                .or(cfg.certify.level)
                .ok_or_else(|| CliError::Usage("controller rollouts need a certified level (run certify-controller)".into()))?;
            let ctrl = model.controller.materialize()?;
            let hw = ellipsoid_half_widths(&model.p, level)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            writeln!(w, "traj,t,{},V", SEGWAY_COLUMNS.join(",")).map_err(io_at(&path))?;
            let f = |x: &[f64]| closed_loop_derivative(&Segway, x, &ctrl);
            for k in 0..cfg.rollout.count {
                let x0 = loop {
                    let x: Vec<f64> = hw.iter().map(|h| rng.random_range(-h..=*h)).collect();
                    if quad(&model.p, &x) <= level {
                        break x;
                    }
                };
                let traj = integrate(&f, &x0, &cfg.integrator, StateSpace::Euclidean)?;
                for (t, s) in traj.times.iter().zip(&traj.states) {
                    writeln!(w, "{k},{t},{},{},{},{}", s[0], s[1], s[2], quad(&model.p, s)).map_err(io_at(&path))?;
                }
            }
        }
    }
    w.flush().map_err(io_at(&path))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn sample(cfg: &RunConfig) -> CliResult {
    let s = &cfg.sample;
    let points = match s.label {
        Some(label) => sample_decision_boundary(s.n, s.density, label)?.points,
        None => sample_simplex_grid(s.n, s.density)?.points,
    };
    let path = cfg.output_dir.join("samples.bin");
    write_samples(&path, &points, s.density, s.label)?;
    eprintln!("wrote {} samples to {}", points.len(), path.display());
    Ok(())
}

/// A CSV file read as header plus rows of numbers.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_table(path: &Path) -> CliResult<Table> {
    if !path.exists() {
        return Err(CliError::Usage(format!("missing artifact {}", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| CliError::Usage(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Usage(format!("{} line {}: {e}", path.display(), i + 2)))?;
        if row.len() != header.len() {
            return Err(CliError::Usage(format!("{} line {}: wrong column count", path.display(), i + 2)));
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

fn column(t: &Table, name: &str, path: &Path) -> CliResult<usize> {
    t.header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Usage(format!("{} has no `{name}` column", path.display())))
}

/// Writes the plot data for the configured task:
/// - classifier: `simplex_trajectories.csv` (`traj,t,eta_0,...`), the rolled-out trajectories;
/// - controller: `vdot_grid.csv` (`phi,phi_dot,vdot`), `V̇` on a grid at `v = 0`,
///   and `lyapunov_curves.csv` (`traj,t,V`), the potential along each trajectory.
pub fn export_plots(cfg: &RunConfig) -> CliResult {
    let dir = &cfg.output_dir;
    let traj_path = dir.join("trajectories.csv");
    let written: Vec<PathBuf> = match cfg.task {
        TaskKind::Classifier => {
            load_classifier(cfg)?;
            let t = read_table(&traj_path)?;
            column(&t, "traj", &traj_path)?;
            column(&t, "t", &traj_path)?;
            let out = dir.join("simplex_trajectories.csv");
            let mut w = create(&out)?;
            (|| {
                writeln!(w, "{}", t.header.join(","))?;
                for r in &t.rows {
                    let cells: Vec<String> = r.iter().map(f64::to_string).collect();
                    writeln!(w, "{}", cells.join(","))?;
                }
                w.flush()
            })()
            .map_err(io_at(&out))?;
            vec![out]
        }
        TaskKind::Controller => {
            let model = load_controller(cfg)?;
            let t = read_table(&traj_path)?;
            let (ti, tt, vi) = (
                column(&t, "traj", &traj_path)?,
                column(&t, "t", &traj_path)?,
                column(&t, "V", &traj_path)?,
            );
            let ctrl = model.controller.materialize()?;
            let half = match model.level {
                Some(level) => {
                    let hw = ellipsoid_half_widths(&model.p, level)?;
                    [hw[0], hw[2]]
                }
                None => [cfg.certify.domain; 2],
            };
            let g = cfg.plots.grid.max(2);
            let a = dir.join("vdot_grid.csv");
            let mut w = create(&a)?;
            writeln!(w, "phi,phi_dot,vdot").map_err(io_at(&a))?;
            for i in 0..g {
                let phi = -half[0] + 2.0 * half[0] * i as f64 / (g - 1) as f64;
                for j in 0..g {
                    let phi_dot = -half[1] + 2.0 * half[1] * j as f64 / (g - 1) as f64;
                    let x = [phi, 0.0, phi_dot];
                    let f = closed_loop_derivative(&Segway, &x, &ctrl)?;
                    let px = &model.p * DVector::from_column_slice(&x);
                    let vdot = 2.0 * px.dot(&DVector::from_column_slice(&f));
                    writeln!(w, "{phi},{phi_dot},{vdot}").map_err(io_at(&a))?;
                }
            }
            w.flush().map_err(io_at(&a))?;
            let b = dir.join("lyapunov_curves.csv");
            let mut w = create(&b)?;
            (|| {
                writeln!(w, "traj,t,V")?;
                for r in &t.rows {
                    writeln!(w, "{},{},{}", r[ti], r[tt], r[vi])?;
                }
                w.flush()
            })()
            .map_err(io_at(&b))?;
            vec![a, b]
        }
    };
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}
