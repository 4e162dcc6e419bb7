//! JSON model files.
//!
//! ```json
//! {
//!   "task": "classifier",
//!   "layers": [
//!     {"type": "orthogonal", "branch": "x", "shape": [64, 2], "data": [...], "bias": [...]},
//!     {"type": "relu", "branch": "trunk"},
//!     ...
//!   ],
//!   "alpha": {"c1": 100.0, "c2": 0.02},
//!   "potential": {"kind": "margin"},
//!   "kappa": 0.085
//! }
//! ```
//!
//! `data` holds the weight row-major for dense layers and the square Cayley
//! parameter (side `max(rows, cols)`) for orthogonal layers. Classifier layers
//! carry a `branch` of `x`, `eta` or `trunk`; controller layers omit it.
//! Floats are written in shortest round-trip form, so evaluations survive a
//! save/load cycle exactly.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DynamicsNet, Layer, Sequential};
use crate::qp::ClassK;
use crate::simplex::{Potential, PotentialKind};

/// Byte offset of a 1-based `(line, column)` position as reported by serde_json.
pub fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn parse_err(text: &str, e: &serde_json::Error) -> Error {
    Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    X,
    Eta,
    #[default]
    Trunk,
}

fn is_default_branch(b: &Branch) -> bool {
    *b == Branch::Trunk
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum LayerRecord {
    Dense {
        #[serde(default, skip_serializing_if = "is_default_branch")]
        branch: Branch,
        shape: [usize; 2],
        data: Vec<f64>,
        bias: Vec<f64>,
    },
    Orthogonal {
        #[serde(default, skip_serializing_if = "is_default_branch")]
        branch: Branch,
        shape: [usize; 2],
        data: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu {
        #[serde(default, skip_serializing_if = "is_default_branch")]
        branch: Branch,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum PotentialRecord {
    Mll,
    Margin,
    Quadratic { p: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classifier,
    Controller,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRecord {
    task: Task,
    layers: Vec<LayerRecord>,
    alpha: ClassK,
    potential: PotentialRecord,
    kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    level: Option<f64>,
}

/// A trained neural-ODE classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub net: DynamicsNet,
    pub alpha: ClassK,
    pub potential: PotentialKind,
    pub kappa: f64,
}

impl ClassifierModel {
    pub fn n_classes(&self) -> usize {
        self.net.state_dim()
    }

    pub fn potential_for(&self, label: usize) -> Result<Potential> {
        Potential::for_label(self.potential, label, self.n_classes())
    }
}

/// A state-feedback controller with its quadratic Lyapunov matrix and, once
/// certified, the invariant level.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerModel {
    pub controller: Sequential,
    pub p: DMatrix<f64>,
    pub alpha: ClassK,
    pub kappa: f64,
    pub level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Classifier(ClassifierModel),
    Controller(ControllerModel),
}

fn layer_record(l: &Layer, branch: Branch) -> LayerRecord {
    let flat = |m: &DMatrix<f64>| -> Vec<f64> {
        (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
    };
    match l {
        Layer::Dense { w, b } => LayerRecord::Dense {
            branch,
            shape: [w.nrows(), w.ncols()],
            data: flat(w),
            bias: b.as_slice().to_vec(),
        },
        Layer::OrthogonalDense { a, rows, cols, b } => LayerRecord::Orthogonal {
            branch,
            shape: [*rows, *cols],
            data: flat(a),
            bias: b.as_slice().to_vec(),
        },
        Layer::Relu => LayerRecord::Relu { branch },
    }
}

fn layer_from_record(rec: &LayerRecord, index: usize) -> Result<(Branch, Layer)> {
    let bad = |msg: String| Error::invalid(format!("layer {index}: {msg}"));
    match rec {
        LayerRecord::Dense { branch, shape, data, bias } => {
            let [r, c] = *shape;
            if data.len() != r * c {
                return Err(bad(format!("dense shape {r}x{c} needs {} values, got {}", r * c, data.len())));
            }
            let w = DMatrix::from_row_slice(r, c, data);
            Ok((*branch, Layer::dense(w, DVector::from_column_slice(bias)).map_err(|e| bad(e.to_string()))?))
        }
        LayerRecord::Orthogonal { branch, shape, data, bias } => {
            let [r, c] = *shape;
            let k = r.max(c);
            if data.len() != k * k {
                return Err(bad(format!("orthogonal shape {r}x{c} needs {} values, got {}", k * k, data.len())));
            }
            let a = DMatrix::from_row_slice(k, k, data);
            let l = Layer::orthogonal(a, r, c, DVector::from_column_slice(bias)).map_err(|e| bad(e.to_string()))?;
            Ok((*branch, l))
        }
        LayerRecord::Relu { branch } => Ok((*branch, Layer::Relu)),
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("potential matrix must be square"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl Model {
    fn to_record(&self) -> ModelRecord {
        match self {
            Model::Classifier(m) => {
                let mut layers: Vec<LayerRecord> = m.net.x_branch.layers.iter().map(|l| layer_record(l, Branch::X)).collect();
                layers.push(layer_record(&m.net.eta_in, Branch::Eta));
                layers.extend(m.net.trunk.layers.iter().map(|l| layer_record(l, Branch::Trunk)));
                ModelRecord {
                    task: Task::Classifier,
                    layers,
                    alpha: m.alpha,
                    potential: match m.potential {
                        PotentialKind::Mll => PotentialRecord::Mll,
                        PotentialKind::Margin => PotentialRecord::Margin,
                        PotentialKind::Quadratic => PotentialRecord::Quadratic { p: Vec::new() },
                    },
                    kappa: m.kappa,
                    level: None,
                }
            }
            Model::Controller(m) => ModelRecord {
                task: Task::Controller,
                layers: m.controller.layers.iter().map(|l| layer_record(l, Branch::Trunk)).collect(),
                alpha: m.alpha,
                potential: PotentialRecord::Quadratic { p: matrix_rows(&m.p) },
                kappa: m.kappa,
                level: m.level,
            },
        }
    }

    fn from_record(rec: ModelRecord) -> Result<Self> {
        let alpha = ClassK::new(rec.alpha.c1, rec.alpha.c2)?;
        if !rec.kappa.is_finite() || rec.kappa < 0.0 {
            return Err(Error::invalid("kappa must be finite and nonnegative"));
        }
        let mut parsed = Vec::with_capacity(rec.layers.len());
        for (i, l) in rec.layers.iter().enumerate() {
            parsed.push(layer_from_record(l, i)?);
        }
        match rec.task {
            Task::Classifier => {
                let potential = match rec.potential {
                    PotentialRecord::Mll => PotentialKind::Mll,
                    PotentialRecord::Margin => PotentialKind::Margin,
                    PotentialRecord::Quadratic { .. } => {
                        return Err(Error::invalid("classifier potentials must be mll or margin"))
                    }
                };
                let mut x = Vec::new();
                let mut eta = Vec::new();
                let mut trunk = Vec::new();
                for (b, l) in parsed {
                    match b {
                        Branch::X => x.push(l),
                        Branch::Eta => eta.push(l),
                        Branch::Trunk => trunk.push(l),
                    }
                }
                if eta.len() != 1 {
                    return Err(Error::invalid(format!("expected exactly one eta layer, found {}", eta.len())));
                }
                let net = DynamicsNet::new(Sequential::new(x), eta.pop().unwrap(), Sequential::new(trunk))?;
                Ok(Model::Classifier(ClassifierModel {
                    net,
                    alpha,
                    potential,
                    kappa: rec.kappa,
                }))
            }
            Task::Controller => {
                let PotentialRecord::Quadratic { p } = &rec.potential else {
                    return Err(Error::invalid("controller potentials must be quadratic"));
                };
                let p = matrix_from_rows(p)?;
                Potential::quadratic(p.clone())?;
                let controller = Sequential::new(parsed.into_iter().map(|(_, l)| l).collect());
                let out = controller.check_shapes(p.nrows())?;
                if out != 1 {
                    return Err(Error::invalid(format!("controller must output a scalar, got {out}")));
                }
                Ok(Model::Controller(ControllerModel {
                    controller,
                    p,
                    alpha,
                    kappa: rec.kappa,
                    level: rec.level,
                }))
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_record()).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: ModelRecord = serde_json::from_str(text).map_err(|e| parse_err(text, &e))?;
        Self::from_record(rec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
