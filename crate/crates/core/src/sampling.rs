//! Deterministic covering samples: simplex grids, decision-boundary points
//! and rejection-filtered level bands.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{LevelBand, Potential, PotentialKind};

pub const DEFAULT_BUDGET: u128 = 100_000_000;

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) at every step
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexGrid {
    pub n: usize,
    pub density: usize,
    pub points: Vec<Vec<f64>>,
}

/// Calls `visit` on every composition of `total` into `n` nonnegative parts,
/// in lexicographic order.
pub fn for_each_composition(n: usize, total: usize, mut visit: impl FnMut(&[usize])) {
    fn rec(buf: &mut Vec<usize>, n: usize, left: usize, visit: &mut impl FnMut(&[usize])) {
        if buf.len() + 1 == n {
            buf.push(left);
            visit(buf);
            buf.pop();
            return;
        }
        for v in 0..=left {
            buf.push(v);
            rec(buf, n, left - v, visit);
            buf.pop();
        }
    }
    if n == 0 {
        return;
    }
    rec(&mut Vec::with_capacity(n), n, total, &mut visit);
}

pub fn sample_simplex_grid(n: usize, density: usize) -> Result<SimplexGrid> {
    sample_simplex_grid_with_budget(n, density, DEFAULT_BUDGET)
}

pub fn sample_simplex_grid_with_budget(n: usize, density: usize, budget: u128) -> Result<SimplexGrid> {
    if n < 1 || density < 1 {
        return Err(Error::invalid("grid needs n >= 1 and density >= 1"));
    }
    let count = binomial((density + n - 1) as u64, (n - 1) as u64);
    if count > budget {
        return Err(Error::BudgetExceeded { requested: count, budget });
    }
    let mut points = Vec::with_capacity(count as usize);
    let d = density as f64;
    for_each_composition(n, density, |c| points.push(c.iter().map(|&v| v as f64 / d).collect()));
    Ok(SimplexGrid { n, density, points })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySampleSet {
    pub n: usize,
    pub density: usize,
    pub label: usize,
    pub points: Vec<Vec<f64>>,
}

/// Visits each `k`-subset of `1..m` in lexicographic order.
fn for_each_subset(m: usize, k: usize, visit: &mut impl FnMut(&[usize])) {
    fn rec(buf: &mut Vec<usize>, next: usize, m: usize, k: usize, visit: &mut impl FnMut(&[usize])) {
        if buf.len() == k {
            visit(buf);
            return;
        }
        for v in next..m {
            if m - v < k - buf.len() {
                break;
            }
            buf.push(v);
            rec(buf, v + 1, m, k, visit);
            buf.pop();
        }
    }
    rec(&mut Vec::with_capacity(k), 1, m, k, visit);
}

struct BoundaryDp {
    memo: HashMap<(usize, usize), Vec<Vec<u32>>>,
    budget: u128,
}

impl BoundaryDp {
    /// All integer `k`-vectors `a` with sum `j` and `a[0] = max(a[1..])`.
    fn sol(&mut self, j: usize, k: usize) -> Result<Vec<Vec<u32>>> {
        if let Some(v) = self.memo.get(&(j, k)) {
            return Ok(v.clone());
        }
        let out = if j == 0 {
            vec![vec![0; k]]
        } else if k == 2 {
            if j % 2 == 0 {
                vec![vec![(j / 2) as u32; 2]]
            } else {
                Vec::new()
            }
        } else {
            let mut out = Vec::new();
            // l coordinates among 1..k are zero; the remaining k − l entries are
            // positive, and subtracting one from each leaves a smaller solution.
            for l in 0..=k - 2 {
                let Some(rest) = j.checked_sub(k - l) else { continue };
                let sub = self.sol(rest, k - l)?;
                if sub.is_empty() {
                    continue;
                }
                for_each_subset(k, k - l - 1, &mut |pos| {
                    for a in &sub {
                        let mut w = vec![0u32; k];
                        w[0] = a[0] + 1;
                        for (idx, &p) in pos.iter().enumerate() {
                            w[p] = a[idx + 1] + 1;
                        }
                        out.push(w);
                    }
                });
                if out.len() as u128 > self.budget {
                    return Err(Error::BudgetExceeded {
                        requested: out.len() as u128,
                        budget: self.budget,
                    });
                }
            }
            out
        };
        self.memo.insert((j, k), out.clone());
        Ok(out)
    }
}

pub fn sample_decision_boundary(n: usize, density: usize, label: usize) -> Result<BoundarySampleSet> {
    sample_decision_boundary_with_budget(n, density, label, DEFAULT_BUDGET)
}

/// Points `s/density` with integer `s`, `Σs = density` and `s_y = max_{i≠y} s_i`,
/// in lexicographic order.
pub fn sample_decision_boundary_with_budget(
    n: usize,
    density: usize,
    label: usize,
    budget: u128,
) -> Result<BoundarySampleSet> {
    if n < 2 || label >= n {
        return Err(Error::invalid("boundary sampling needs n >= 2 and label < n"));
    }
    if density == 0 || density % 2 != 0 || density % n == 1 {
        return Err(Error::invalid(format!(
            "density {density} must be even, positive and not congruent to 1 mod {n}"
        )));
    }
    let mut dp = BoundaryDp {
        memo: HashMap::new(),
        budget,
    };
    let raw = dp.sol(density, n)?;
    let mut ints: Vec<Vec<u32>> = raw
        .into_iter()
        .map(|w| {
            let mut v = Vec::with_capacity(n);
            v.extend_from_slice(&w[1..=label]);
            v.push(w[0]);
            v.extend_from_slice(&w[label + 1..]);
            v
        })
        .collect();
    ints.sort_unstable();
    let d = density as f64;
    Ok(BoundarySampleSet {
        n,
        density,
        label,
        points: ints
            .into_iter()
            .map(|w| w.into_iter().map(|v| v as f64 / d).collect())
            .collect(),
    })
}

/// Points whose `1/density` neighborhoods cover the certification region of a
/// classifier potential: the decision boundary for the margin potential, and
/// the grid points within `1/density` of the level band for MLL.
pub fn certification_samples(
    kind: PotentialKind,
    label: usize,
    n: usize,
    density: usize,
    band: &LevelBand,
) -> Result<Vec<Vec<f64>>> {
    match kind {
        PotentialKind::Margin => Ok(sample_decision_boundary(n, density, label)?.points),
        PotentialKind::Mll => {
            let v = Potential::mll(label, n)?;
            let slack = 1.0 / density as f64;
            let widened = LevelBand::new(band.lo - slack, band.hi + slack)?;
            let mut out = Vec::new();
            for p in sample_simplex_grid(n, density)?.points {
                if widened.contains(v.value(&p)?) {
                    out.push(p);
                }
            }
            Ok(out)
        }
        PotentialKind::Quadratic => Err(Error::invalid("quadratic potentials use rejection sampling")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionBand {
    pub r: f64,
    pub c_lo: f64,
    pub c_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionResult {
    pub accepted: Vec<Vec<f64>>,
    pub band: RejectionBand,
}

/// Keeps the grid points whose potential lies within `target ∓ L_V(√n/2)r`,
/// where `L_V` is the potential's Lipschitz constant over a ball containing
/// every grid cell.
pub fn rejection_filter(
    grid: &[Vec<f64>],
    r: f64,
    potential: &Potential,
    target: f64,
) -> Result<RejectionResult> {
    if !(r > 0.0) {
        return Err(Error::invalid("grid spacing must be positive"));
    }
    let n = potential.dim();
    let half_diag = (n as f64).sqrt() * r / 2.0;
    let radius = grid
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
        + half_diag;
    let margin = potential.lipschitz(radius) * half_diag;
    let band = RejectionBand {
        r,
        c_lo: target - margin,
        c_hi: target + margin,
    };
    let mut accepted = Vec::new();
    for p in grid {
        let v = potential.value(p)?;
        if band.c_lo <= v && v <= band.c_hi {
            accepted.push(p.clone());
        }
    }
    if accepted.is_empty() {
        return Err(Error::EmptyBand);
    }
    Ok(RejectionResult { accepted, band })
}

/// Centers of the cells of side `r` tiling `[lo, hi]` (per axis).
pub fn box_grid(lo: &[f64], hi: &[f64], r: f64, budget: u128) -> Result<Vec<Vec<f64>>> {
    if lo.len() != hi.len() || !(r > 0.0) {
        return Err(Error::invalid("box grid needs matching bounds and positive spacing"));
    }
    let counts: Vec<usize> = lo
        .iter()
        .zip(hi)
        .map(|(a, b)| (((b - a) / r).ceil().max(1.0)) as usize)
        .collect();
    let total = counts.iter().fold(1u128, |acc, &c| acc.saturating_mul(c as u128));
    if total > budget {
        return Err(Error::BudgetExceeded { requested: total, budget });
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut idx = vec![0usize; lo.len()];
    loop {
        out.push(idx.iter().zip(lo).map(|(&i, &a)| a + (i as f64 + 0.5) * r).collect());
        let mut d = lo.len();
        loop {
            if d == 0 {
                return Ok(out);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < counts[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Half-widths of the axis-aligned box enclosing `{x : xᵀPx ≤ c}`.
pub fn ellipsoid_half_widths(p: &DMatrix<f64>, c: f64) -> Result<Vec<f64>> {
    let inv = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("P must be positive definite"))?
        .inverse();
    Ok((0..p.nrows()).map(|i| (c * inv[(i, i)]).sqrt()).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub n: usize,
    pub density: usize,
    pub label: Option<usize>,
    pub count: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `n` little-endian f64 per point to `path` and the metadata to
/// `path.json`.
pub fn write_samples(path: &Path, points: &[Vec<f64>], meta_density: usize, label: Option<usize>) -> Result<()> {
    let n = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != n) {
        return Err(Error::invalid("all samples must have the same dimension"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in points {
        for v in p {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = SampleSidecar {
        n,
        density: meta_density,
        label,
        count: points.len(),
    };
    let sp = sidecar_path(path);
    let json = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    std::fs::write(&sp, json).map_err(|e| Error::io(&sp, e))
}

pub fn read_samples(path: &Path) -> Result<(SampleSidecar, Vec<Vec<f64>>)> {
    let sp = sidecar_path(path);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: SampleSidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: crate::model::byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != side.n * side.count * 8 {
        return Err(Error::invalid(format!(
            "{} holds {} bytes, sidecar expects {}",
            path.display(),
            bytes.len(),
            side.n * side.count * 8
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let points = if side.n == 0 {
        Vec::new()
    } else {
        vals.chunks(side.n).map(<[f64]>::to_vec).collect()
    };
    Ok((side, points))
}
