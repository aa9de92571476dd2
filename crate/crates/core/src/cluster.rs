//! Alternating solvers for the weighted point/target objective
//! `L = ½ Σ_i Σ_j u_ij² ‖x_i − t_j‖²`.
//!
//! Mode A fixes the targets and alternates a hard top-k assignment (each
//! target takes its `k` nearest points) with gradient steps on the points.
//! Mode B fixes the points and alternates closed-form fuzzy memberships
//! (row-stochastic, inversely proportional to squared distance) with
//! membership-weighted target means. The two modes use incompatible
//! membership constraints and are never mixed within one run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Points = Vec<Vec<f64>>;
/// Memberships, `m × n` (point-major).
pub type Memberships = Vec<Vec<f64>>;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn check_dims(x: &Points, t: &Points) -> Result<usize> {
    let dim = x.first().or(t.first()).map_or(0, Vec::len);
    if x.iter().chain(t).any(|v| v.len() != dim) {
        return Err(Error::Shape("points and targets must share one dimension".into()));
    }
    Ok(dim)
}

pub fn objective(x: &Points, t: &Points, u: &Memberships) -> f64 {
    let mut total = 0.0;
    for (xi, ui) in x.iter().zip(u) {
        for (tj, &uij) in t.iter().zip(ui) {
            if uij != 0.0 {
                total += uij * uij * sq_dist(xi, tj);
            }
        }
    }
    0.5 * total
}

/// Hard assignment: for each target, 1 on its `k` nearest points (ties by
/// smaller point index), 0 elsewhere.
pub fn assign_topk(x: &Points, t: &Points, k: usize) -> Result<Memberships> {
    check_dims(x, t)?;
    let m = x.len();
    if k == 0 || k > m {
        return Err(Error::Param(format!("k = {k} must lie in 1..={m}")));
    }
    let mut u = vec![vec![0.0; t.len()]; m];
    for (j, tj) in t.iter().enumerate() {
        let mut order: Vec<(f64, usize)> = x.iter().map(|xi| sq_dist(xi, tj)).zip(0..).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &order[..k] {
            u[i][j] = 1.0;
        }
    }
    Ok(u)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Param(format!("step size {alpha} must lie in (0, 1)")));
    }
    Ok(())
}

/// Batch gradient step `x_i ← (1 − α Σ_j u_ij²) x_i + α Σ_j u_ij² t_j`.
pub fn step_x(x: &Points, t: &Points, u: &Memberships, alpha: f64) -> Result<Points> {
    check_alpha(alpha)?;
    check_dims(x, t)?;
    Ok(x.iter()
        .zip(u)
        .map(|(xi, ui)| {
            let w: f64 = ui.iter().map(|v| v * v).sum();
            let mut out: Vec<f64> = xi.iter().map(|v| (1.0 - alpha * w) * v).collect();
            for (tj, &uij) in t.iter().zip(ui) {
                let a = alpha * uij * uij;
                out.iter_mut().zip(tj).for_each(|(o, tv)| *o += a * tv);
            }
            out
        })
        .collect())
}

/// Online step for one target: selected points move to `(1 − α) x_i + α t_j`.
pub fn step_x_online(x: &Points, target: &[f64], selected: &[usize], alpha: f64) -> Result<Points> {
    check_alpha(alpha)?;
    let mut out = x.clone();
    for &i in selected {
        let xi = out.get_mut(i).ok_or_else(|| Error::Contract(format!("point index {i} out of range")))?;
        xi.iter_mut().zip(target).for_each(|(v, tv)| *v = (1.0 - alpha) * *v + alpha * tv);
    }
    Ok(out)
}

/// Closed-form fuzzy memberships `u_ij ∝ 1/‖x_i − t_j‖²`, normalised per point.
/// A point coinciding with a target gets membership 1 on the first such target.
pub fn fuzzy_memberships(x: &Points, t: &Points) -> Memberships {
    x.iter()
        .map(|xi| {
            let d: Vec<f64> = t.iter().map(|tj| sq_dist(xi, tj)).collect();
            if let Some(hit) = d.iter().position(|&v| v == 0.0) {
                let mut row = vec![0.0; t.len()];
                row[hit] = 1.0;
                return row;
            }
            let inv: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
            let z: f64 = inv.iter().sum();
            inv.iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Targets as `u²`-weighted means of the points. A target with zero total
/// weight keeps its previous position.
pub fn weighted_targets(x: &Points, u: &Memberships, prev: &Points) -> Points {
    prev.iter()
        .enumerate()
        .map(|(j, tj)| {
            let mut num = vec![0.0; tj.len()];
            let mut den = 0.0;
            for (xi, ui) in x.iter().zip(u) {
                let w = ui[j] * ui[j];
                den += w;
                num.iter_mut().zip(xi).for_each(|(a, b)| *a += w * b);
            }
            if den > 0.0 {
                num.iter().map(|v| v / den).collect()
            } else {
                tj.clone()
            }
        })
        .collect()
}

/// One fuzzy step: memberships for the given targets, then the targets
/// those memberships imply.
pub fn fuzzy_update(x: &Points, t: &Points) -> Result<(Memberships, Points)> {
    check_dims(x, t)?;
    let u = fuzzy_memberships(x, t);
    let t2 = weighted_targets(x, &u, t);
    Ok((u, t2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Hard top-k assignment with point updates; targets fixed.
    A,
    /// Fuzzy memberships with target updates; points fixed.
    B,
}

/// Problem description, also the JSON input of the `oracle` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterProblem {
    pub mode: Mode,
    pub points: Points,
    pub targets: Points,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_iters")]
    pub iters: usize,
}

fn default_k() -> usize {
    1
}
fn default_alpha() -> f64 {
    0.5
}
fn default_iters() -> usize {
    20
}

impl ClusterProblem {
    pub fn validate(&self) -> Result<()> {
        check_dims(&self.points, &self.targets)?;
        if self.points.is_empty() || self.targets.is_empty() {
            return Err(Error::Config("points and targets must be non-empty".into()));
        }
        if self.iters == 0 {
            return Err(Error::Config("iters must be at least 1".into()));
        }
        if self.mode == Mode::A {
            check_alpha(self.alpha)?;
            if self.k == 0 || self.k > self.points.len() {
                return Err(Error::Config(format!("k = {} must lie in 1..={}", self.k, self.points.len())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterTrace {
    /// Objective before the first iteration, then after each iteration.
    pub objectives: Vec<f64>,
    /// Memberships in effect after each iteration (index 0: initial).
    pub memberships: Vec<Memberships>,
    pub points: Points,
    pub targets: Points,
}

impl ClusterTrace {
    pub fn last_memberships(&self) -> &Memberships {
        self.memberships.last().expect("trace has an initial entry")
    }

    /// First iteration whose objective exceeds its predecessor by more than `tol`.
    pub fn first_increase(&self, tol: f64) -> Option<usize> {
        self.objectives.windows(2).position(|w| w[1] > w[0] + tol).map(|i| i + 1)
    }
}

/// Runs `iters` alternating iterations of the problem's mode.
pub fn alternate(problem: &ClusterProblem) -> Result<ClusterTrace> {
    problem.validate()?;
    let mut x = problem.points.clone();
    let mut t = problem.targets.clone();
    let mut u = match problem.mode {
        Mode::A => assign_topk(&x, &t, problem.k)?,
        Mode::B => fuzzy_memberships(&x, &t),
    };
    let mut objectives = vec![objective(&x, &t, &u)];
    let mut memberships = vec![u.clone()];
    for _ in 0..problem.iters {
        match problem.mode {
            Mode::A => {
                x = step_x(&x, &t, &u, problem.alpha)?;
                u = assign_topk(&x, &t, problem.k)?;
            }
            Mode::B => {
                t = weighted_targets(&x, &u, &t);
                u = fuzzy_memberships(&x, &t);
            }
        }
        objectives.push(objective(&x, &t, &u));
        memberships.push(u.clone());
    }
    Ok(ClusterTrace { objectives, memberships, points: x, targets: t })
}
