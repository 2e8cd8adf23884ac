//! Generalized pattern search with an extreme-barrier constraint treatment.
//!
//! The poll set is the `2n` coordinate directions scaled by the mesh size,
//! visited in the fixed order `+e₁, −e₁, …, +e_n, −e_n`. The first feasible
//! poll point that strictly improves the objective is accepted and the mesh
//! is multiplied by the expansion factor; a poll without improvement
//! multiplies it by the contraction factor. The search ends once the mesh
//! drops below the tolerance or the evaluation budget is spent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::SearchBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatternSearchConfig {
    pub initial_mesh: f64,
    pub mesh_tolerance: f64,
    /// Relaxed constraints count as satisfied up to this value.
    pub constraint_tolerance: f64,
    pub contraction: f64,
    pub expansion: f64,
    /// Budget on objective evaluations, the start point included.
    pub max_evals: usize,
}

impl Default for PatternSearchConfig {
    fn default() -> Self {
        PatternSearchConfig {
            initial_mesh: 1.0,
            mesh_tolerance: 0.01,
            constraint_tolerance: 0.01,
            contraction: 0.5,
            expansion: 1.0,
            max_evals: 2000,
        }
    }
}

impl PatternSearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("pattern_search.{field}"), msg));
        if !(self.initial_mesh.is_finite() && self.initial_mesh > 0.0) {
            return bad("initial_mesh", "must be positive");
        }
        if !(self.mesh_tolerance > 0.0 && self.mesh_tolerance < self.initial_mesh) {
            return bad("mesh_tolerance", "must be positive and below initial_mesh");
        }
        if !(self.constraint_tolerance.is_finite() && self.constraint_tolerance >= 0.0) {
            return bad("constraint_tolerance", "must be non-negative");
        }
        if !(self.contraction > 0.0 && self.contraction < 1.0) {
            return bad("contraction", "must lie in (0, 1)");
        }
        if !(self.expansion.is_finite() && self.expansion >= 1.0) {
            return bad("expansion", "must be at least 1");
        }
        if self.max_evals == 0 {
            return bad("max_evals", "must be at least 1");
        }
        Ok(())
    }
}

/// Incumbent of the search after an accepted step.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshState {
    pub point: Vec<f64>,
    pub value: f64,
    pub mesh: f64,
    pub evaluations: usize,
}

pub type Evaluator<'a> = &'a dyn Fn(&[f64]) -> Result<f64>;

/// `c(x) ≤ 0`. Relaxed constraints accept `c(x) ≤ ε`; strict ones do not.
#[derive(Clone, Copy)]
pub struct Constraint<'a> {
    eval: Evaluator<'a>,
    strict: bool,
}

impl<'a> Constraint<'a> {
    pub fn relaxed(eval: Evaluator<'a>) -> Self {
        Constraint {
            eval,
            strict: false,
        }
    }

    pub fn strict(eval: Evaluator<'a>) -> Self {
        Constraint { eval, strict: true }
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub point: Vec<f64>,
    pub value: f64,
    /// True when the mesh fell below tolerance; false when the budget ran out.
    pub converged: bool,
    pub evaluations: usize,
    pub final_mesh: f64,
    /// Start point followed by every accepted incumbent.
    pub trajectory: Vec<MeshState>,
}

/// Largest violation over the constraints, `None` when all are satisfied.
fn violation(constraints: &[Constraint<'_>], x: &[f64], tol: f64) -> Result<Option<f64>> {
    for c in constraints {
        let v = (c.eval)(x)?;
        let limit = if c.strict { 0.0 } else { tol };
        if !(v <= limit) {
            return Ok(Some(if v.is_nan() { f64::INFINITY } else { v }));
        }
    }
    Ok(None)
}

/// Maximizes `objective` over `bounds` subject to `constraints`, starting from `start`.
pub fn gps_maximize(
    objective: Evaluator<'_>,
    constraints: &[Constraint<'_>],
    bounds: &SearchBox,
    start: &[f64],
    cfg: &PatternSearchConfig,
) -> Result<SearchOutcome> {
    if !bounds.contains(start) {
        return Err(Error::input("pattern search start lies outside the search box"));
    }
    if let Some(worst) = violation(constraints, start, cfg.constraint_tolerance)? {
        return Err(Error::InfeasibleStart { worst });
    }

    let mut x = start.to_vec();
    let mut fx = objective(&x)?;
    let mut evaluations = 1;
    let mut mesh = cfg.initial_mesh;
    let mut trajectory = vec![MeshState {
        point: x.clone(),
        value: fx,
        mesh,
        evaluations,
    }];
    let mut budget_left = evaluations < cfg.max_evals;

    while mesh >= cfg.mesh_tolerance && budget_left {
        let mut improved = false;
        'poll: for d in 0..x.len() {
            for sign in [1.0, -1.0] {
                let mut cand = x.clone();
                cand[d] = (x[d] + sign * mesh).clamp(bounds.lower[d], bounds.upper[d]);
                if cand[d] == x[d] {
                    continue;
                }
                if violation(constraints, &cand, cfg.constraint_tolerance)?.is_some() {
                    continue;
                }
                if evaluations >= cfg.max_evals {
                    budget_left = false;
                    break 'poll;
                }
                let fc = objective(&cand)?;
                evaluations += 1;
                if fc > fx {
                    x = cand;
                    fx = fc;
                    improved = true;
                    break 'poll;
                }
            }
        }
        if !budget_left {
            break;
        }
        if improved {
            mesh *= cfg.expansion;
            trajectory.push(MeshState {
                point: x.clone(),
                value: fx,
                mesh,
                evaluations,
            });
        } else {
            mesh *= cfg.contraction;
        }
        budget_left = evaluations < cfg.max_evals;
    }

    Ok(SearchOutcome {
        point: x,
        value: fx,
        converged: mesh < cfg.mesh_tolerance,
        evaluations,
        final_mesh: mesh,
        trajectory,
    })
}
