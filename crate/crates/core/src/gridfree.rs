//! Grid-free SafeOpt. Each iteration solves two families of local problems
//! with pattern search: a minimizer search `P1` over the safe set and a
//! joint expander search `P2` over pairs `(x, x′)`, the latter started from
//! safe/unsafe pairs near the safe-set boundary.

use std::cell::RefCell;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::ConfidenceBounds;
use crate::pattern_search::{gps_maximize, Constraint, PatternSearchConfig};
use crate::plant::Plant;
use crate::run::{Branch, DisplacementStop, Loop, RunLog, StepCounts, StepOutcome};
use crate::safety::SafeOptState;
use crate::sampling::Sampler;
use crate::space::{euclidean, SearchBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitGuessConfig {
    /// Points drawn per iteration (m₀).
    pub count: usize,
    pub sampler: Sampler,
    /// Overrides the experiment seed for the draws.
    pub seed: Option<u64>,
    /// Adds the currently safe samples to the safe guesses.
    pub seed_with_samples: bool,
    /// Replaces sampling by the single pair (incumbent, this point).
    pub fixed_unsafe_guess: Option<Vec<f64>>,
}

impl Default for InitGuessConfig {
    fn default() -> Self {
        InitGuessConfig {
            count: 100,
            sampler: Sampler::LatinHypercube,
            seed: None,
            seed_with_samples: false,
            fixed_unsafe_guess: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridFreeConfig {
    /// ε₁: largest step between successive recommendations that counts as stalled.
    pub point_tolerance: f64,
    /// ε₂: largest change of measured objective that counts as stalled.
    pub objective_tolerance: f64,
    pub penalty: f64,
    pub max_iter: usize,
    pub max_starts: Option<usize>,
    pub p1_constraints_only: bool,
    pub init: InitGuessConfig,
}

impl Default for GridFreeConfig {
    fn default() -> Self {
        GridFreeConfig {
            point_tolerance: 0.1,
            objective_tolerance: 0.1,
            penalty: 100.0,
            max_iter: 50,
            max_starts: None,
            p1_constraints_only: false,
            init: InitGuessConfig::default(),
        }
    }
}

impl GridFreeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("grid_free.{field}"), msg));
        if !(self.point_tolerance > 0.0 && self.point_tolerance.is_finite()) {
            return bad("point_tolerance", "must be positive");
        }
        if !(self.objective_tolerance > 0.0 && self.objective_tolerance.is_finite()) {
            return bad("objective_tolerance", "must be positive");
        }
        if !(self.penalty > 0.0 && self.penalty.is_finite()) {
            return bad("penalty", "must be positive");
        }
        if self.max_starts == Some(0) {
            return bad("max_starts", "must be at least 1");
        }
        if self.init.count < 2 {
            return bad("init.count", "must be at least 2");
        }
        Ok(())
    }

    fn outputs(&self, state: &SafeOptState) -> std::ops::RangeInclusive<usize> {
        let first = usize::from(self.p1_constraints_only);
        first..=state.num_constraints()
    }
}

/// Bounds of every output at the most recently queried point. Pattern search
/// evaluates the constraints and then the objective at the same point.
struct BoundsMemo<'a> {
    state: &'a SafeOptState,
    last: RefCell<Option<(Vec<f64>, Vec<ConfidenceBounds>)>>,
}

impl<'a> BoundsMemo<'a> {
    fn new(state: &'a SafeOptState) -> Self {
        BoundsMemo {
            state,
            last: RefCell::new(None),
        }
    }

    fn get(&self, x: &[f64]) -> Result<Vec<ConfidenceBounds>> {
        if let Some((p, b)) = &*self.last.borrow() {
            if p.as_slice() == x {
                return Ok(b.clone());
            }
        }
        let b = self.state.all_bounds(x)?;
        *self.last.borrow_mut() = Some((x.to_vec(), b.clone()));
        Ok(b)
    }

    fn safety_margin(&self, x: &[f64]) -> Result<f64> {
        Ok(self.state.verdict_from_bounds(&self.get(x)?).worst_margin)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct P1Solution {
    pub point: Vec<f64>,
    pub output: usize,
    pub width: f64,
    pub l_star: f64,
    pub start: Vec<f64>,
    /// Best point and width per output searched, `None` when discarded.
    pub per_output: Vec<(usize, Option<(Vec<f64>, f64)>)>,
}

fn check_bounds(state: &SafeOptState, bounds: &SearchBox) -> Result<()> {
    if bounds.dim() != state.dim() {
        return Err(Error::input(format!(
            "search box has dimension {}, state has {}",
            bounds.dim(),
            state.dim()
        )));
    }
    Ok(())
}

/// The minimizer search: for each output `k`, maximize `w_n(x, k)` subject to
/// surrogate safety and `l_n(x, 0) ≤ l*`, then keep the widest result.
pub fn solve_p1(
    state: &SafeOptState,
    cfg: &GridFreeConfig,
    solver: &PatternSearchConfig,
    bounds: &SearchBox,
) -> Result<P1Solution> {
    check_bounds(state, bounds)?;
    let (_, l_star) = state.min_safe_upper(state.samples().iter().map(|s| s.point.as_slice()))?;
    let memo = BoundsMemo::new(state);
    let feasibility = |x: &[f64]| -> Result<f64> {
        let b = memo.get(x)?;
        Ok(state.verdict_from_bounds(&b).worst_margin.max(b[0].lower - l_star))
    };
    let tol = solver.constraint_tolerance;
    let start = p1_start(state, &feasibility, tol)?;
    let constraints = [Constraint::relaxed(&feasibility)];

    let mut per_output = Vec::new();
    let mut best: Option<(Vec<f64>, usize, f64)> = None;
    for k in cfg.outputs(state) {
        let width = |x: &[f64]| -> Result<f64> { Ok(memo.get(x)?[k].width) };
        let found = match gps_maximize(&width, &constraints, bounds, &start, solver) {
            Ok(out) => Some((out.point, out.value)),
            Err(Error::InfeasibleStart { .. }) => None,
            Err(e) => return Err(e),
        };
        if let Some((p, w)) = &found {
            if best.as_ref().is_none_or(|(_, _, bw)| w > bw) {
                best = Some((p.clone(), k, *w));
            }
        }
        per_output.push((k, found));
    }
    let (point, output, width) = best.ok_or(Error::EmptyMinimizer)?;
    Ok(P1Solution {
        point,
        output,
        width,
        l_star,
        start,
        per_output,
    })
}

/// The incumbent sample, or the sample attaining `l*` when the incumbent is
/// not feasible for P1.
fn p1_start(state: &SafeOptState, feasibility: &dyn Fn(&[f64]) -> Result<f64>, tol: f64) -> Result<Vec<f64>> {
    if let Some(i) = state.incumbent() {
        let x = &state.samples()[i].point;
        if feasibility(x)? <= tol {
            return Ok(x.clone());
        }
        log::debug!("incumbent {x:?} is infeasible for P1, starting from the l* sample");
    }
    let (x, _) = state.min_safe_upper(state.samples().iter().map(|s| s.point.as_slice()))?;
    Ok(x)
}

/// `w_n(x, k) − σ·max(0, max_j u_aux,j(x′) − J_max_j)` where the auxiliary
/// GPs carry the optimistic observation at `x`.
pub fn relaxed_q(state: &SafeOptState, x: &[f64], x_prime: &[f64], k: usize, penalty: f64) -> Result<f64> {
    if k > state.num_constraints() {
        return Err(Error::input(format!("output index {k} out of range")));
    }
    let w = state.bounds(x, k)?.width;
    let margin = state.expansion_probe(x)?.margin(x_prime)?;
    Ok(w - penalty * margin.max(0.0))
}

/// Margin `x′` must exceed for the strict unsafety constraint.
fn strict_offsets(thresholds: &[f64]) -> Vec<f64> {
    thresholds.iter().map(|t| 1e-9 * t.abs() + 1e-12).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct P2Solution {
    pub point: Vec<f64>,
    pub probe: Vec<f64>,
    pub output: usize,
    pub q: f64,
    pub width: f64,
    pub starts_used: usize,
    /// Best `q` per output over all starts, `None` when every start failed.
    pub per_output: Vec<(usize, Option<f64>)>,
}

/// The expander search over `(x, x′) ∈ A × A`, multi-started from `starts`.
pub fn solve_p2(
    state: &SafeOptState,
    cfg: &GridFreeConfig,
    solver: &PatternSearchConfig,
    bounds: &SearchBox,
    starts: &[(Vec<f64>, Vec<f64>)],
) -> Result<P2Solution> {
    check_bounds(state, bounds)?;
    if starts.is_empty() {
        return Err(Error::input("expander search needs at least one start pair"));
    }
    let n = state.dim();
    let joint = bounds.squared();
    let offsets = strict_offsets(state.thresholds());
    let memo_x = BoundsMemo::new(state);
    let safe_x = |z: &[f64]| memo_x.safety_margin(&z[..n]);
    let unsafe_probe = |z: &[f64]| -> Result<f64> {
        let b = state.all_bounds(&z[n..])?;
        let excess = b[1..]
            .iter()
            .zip(state.thresholds())
            .zip(&offsets)
            .map(|((bj, t), d)| bj.upper - t - d)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(-excess)
    };
    let constraints = [Constraint::relaxed(&safe_x), Constraint::strict(&unsafe_probe)];
    let used = cfg.max_starts.map_or(starts.len(), |m| m.min(starts.len()));

    let mut per_output = Vec::new();
    let mut best: Option<(Vec<f64>, usize, f64, f64)> = None;
    for k in cfg.outputs(state) {
        let q = |z: &[f64]| -> Result<f64> {
            let w = memo_x.get(&z[..n])?[k].width;
            let margin = state.expansion_probe(&z[..n])?.margin(&z[n..])?;
            Ok(w - cfg.penalty * margin.max(0.0))
        };
        let mut best_k: Option<(Vec<f64>, f64)> = None;
        for (x, xp) in &starts[..used] {
            let z0 = [x.as_slice(), xp.as_slice()].concat();
            match gps_maximize(&q, &constraints, &joint, &z0, solver) {
                Ok(out) => {
                    if best_k.as_ref().is_none_or(|(_, bq)| out.value > *bq) {
                        best_k = Some((out.point, out.value));
                    }
                }
                Err(Error::InfeasibleStart { worst }) => {
                    log::debug!("P2 start {z0:?} infeasible ({worst:.3e}), skipped");
                }
                Err(e) => return Err(e),
            }
        }
        per_output.push((k, best_k.as_ref().map(|(_, q)| *q)));
        if let Some((z, qv)) = best_k {
            let w = memo_x.get(&z[..n])?[k].width;
            if best.as_ref().is_none_or(|(_, _, _, bw)| w > *bw) {
                best = Some((z, k, qv, w));
            }
        }
    }
    let (z, output, q, width) =
        best.ok_or_else(|| Error::input("every expander search start was infeasible"))?;
    Ok(P2Solution {
        point: z[..n].to_vec(),
        probe: z[n..].to_vec(),
        output,
        q,
        width,
        starts_used: used,
        per_output,
    })
}

/// Whether the optimistic observation at `x` certifies `x′`, i.e. the penalty
/// of [`relaxed_q`] vanishes for every constraint.
pub fn expander_gap_check(state: &SafeOptState, x: &[f64], x_prime: &[f64]) -> Result<bool> {
    Ok(state.expansion_probe(x)?.margin(x_prime)? <= 0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitGuesses {
    /// Safe guesses paired with their nearest unsafe guess.
    Pairs {
        pairs: Vec<(Vec<f64>, Vec<f64>)>,
        safe: usize,
        unsafe_count: usize,
    },
    /// Every drawn point is certified safe, so there is nothing to expand into.
    NoUnsafe { safe: usize },
}

/// Pairs each safe point with its nearest unsafe point (first on ties).
pub fn pair_nearest(safe: &[Vec<f64>], unsafe_points: &[Vec<f64>]) -> Vec<(Vec<f64>, Vec<f64>)> {
    safe.iter()
        .filter_map(|x| {
            let mut best: Option<(usize, f64)> = None;
            for (j, u) in unsafe_points.iter().enumerate() {
                let d = euclidean(x, u);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            best.map(|(j, _)| (x.clone(), unsafe_points[j].clone()))
        })
        .collect()
}

/// Draws `count` points, splits them by surrogate safety and pairs them.
pub fn init_guesses(state: &SafeOptState, cfg: &InitGuessConfig, bounds: &SearchBox, seed: u64) -> Result<InitGuesses> {
    check_bounds(state, bounds)?;
    if let Some(xp) = &cfg.fixed_unsafe_guess {
        if !state.is_safe(xp)?.is_safe {
            let i = state.incumbent().ok_or_else(|| Error::NoSafeSamples { drawn: 0 })?;
            return Ok(InitGuesses::Pairs {
                pairs: vec![(state.samples()[i].point.clone(), xp.clone())],
                safe: 1,
                unsafe_count: 1,
            });
        }
        return Ok(InitGuesses::NoUnsafe { safe: 1 });
    }
    let batch = cfg.sampler.draw(cfg.count, bounds, seed)?;
    let mut safe = Vec::new();
    let mut unsafe_points = Vec::new();
    if cfg.seed_with_samples {
        for s in state.samples() {
            if state.is_safe(&s.point)?.is_safe {
                safe.push(s.point.clone());
            }
        }
    }
    for p in batch.points {
        if state.is_safe(&p)?.is_safe {
            safe.push(p);
        } else {
            unsafe_points.push(p);
        }
    }
    if safe.is_empty() {
        return Err(Error::NoSafeSamples { drawn: cfg.count });
    }
    if unsafe_points.is_empty() {
        return Ok(InitGuesses::NoUnsafe { safe: safe.len() });
    }
    Ok(InitGuesses::Pairs {
        pairs: pair_nearest(&safe, &unsafe_points),
        safe: safe.len(),
        unsafe_count: unsafe_points.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridFreeStep {
    pub point: Vec<f64>,
    pub branch: Branch,
    pub width: f64,
    pub width_output: usize,
    pub margin: f64,
    pub p1: P1Solution,
    pub p2: Option<P2Solution>,
    pub gap_passed: Option<bool>,
    pub safe_guesses: usize,
    pub unsafe_guesses: usize,
    pub optimizer_time: Duration,
    pub expander_time: Duration,
}

/// Seed for the guesses of iteration `n`.
pub fn iteration_seed(seed: u64, n: usize) -> u64 {
    seed.wrapping_add((n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One grid-free iteration. Chooses between the P1 and P2 solutions by
/// width, falling back to P1 whenever no certified expander was found.
pub fn gridfree_step(
    state: &SafeOptState,
    cfg: &GridFreeConfig,
    solver: &PatternSearchConfig,
    bounds: &SearchBox,
    seed: u64,
) -> Result<GridFreeStep> {
    let t0 = Instant::now();
    let p1 = solve_p1(state, cfg, solver, bounds)?;
    let optimizer_time = t0.elapsed();

    let t1 = Instant::now();
    let guesses = init_guesses(state, &cfg.init, bounds, seed)?;
    let (p2, safe_guesses, unsafe_guesses) = match guesses {
        InitGuesses::NoUnsafe { safe } => (None, safe, 0),
        InitGuesses::Pairs {
            pairs,
            safe,
            unsafe_count,
        } => (Some(solve_p2(state, cfg, solver, bounds, &pairs)?), safe, unsafe_count),
    };
    let gap_passed = p2
        .as_ref()
        .map(|s| expander_gap_check(state, &s.point, &s.probe))
        .transpose()?;
    let expander_time = t1.elapsed();

    let (point, branch, width, width_output) = match (&p2, gap_passed) {
        (Some(s), Some(true)) if s.width > p1.width => (s.point.clone(), Branch::P2, s.width, s.output),
        (Some(_), Some(true)) => (p1.point.clone(), Branch::P1, p1.width, p1.output),
        (Some(_), _) => (p1.point.clone(), Branch::P1GapFailed, p1.width, p1.output),
        (None, _) => (p1.point.clone(), Branch::P1NoUnsafe, p1.width, p1.output),
    };
    let margin = state.is_safe(&point)?.worst_margin;
    Ok(GridFreeStep {
        point,
        branch,
        width,
        width_output,
        margin,
        p1,
        p2,
        gap_passed,
        safe_guesses,
        unsafe_guesses,
        optimizer_time,
        expander_time,
    })
}

/// Runs grid-free SafeOpt until the iteration cap or until successive
/// recommendations move at most ε₁ with objectives differing at most ε₂.
pub fn gridfree_run(
    state: &mut SafeOptState,
    cfg: &GridFreeConfig,
    solver: &PatternSearchConfig,
    bounds: &SearchBox,
    seed: u64,
    plant: &mut dyn Plant,
) -> RunLog {
    let seed = cfg.init.seed.unwrap_or(seed);
    Loop {
        max_iter: cfg.max_iter,
        margin_tol: solver.constraint_tolerance,
        stop: Some(DisplacementStop {
            point_tol: cfg.point_tolerance,
            objective_tol: cfg.objective_tolerance,
        }),
        plant,
    }
    .drive(state, |s, n| {
        let step = gridfree_step(s, cfg, solver, bounds, iteration_seed(seed, n))?;
        Ok(StepOutcome {
            counts: StepCounts {
                safe_guesses: Some(step.safe_guesses),
                unsafe_guesses: Some(step.unsafe_guesses),
                gap_passed: step.gap_passed,
                ..StepCounts::default()
            },
            point: step.point,
            branch: step.branch,
            width: step.width,
            width_output: step.width_output,
            margin: step.margin,
            optimizer_time: step.optimizer_time,
            expander_time: step.expander_time,
        })
    })
}
