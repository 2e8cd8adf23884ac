//! Grid SafeOpt: exhaustive safe-set, minimizer and expander search over a
//! fixed discretisation of the search box.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::ConfidenceBounds;
use crate::plant::Plant;
use crate::run::{Branch, Loop, RunLog, StepCounts, StepOutcome};
use crate::safety::{widest, SafeOptState};
use crate::space::SearchBox;

/// Evenly spaced Cartesian grid; the first dimension varies slowest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub counts: Vec<usize>,
}

impl GridSpec {
    pub fn validate(&self, bounds: &SearchBox) -> Result<()> {
        if self.counts.len() != bounds.dim() {
            return Err(Error::config(
                "grid.counts",
                format!("has {} entries for a {}-dimensional box", self.counts.len(), bounds.dim()),
            ));
        }
        if self.counts.iter().any(|c| *c < 2) {
            return Err(Error::config("grid.counts", "every dimension needs at least 2 points"));
        }
        let total = self.counts.iter().try_fold(1usize, |acc, c| acc.checked_mul(*c));
        if total.is_none_or(|n| n > 10_000_000) {
            return Err(Error::config("grid.counts", "grid exceeds 1e7 points"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn build(&self, bounds: &SearchBox) -> Result<Grid> {
        bounds.validate()?;
        self.validate(bounds)?;
        let axes: Vec<Vec<f64>> = self
            .counts
            .iter()
            .enumerate()
            .map(|(d, c)| {
                let (lo, hi) = (bounds.lower[d], bounds.upper[d]);
                (0..*c)
                    .map(|i| if i + 1 == *c { hi } else { lo + (hi - lo) * i as f64 / (*c - 1) as f64 })
                    .collect()
            })
            .collect();
        let mut points = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; axes.len()];
        loop {
            points.push(idx.iter().enumerate().map(|(d, i)| axes[d][*i]).collect());
            let mut d = axes.len();
            loop {
                if d == 0 {
                    return Ok(Grid { points });
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < axes[d].len() {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}

/// The candidate points of one grid run.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub points: Vec<Vec<f64>>,
}

impl Grid {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::input("grid has no points"));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::input("grid points have mixed dimensions"));
        }
        Ok(Grid { points })
    }

    /// Appends the given points that are not already grid points.
    pub fn with_extra(mut self, extra: &[Vec<f64>]) -> Self {
        for p in extra {
            if !self.points.contains(p) {
                self.points.push(p.clone());
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridStep {
    pub index: usize,
    pub point: Vec<f64>,
    pub width: f64,
    pub width_output: usize,
    pub margin: f64,
    pub l_star: f64,
    /// Grid indices of S_n, M_n and E_n in grid order.
    pub safe: Vec<usize>,
    pub minimizers: Vec<usize>,
    pub expanders: Vec<usize>,
    pub optimizer_time: Duration,
    pub expander_time: Duration,
}

impl GridStep {
    pub fn branch(&self) -> Branch {
        let m = self.minimizers.binary_search(&self.index).is_ok();
        let e = self.expanders.binary_search(&self.index).is_ok();
        match (m, e) {
            (true, true) => Branch::MinimizerExpander,
            (true, false) => Branch::Minimizer,
            _ => Branch::Expander,
        }
    }
}

/// One iteration of grid SafeOpt: the widest point of `M_n ∪ E_n`.
pub fn grid_step(state: &SafeOptState, grid: &Grid) -> Result<GridStep> {
    let t0 = Instant::now();
    let bounds: Vec<Vec<ConfidenceBounds>> = grid
        .points
        .iter()
        .map(|p| state.all_bounds(p))
        .collect::<Result<_>>()?;
    let margins: Vec<f64> = bounds.iter().map(|b| state.verdict_from_bounds(b).worst_margin).collect();
    let safe: Vec<usize> = (0..grid.len()).filter(|i| margins[*i] <= 0.0).collect();
    if safe.is_empty() {
        return Err(Error::EmptySafeSet(format!(
            "none of the {} grid points is certified safe",
            grid.len()
        )));
    }
    let mut l_star = f64::INFINITY;
    for i in &safe {
        l_star = l_star.min(bounds[*i][0].upper);
    }
    let minimizers: Vec<usize> = safe.iter().copied().filter(|i| bounds[*i][0].lower <= l_star).collect();
    let optimizer_time = t0.elapsed();

    let t1 = Instant::now();
    let unsafe_idx: Vec<usize> = (0..grid.len()).filter(|i| margins[*i] > 0.0).collect();
    let mut expanders = Vec::new();
    if !unsafe_idx.is_empty() {
        for i in &safe {
            let probe = state.expansion_probe(&grid.points[*i])?;
            for k in &unsafe_idx {
                if probe.margin(&grid.points[*k])? <= 0.0 {
                    expanders.push(*i);
                    break;
                }
            }
        }
    }
    let expander_time = t1.elapsed();

    let mut best: Option<(usize, f64, usize)> = None;
    let (mut mi, mut ei) = (minimizers.iter().peekable(), expanders.iter().peekable());
    // Merge the two sorted index lists so candidates are visited in grid order.
    loop {
        let next = match (mi.peek(), ei.peek()) {
            (Some(a), Some(b)) if a == b => {
                ei.next();
                mi.next()
            }
            (Some(a), Some(b)) => {
                if a < b {
                    mi.next()
                } else {
                    ei.next()
                }
            }
            (Some(_), None) => mi.next(),
            (None, Some(_)) => ei.next(),
            (None, None) => break,
        };
        let i = *next.unwrap();
        let (w, j) = widest(&bounds[i]);
        if best.is_none_or(|(_, bw, _)| w > bw) {
            best = Some((i, w, j));
        }
    }
    let (index, width, width_output) = best.ok_or(Error::NoCandidate)?;
    Ok(GridStep {
        index,
        point: grid.points[index].clone(),
        width,
        width_output,
        margin: margins[index],
        l_star,
        safe,
        minimizers,
        expanders,
        optimizer_time,
        expander_time,
    })
}

/// Runs `max_iter` iterations of grid SafeOpt, measuring each chosen point.
/// Stops early only when `M_n ∪ E_n` is empty or an error occurs.
pub fn grid_run(state: &mut SafeOptState, grid: &Grid, max_iter: usize, plant: &mut dyn Plant) -> RunLog {
    Loop {
        max_iter,
        margin_tol: 0.0,
        stop: None,
        plant,
    }
    .drive(state, |s, _| {
        let step = grid_step(s, grid)?;
        Ok(StepOutcome {
            branch: step.branch(),
            counts: StepCounts {
                safe: Some(step.safe.len()),
                minimizers: Some(step.minimizers.len()),
                expanders: Some(step.expanders.len()),
                ..StepCounts::default()
            },
            point: step.point,
            width: step.width,
            width_output: step.width_output,
            margin: step.margin,
            optimizer_time: step.optimizer_time,
            expander_time: step.expander_time,
        })
    })
}
