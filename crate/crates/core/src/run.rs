//! The measure-and-update loop shared by both SafeOpt drivers.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::Plant;
use crate::safety::{SafeOptState, Sample};
use crate::space::euclidean;

/// How a driver arrived at the point it measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// Grid: the point is a minimizer only.
    Minimizer,
    /// Grid: the point is an expander only.
    Expander,
    /// Grid: the point is both.
    MinimizerExpander,
    /// Grid-free: the minimizer search won.
    P1,
    /// Grid-free: the certified expander search won.
    P2,
    /// Grid-free: the expander candidate failed the gap check.
    P1GapFailed,
    /// Grid-free: no unsafe guess was found, so the expander search was skipped.
    P1NoUnsafe,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Minimizer => "minimizer",
            Branch::Expander => "expander",
            Branch::MinimizerExpander => "minimizer-expander",
            Branch::P1 => "p1",
            Branch::P2 => "p2",
            Branch::P1GapFailed => "p1-gap-failed",
            Branch::P1NoUnsafe => "p1-no-unsafe",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Branch::Minimizer,
            Branch::Expander,
            Branch::MinimizerExpander,
            Branch::P1,
            Branch::P2,
            Branch::P1GapFailed,
            Branch::P1NoUnsafe,
        ]
        .into_iter()
        .find(|b| b.as_str() == s)
    }
}

/// Set sizes reported by a step. Each driver fills the fields it knows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounts {
    pub safe: Option<usize>,
    pub minimizers: Option<usize>,
    pub expanders: Option<usize>,
    pub safe_guesses: Option<usize>,
    pub unsafe_guesses: Option<usize>,
    pub gap_passed: Option<bool>,
}

/// A driver's choice for one iteration.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub point: Vec<f64>,
    pub branch: Branch,
    pub width: f64,
    pub width_output: usize,
    /// Worst surrogate safety margin at the chosen point.
    pub margin: f64,
    pub counts: StepCounts,
    pub optimizer_time: Duration,
    pub expander_time: Duration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub point: Vec<f64>,
    pub outputs: Vec<f64>,
    pub branch: Branch,
    pub width: f64,
    pub width_output: usize,
    pub margin: f64,
    pub incumbent_objective: f64,
    pub counts: StepCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTiming {
    pub iteration: usize,
    pub optimizer_s: f64,
    pub expander_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StopReason {
    IterationCap,
    /// Successive recommendations moved at most ε₁ and their measured
    /// objectives at most ε₂.
    Displacement { point: f64, objective: f64 },
    NoCandidate,
    Failed { message: String, exit_code: i32 },
}

impl StopReason {
    pub fn is_failure(&self) -> bool {
        matches!(self, StopReason::Failed { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub rows: Vec<IterationRow>,
    pub timings: Vec<IterationTiming>,
    pub stop: StopReason,
    pub wall_s: f64,
}

/// ε₁/ε₂ displacement stop used by the grid-free driver.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DisplacementStop {
    pub point_tol: f64,
    pub objective_tol: f64,
}

pub(crate) struct Loop<'a> {
    pub max_iter: usize,
    /// Largest surrogate margin a chosen point may have.
    pub margin_tol: f64,
    pub stop: Option<DisplacementStop>,
    pub plant: &'a mut dyn Plant,
}

impl Loop<'_> {
    pub fn drive<F>(mut self, state: &mut SafeOptState, mut step: F) -> RunLog
    where
        F: FnMut(&SafeOptState, usize) -> Result<StepOutcome>,
    {
        let start = Instant::now();
        let mut rows = Vec::new();
        let mut timings = Vec::new();
        // The previous recommendation and its measured objective; the
        // incumbent of S_0 stands in before the first iteration.
        let mut previous: Option<(Vec<f64>, f64)> = state
            .incumbent()
            .map(|i| (state.samples()[i].point.clone(), state.samples()[i].objective()));
        let mut stop = StopReason::IterationCap;
        for n in 1..=self.max_iter {
            let t0 = Instant::now();
            match self.iterate(state, n, &mut step) {
                Ok((row, opt, exp)) => {
                    let displacement = previous.as_ref().map(|(p, f)| {
                        (euclidean(p, &row.point), (row.outputs[0] - f).abs())
                    });
                    previous = Some((row.point.clone(), row.outputs[0]));
                    timings.push(IterationTiming {
                        iteration: n,
                        optimizer_s: opt.as_secs_f64(),
                        expander_s: exp.as_secs_f64(),
                        total_s: t0.elapsed().as_secs_f64(),
                    });
                    rows.push(row);
                    if let (Some(rule), Some((dx, df))) = (self.stop, displacement) {
                        if dx <= rule.point_tol && df <= rule.objective_tol {
                            stop = StopReason::Displacement {
                                point: dx,
                                objective: df,
                            };
                            break;
                        }
                    }
                }
                Err(Error::NoCandidate) => {
                    stop = StopReason::NoCandidate;
                    break;
                }
                Err(e) => {
                    log::error!("iteration {n} failed: {e}");
                    stop = StopReason::Failed {
                        message: e.to_string(),
                        exit_code: e.exit_code(),
                    };
                    break;
                }
            }
        }
        RunLog {
            rows,
            timings,
            stop,
            wall_s: start.elapsed().as_secs_f64(),
        }
    }

    fn iterate<F>(&mut self, state: &mut SafeOptState, n: usize, step: &mut F) -> Result<(IterationRow, Duration, Duration)>
    where
        F: FnMut(&SafeOptState, usize) -> Result<StepOutcome>,
    {
        let out = step(state, n)?;
        if out.margin > self.margin_tol {
            return Err(Error::SafetyViolation { margin: out.margin });
        }
        let outputs = self.plant.measure(&out.point)?;
        state.add_sample(out.point.clone(), outputs.clone())?;
        let best = state.incumbent().map(|i| state.samples()[i].objective()).unwrap_or(f64::NAN);
        log::info!(
            "iteration {n}: {:?} via {} -> {:?}",
            out.point,
            out.branch.as_str(),
            outputs
        );
        Ok((
            IterationRow {
                iteration: n,
                point: out.point,
                outputs,
                branch: out.branch,
                width: out.width,
                width_output: out.width_output,
                margin: out.margin,
                incumbent_objective: best,
                counts: out.counts,
            },
            out.optimizer_time,
            out.expander_time,
        ))
    }
}

/// Index of the measured-safe sample with the smallest objective.
pub fn best_measured_safe(samples: &[Sample], thresholds: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in samples.iter().enumerate() {
        let safe = s.outputs[1..].iter().zip(thresholds).all(|(g, t)| g <= t);
        if safe && best.is_none_or(|b| s.objective() < samples[b].objective()) {
            best = Some(i);
        }
    }
    best
}
