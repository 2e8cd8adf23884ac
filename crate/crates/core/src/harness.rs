//! Runs configured experiments, compares records and re-estimates safe
//! volumes from saved runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::config::{Algorithm, ExperimentConfig};
use crate::error::{Error, Result};
use crate::grid::grid_run;
use crate::gridfree::gridfree_run;
use crate::plant::Plant;
use crate::record::{ExperimentRecord, InitialRow, Summary, Timings};
use crate::run::{best_measured_safe, RunLog, StopReason};
use crate::safety::{SafeOptState, Sample};
use crate::sampling::{safe_volume_estimate, Sampler};

/// Noise stream of the plant, kept apart from the guess and volume streams.
fn plant_seed(seed: u64) -> u64 {
    seed ^ 0xA5A5_A5A5_A5A5_A5A5
}

/// Builds the surrogate state from the configuration and a sample list.
pub fn build_state(cfg: &ExperimentConfig, samples: Vec<Sample>) -> Result<SafeOptState> {
    SafeOptState::new(cfg.kernels.clone(), cfg.beta, cfg.threshold_vector(), samples)
}

/// Outputs of the initial set, measuring the points that have none.
pub fn initial_rows(cfg: &ExperimentConfig, plant: &mut dyn Plant) -> Result<Vec<InitialRow>> {
    match &cfg.initial.outputs {
        Some(outputs) => Ok(cfg
            .initial
            .points
            .iter()
            .zip(outputs)
            .map(|(p, y)| InitialRow {
                point: p.clone(),
                outputs: y.clone(),
                measured: false,
            })
            .collect()),
        None => cfg
            .initial
            .points
            .iter()
            .map(|p| {
                Ok(InitialRow {
                    point: p.clone(),
                    outputs: plant.measure(p)?,
                    measured: true,
                })
            })
            .collect(),
    }
}

fn samples_of(initial: &[InitialRow], log_rows: &[crate::run::IterationRow]) -> Vec<Sample> {
    initial
        .iter()
        .map(|r| Sample::new(r.point.clone(), r.outputs.clone()))
        .chain(log_rows.iter().map(|r| Sample::new(r.point.clone(), r.outputs.clone())))
        .collect()
}

/// Runs the configured algorithm end to end. Configuration and initial-set
/// errors are returned; failures inside the loop end the run early and are
/// reported in `summary.stop` of the returned record.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    cfg.validate()?;
    let mut plant = cfg.plant.build(plant_seed(cfg.seed))?;
    let initial = initial_rows(cfg, plant.as_mut())?;
    let mut state = build_state(cfg, samples_of(&initial, &[]))?;
    log::info!(
        "running {} with seed {} from {} initial points",
        cfg.algorithm.tag(),
        cfg.seed,
        initial.len()
    );

    let log: RunLog = match cfg.algorithm {
        Algorithm::Grid => {
            let g = cfg.grid.as_ref().ok_or_else(|| Error::config("grid", "missing"))?;
            let grid = g.spec().build(&cfg.search_box)?.with_extra(&cfg.initial.points);
            grid_run(&mut state, &grid, g.max_iter, plant.as_mut())
        }
        Algorithm::GridFree => {
            let g = cfg.grid_free.as_ref().ok_or_else(|| Error::config("grid_free", "missing"))?;
            gridfree_run(&mut state, g, &cfg.pattern_search, &cfg.search_box, cfg.seed, plant.as_mut())
        }
    };

    let samples = samples_of(&initial, &log.rows);
    let best = best_measured_safe(&samples, &cfg.threshold_vector());
    let safe_volume = if cfg.volume.count > 0 && !log.stop.is_failure() {
        Some(safe_volume_estimate(&state, &cfg.search_box, cfg.volume.count, cfg.volume.sampler, cfg.seed)?)
    } else {
        None
    };
    let plant_calls = initial.iter().filter(|r| r.measured).count() + log.rows.len();
    Ok(ExperimentRecord {
        algorithm: cfg.algorithm,
        seed: cfg.seed,
        config: cfg.clone(),
        summary: Summary {
            best_point: best.map(|i| samples[i].point.clone()),
            best_objective: best.map(|i| samples[i].objective()),
            iterations: log.rows.len(),
            plant_calls,
            safe_volume,
            stop: log.stop,
        },
        initial,
        rows: log.rows,
        timings: Timings {
            wall_s: log.wall_s,
            iterations: log.timings,
        },
    })
}

/// Surrogate state at the end of a recorded run.
pub fn rebuild_state(record: &ExperimentRecord) -> Result<SafeOptState> {
    build_state(&record.config, samples_of(&record.initial, &record.rows))
}

/// Safe-volume estimate of a recorded run's final surrogate.
pub fn volume(record: &ExperimentRecord, count: usize, sampler: Sampler, seed: u64) -> Result<f64> {
    let state = rebuild_state(record)?;
    safe_volume_estimate(&state, &record.config.search_box, count, sampler, seed)
}

/// Noise-free outputs at every plant call of a record, initial set first.
pub fn true_outputs(record: &ExperimentRecord) -> Result<Vec<Vec<f64>>> {
    let plant = record.config.plant.build(0)?;
    record
        .initial
        .iter()
        .map(|r| &r.point)
        .chain(record.rows.iter().map(|r| &r.point))
        .map(|p| plant.true_outputs(p))
        .collect()
}

/// Per-record and per-algorithm comparison tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub runs: String,
    pub algorithms: String,
    pub timings: String,
}

fn json_diff(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = format!("{path}.{k}");
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => json_diff(&p, u, v, out),
                    _ => out.push(p),
                }
            }
        }
        _ if a != b => out.push(format!("{path}: {a} vs {b}")),
        _ => {}
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn stop_kind(s: &StopReason) -> &'static str {
    match s {
        StopReason::IterationCap => "iteration-cap",
        StopReason::Displacement { .. } => "displacement",
        StopReason::NoCandidate => "no-candidate",
        StopReason::Failed { .. } => "failed",
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

/// Builds comparison tables over records of the same plant. Refuses records
/// whose plant blocks differ and lists the differing keys.
pub fn compare_runs(records: &[ExperimentRecord]) -> Result<Comparison> {
    if records.len() < 2 {
        return Err(Error::input("comparison needs at least two records"));
    }
    let plant_json = |r: &ExperimentRecord| serde_json::to_value(&r.config.plant).map_err(|e| Error::Record(e.to_string()));
    let reference = plant_json(&records[0])?;
    for (i, r) in records.iter().enumerate().skip(1) {
        let mut diff = Vec::new();
        json_diff("plant", &reference, &plant_json(r)?, &mut diff);
        if !diff.is_empty() {
            return Err(Error::input(format!(
                "record {i} uses a different plant than record 0: {}",
                diff.join("; ")
            )));
        }
    }

    let mut runs = String::from("algorithm,seed,iterations,plant_calls,stop,best_objective,best_point,wall_s\n");
    for r in records {
        let s = &r.summary;
        let _ = writeln!(
            runs,
            "{},{},{},{},{},{},{},{:?}",
            r.algorithm.tag(),
            r.seed,
            s.iterations,
            s.plant_calls,
            stop_kind(&s.stop),
            s.best_objective.map_or_else(String::new, |v| format!("{v:?}")),
            s.best_point.as_deref().map_or_else(String::new, join),
            r.timings.wall_s,
        );
    }

    let mut algorithms = String::from("algorithm,runs,best_objective_mean,best_objective_std,wall_s_mean,iterations_mean\n");
    for alg in [Algorithm::Grid, Algorithm::GridFree] {
        let group: Vec<&ExperimentRecord> = records.iter().filter(|r| r.algorithm == alg).collect();
        if group.is_empty() {
            continue;
        }
        let best: Vec<f64> = group.iter().filter_map(|r| r.summary.best_objective).collect();
        let (bm, bs) = if best.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&best) };
        let (wm, _) = mean_std(&group.iter().map(|r| r.timings.wall_s).collect::<Vec<_>>());
        let (im, _) = mean_std(&group.iter().map(|r| r.summary.iterations as f64).collect::<Vec<_>>());
        let _ = writeln!(algorithms, "{},{},{bm:?},{bs:?},{wm:?},{im:?}", alg.tag(), group.len());
    }

    let mut timings = String::from("algorithm,seed,iteration,optimizer_s,expander_s,total_s\n");
    for r in records {
        for t in &r.timings.iterations {
            let _ = writeln!(
                timings,
                "{},{},{},{:?},{:?},{:?}",
                r.algorithm.tag(),
                r.seed,
                t.iteration,
                t.optimizer_s,
                t.expander_s,
                t.total_s
            );
        }
    }
    Ok(Comparison {
        runs,
        algorithms,
        timings,
    })
}

impl Comparison {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("comparison-runs.csv"), &self.runs)?;
        fs::write(dir.join("comparison-algorithms.csv"), &self.algorithms)?;
        fs::write(dir.join("comparison-timings.csv"), &self.timings)?;
        Ok(())
    }
}
