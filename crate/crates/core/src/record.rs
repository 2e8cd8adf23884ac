//! Experiment records and their on-disk form.
//!
//! A record is written as three files sharing the stem
//! `{algorithm}-seed{seed}`:
//!
//! * `.json` holds the summary, the configuration echo and the initial set;
//! * `.csv` holds one row per iteration;
//! * `.timings.json` holds wall-clock measurements.
//!
//! Timings live apart so that the first two files are byte-identical across
//! reruns with the same configuration and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, ExperimentConfig};
use crate::error::{Error, Result};
use crate::run::{Branch, IterationRow, IterationTiming, StepCounts, StopReason};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialRow {
    pub point: Vec<f64>,
    pub outputs: Vec<f64>,
    /// Whether the outputs came from a plant call during this run.
    pub measured: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub best_point: Option<Vec<f64>>,
    pub best_objective: Option<f64>,
    pub iterations: usize,
    pub plant_calls: usize,
    pub safe_volume: Option<f64>,
    pub stop: StopReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timings {
    pub wall_s: f64,
    pub iterations: Vec<IterationTiming>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRecord {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub initial: Vec<InitialRow>,
    pub rows: Vec<IterationRow>,
    pub summary: Summary,
    pub timings: Timings,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonDocument {
    algorithm: Algorithm,
    seed: u64,
    summary: Summary,
    config: ExperimentConfig,
    initial: Vec<InitialRow>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordPaths {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub timings: PathBuf,
}

impl RecordPaths {
    pub fn new(dir: &Path, algorithm: Algorithm, seed: u64) -> Self {
        Self::from_stem(&dir.join(format!("{}-seed{seed}", algorithm.tag())))
    }

    fn from_stem(stem: &Path) -> Self {
        let with = |suffix: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        RecordPaths {
            json: with(".json"),
            csv: with(".csv"),
            timings: with(".timings.json"),
        }
    }

    /// Accepts the path of any of the three files, or their shared stem.
    pub fn from_any(path: &Path) -> Self {
        let s = path.to_string_lossy();
        let stem = [".timings.json", ".json", ".csv"]
            .iter()
            .find_map(|suf| s.strip_suffix(suf))
            .unwrap_or(&s);
        Self::from_stem(Path::new(stem))
    }
}

fn rec_err(msg: impl Into<String>) -> Error {
    Error::Record(msg.into())
}

impl ExperimentRecord {
    pub fn dim(&self) -> usize {
        self.config.search_box.dim()
    }

    pub fn num_outputs(&self) -> usize {
        self.config.kernels.len()
    }

    /// Rows strictly ordered by iteration, incumbent non-increasing and every
    /// vector sized to the configured problem.
    pub fn check_invariants(&self) -> Result<()> {
        let (n, m) = (self.dim(), self.num_outputs());
        for r in &self.initial {
            if r.point.len() != n || r.outputs.len() != m {
                return Err(rec_err("initial row has the wrong dimension"));
            }
        }
        let mut last_iter = 0;
        let mut last_best = f64::INFINITY;
        for r in &self.rows {
            if r.iteration <= last_iter {
                return Err(rec_err(format!("iteration {} out of order", r.iteration)));
            }
            if r.point.len() != n || r.outputs.len() != m {
                return Err(rec_err(format!("iteration {} has the wrong dimension", r.iteration)));
            }
            if r.incumbent_objective > last_best {
                return Err(rec_err(format!("incumbent increased at iteration {}", r.iteration)));
            }
            last_iter = r.iteration;
            last_best = r.incumbent_objective;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = JsonDocument {
            algorithm: self.algorithm,
            seed: self.seed,
            summary: self.summary.clone(),
            config: self.config.clone(),
            initial: self.initial.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).map_err(|e| rec_err(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(csv_header(self.dim(), self.num_outputs()))
            .map_err(|e| rec_err(e.to_string()))?;
        for r in &self.rows {
            w.write_record(csv_fields(r)).map_err(|e| rec_err(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| rec_err(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| rec_err(e.to_string()))
    }

    pub fn timings_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.timings).map_err(|e| rec_err(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_parts(json: &str, csv_text: &str, timings: Option<&str>) -> Result<Self> {
        let doc: JsonDocument = serde_json::from_str(json).map_err(|e| rec_err(format!("json: {e}")))?;
        doc.config.validate()?;
        let (n, m) = (doc.config.search_box.dim(), doc.config.kernels.len());
        let rows = parse_rows(csv_text, n, m)?;
        let timings = match timings {
            Some(t) => serde_json::from_str(t).map_err(|e| rec_err(format!("timings: {e}")))?,
            None => Timings {
                wall_s: 0.0,
                iterations: Vec::new(),
            },
        };
        let rec = ExperimentRecord {
            algorithm: doc.algorithm,
            seed: doc.seed,
            config: doc.config,
            initial: doc.initial,
            rows,
            summary: doc.summary,
            timings,
        };
        rec.check_invariants()?;
        Ok(rec)
    }

    pub fn write(&self, dir: &Path) -> Result<RecordPaths> {
        fs::create_dir_all(dir)?;
        let paths = RecordPaths::new(dir, self.algorithm, self.seed);
        fs::write(&paths.json, self.to_json()?)?;
        fs::write(&paths.csv, self.to_csv()?)?;
        fs::write(&paths.timings, self.timings_json()?)?;
        Ok(paths)
    }

    /// Reads a record given the path of any of its files. A missing timings
    /// file yields empty timings.
    pub fn read(path: &Path) -> Result<Self> {
        let paths = RecordPaths::from_any(path);
        let json = fs::read_to_string(&paths.json)?;
        let csv_text = fs::read_to_string(&paths.csv)?;
        let timings = match fs::read_to_string(&paths.timings) {
            Ok(t) => Some(t),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        Self::from_parts(&json, &csv_text, timings.as_deref())
    }
}

const TAIL: [&str; 11] = [
    "branch",
    "width",
    "width_output",
    "margin",
    "incumbent_objective",
    "safe",
    "minimizers",
    "expanders",
    "safe_guesses",
    "unsafe_guesses",
    "gap_passed",
];

fn csv_header(dim: usize, outputs: usize) -> Vec<String> {
    let mut h = vec!["iteration".to_string()];
    h.extend((0..dim).map(|i| format!("x{i}")));
    h.extend((0..outputs).map(|j| format!("y{j}")));
    h.extend(TAIL.iter().map(|s| s.to_string()));
    h
}

/// Shortest text that parses back to the same bits, switching to exponent
/// notation for very large or small magnitudes.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn csv_fields(r: &IterationRow) -> Vec<String> {
    let mut f = vec![r.iteration.to_string()];
    f.extend(r.point.iter().copied().map(num));
    f.extend(r.outputs.iter().copied().map(num));
    let c = &r.counts;
    f.extend([
        r.branch.as_str().to_string(),
        num(r.width),
        r.width_output.to_string(),
        num(r.margin),
        num(r.incumbent_objective),
        opt(c.safe),
        opt(c.minimizers),
        opt(c.expanders),
        opt(c.safe_guesses),
        opt(c.unsafe_guesses),
        opt(c.gap_passed),
    ]);
    f
}

fn parse_rows(text: &str, dim: usize, outputs: usize) -> Result<Vec<IterationRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| rec_err(format!("csv: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != csv_header(dim, outputs) {
        return Err(rec_err("csv header does not match the configured dimensions"));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| rec_err(format!("csv: {e}")))?;
        let cell = |i: usize| rec.get(i).ok_or_else(|| rec_err(format!("row {}: missing field {i}", line + 1)));
        let num = |i: usize| -> Result<f64> {
            cell(i)?
                .parse::<f64>()
                .map_err(|_| rec_err(format!("row {}: column {} is not a number", line + 1, header[i])))
        };
        let int = |i: usize| -> Result<usize> {
            cell(i)?
                .parse::<usize>()
                .map_err(|_| rec_err(format!("row {}: column {} is not an integer", line + 1, header[i])))
        };
        let opt_int = |i: usize| -> Result<Option<usize>> {
            match cell(i)? {
                "" => Ok(None),
                _ => int(i).map(Some),
            }
        };
        let t = 1 + dim + outputs;
        let gap_passed = match cell(t + 10)? {
            "" => None,
            "true" => Some(true),
            "false" => Some(false),
            other => return Err(rec_err(format!("row {}: bad gap_passed `{other}`", line + 1))),
        };
        rows.push(IterationRow {
            iteration: int(0)?,
            point: (1..=dim).map(num).collect::<Result<_>>()?,
            outputs: (1 + dim..t).map(num).collect::<Result<_>>()?,
            branch: Branch::parse(cell(t)?).ok_or_else(|| rec_err(format!("row {}: unknown branch", line + 1)))?,
            width: num(t + 1)?,
            width_output: int(t + 2)?,
            margin: num(t + 3)?,
            incumbent_objective: num(t + 4)?,
            counts: StepCounts {
                safe: opt_int(t + 5)?,
                minimizers: opt_int(t + 6)?,
                expanders: opt_int(t + 7)?,
                safe_guesses: opt_int(t + 8)?,
                unsafe_guesses: opt_int(t + 9)?,
                gap_passed,
            },
        });
    }
    Ok(rows)
}
