//! Experiment configuration, read from a TOML file. Unknown keys are errors
//! and every validation failure names the offending field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::KernelSpec;
use crate::grid::GridSpec;
use crate::gridfree::GridFreeConfig;
use crate::pattern_search::PatternSearchConfig;
use crate::plant::{BallScrewPlant, Plant, PlantModel, PlantObjectiveConfig, QuadraticPlant, QuadraticSpec};
use crate::sampling::Sampler;
use crate::space::SearchBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Grid,
    GridFree,
}

impl Algorithm {
    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::Grid => "grid",
            Algorithm::GridFree => "grid-free",
        }
    }
}

/// A single threshold shared by every constraint, or one per constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Thresholds {
    Scalar(f64),
    PerConstraint(Vec<f64>),
}

impl Thresholds {
    pub fn expand(&self, constraints: usize) -> Vec<f64> {
        match self {
            Thresholds::Scalar(t) => vec![*t; constraints],
            Thresholds::PerConstraint(v) => v.clone(),
        }
    }
}

/// Initial safe set. Outputs, when given, are used as-is; otherwise every
/// point is measured on the plant before the first iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSet {
    pub points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub counts: Vec<usize>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_max_iter() -> usize {
    50
}

impl GridConfig {
    pub fn spec(&self) -> GridSpec {
        GridSpec {
            counts: self.counts.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PlantConfig {
    BallScrew {
        #[serde(default)]
        model: PlantModel,
        #[serde(default)]
        objective: PlantObjectiveConfig,
        #[serde(default)]
        noise_std: f64,
    },
    Quadratic {
        center: Vec<f64>,
        weights: Vec<f64>,
        #[serde(default)]
        offset: f64,
        safe_center: Vec<f64>,
        safe_radius: f64,
        #[serde(default)]
        noise_std: f64,
    },
}

impl PlantConfig {
    pub fn build(&self, seed: u64) -> Result<Box<dyn Plant>> {
        let named = |e: Error| Error::config("plant", e.to_string());
        Ok(match self {
            PlantConfig::BallScrew {
                model,
                objective,
                noise_std,
            } => Box::new(BallScrewPlant::new(model.clone(), objective.clone(), *noise_std, seed).map_err(named)?),
            PlantConfig::Quadratic {
                center,
                weights,
                offset,
                safe_center,
                safe_radius,
                noise_std,
            } => {
                let spec = QuadraticSpec {
                    center: center.clone(),
                    weights: weights.clone(),
                    offset: *offset,
                    safe_center: safe_center.clone(),
                    safe_radius: *safe_radius,
                };
                Box::new(QuadraticPlant::new(spec, *noise_std, seed).map_err(named)?)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VolumeConfig {
    /// Points drawn for the final safe-volume estimate; 0 skips it.
    pub count: usize,
    pub sampler: Sampler,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        VolumeConfig {
            count: 500_000,
            sampler: Sampler::UniformRandom,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "results".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub seed: u64,
    pub beta: f64,
    pub thresholds: Thresholds,
    pub search_box: SearchBox,
    pub initial: InitialSet,
    /// One kernel per output: the objective first, then each constraint.
    pub kernels: Vec<KernelSpec>,
    pub plant: PlantConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_free: Option<GridFreeConfig>,
    #[serde(default)]
    pub pattern_search: PatternSearchConfig,
    #[serde(default)]
    pub volume: VolumeConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map_or_else(String::new, |s| format!("bytes {}..{}", s.start, s.end));
            Error::config(if field.is_empty() { "<document>".into() } else { field }, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn num_constraints(&self) -> usize {
        self.kernels.len().saturating_sub(1)
    }

    pub fn threshold_vector(&self) -> Vec<f64> {
        self.thresholds.expand(self.num_constraints())
    }

    pub fn validate(&self) -> Result<()> {
        let named = |field: &'static str| move |e: Error| Error::config(field, e.to_string());
        self.search_box.validate().map_err(named("search_box"))?;
        let dim = self.search_box.dim();

        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be positive and finite"));
        }
        if self.kernels.len() < 2 {
            return Err(Error::config("kernels", "needs the objective kernel and at least one constraint kernel"));
        }
        for (j, k) in self.kernels.iter().enumerate() {
            k.validate().map_err(|e| Error::config(format!("kernels[{j}]"), e.to_string()))?;
            if k.dim() != dim {
                return Err(Error::config(
                    format!("kernels[{j}].lengthscales"),
                    format!("has {} entries for a {dim}-dimensional box", k.dim()),
                ));
            }
        }
        let thresholds = self.threshold_vector();
        if thresholds.len() != self.num_constraints() {
            return Err(Error::config(
                "thresholds",
                format!("has {} entries for {} constraints", thresholds.len(), self.num_constraints()),
            ));
        }
        if thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("thresholds", "must be finite"));
        }

        self.validate_initial(dim)?;
        self.validate_plant(dim)?;

        match self.algorithm {
            Algorithm::Grid => {
                let g = self
                    .grid
                    .as_ref()
                    .ok_or_else(|| Error::config("grid", "required when algorithm = \"grid\""))?;
                g.spec().validate(&self.search_box)?;
                if g.max_iter == 0 {
                    return Err(Error::config("grid.max_iter", "must be at least 1"));
                }
            }
            Algorithm::GridFree => {
                let g = self
                    .grid_free
                    .as_ref()
                    .ok_or_else(|| Error::config("grid_free", "required when algorithm = \"grid-free\""))?;
                g.validate()?;
                if g.max_iter == 0 {
                    return Err(Error::config("grid_free.max_iter", "must be at least 1"));
                }
                if let Some(p) = &g.init.fixed_unsafe_guess {
                    if p.len() != dim || !self.search_box.contains(p) {
                        return Err(Error::config("grid_free.init.fixed_unsafe_guess", "must lie in the search box"));
                    }
                }
                self.pattern_search.validate().map_err(named("pattern_search"))?;
            }
        }
        if self.output.dir.is_empty() {
            return Err(Error::config("output.dir", "must not be empty"));
        }
        Ok(())
    }

    fn validate_initial(&self, dim: usize) -> Result<()> {
        let init = &self.initial;
        if init.points.is_empty() {
            return Err(Error::config("initial.points", "the initial safe set must not be empty"));
        }
        for (i, p) in init.points.iter().enumerate() {
            if p.len() != dim || !self.search_box.contains(p) {
                return Err(Error::config(
                    format!("initial.points[{i}]"),
                    "must be a point inside the search box",
                ));
            }
        }
        if let Some(outputs) = &init.outputs {
            if outputs.len() != init.points.len() {
                return Err(Error::config("initial.outputs", "needs one row per initial point"));
            }
            for (i, y) in outputs.iter().enumerate() {
                if y.len() != self.kernels.len() || y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config(
                        format!("initial.outputs[{i}]"),
                        format!("needs {} finite values", self.kernels.len()),
                    ));
                }
            }
        }
        Ok(())
    }

    fn validate_plant(&self, dim: usize) -> Result<()> {
        let plant = self.plant.build(0)?;
        if plant.dim() != dim {
            return Err(Error::config(
                "plant",
                format!("takes {} parameters, the search box has {dim}", plant.dim()),
            ));
        }
        if plant.num_outputs() != self.kernels.len() {
            return Err(Error::config(
                "kernels",
                format!("the plant has {} outputs but {} kernels are given", plant.num_outputs(), self.kernels.len()),
            ));
        }
        Ok(())
    }
}
