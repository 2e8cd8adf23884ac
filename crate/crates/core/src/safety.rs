//! Safe-set membership, minimizer and expander predicates, and the width
//! acquisition shared by both SafeOpt drivers.
//!
//! Output index `0` is the objective; indices `1..=J` are constraints, each
//! with its own threshold. All predicates are pure functions of the state.

use crate::error::{Error, Result};
use crate::gp::{check_beta, ConfidenceBounds, Conditioned, GaussianProcess, KernelSpec};

/// A measured point with one value per output (objective first).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub point: Vec<f64>,
    pub outputs: Vec<f64>,
}

impl Sample {
    pub fn new(point: Vec<f64>, outputs: Vec<f64>) -> Self {
        Sample { point, outputs }
    }

    pub fn objective(&self) -> f64 {
        self.outputs[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyVerdict {
    pub is_safe: bool,
    /// `max_j u_n(x, j) − J_max_j`; non-positive exactly when `is_safe`.
    pub worst_margin: f64,
}

impl SafetyVerdict {
    fn from_margin(worst_margin: f64) -> Self {
        SafetyVerdict {
            is_safe: worst_margin <= 0.0,
            worst_margin,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SafeOptState {
    gps: Vec<GaussianProcess>,
    beta: f64,
    thresholds: Vec<f64>,
    samples: Vec<Sample>,
    iteration: usize,
}

impl SafeOptState {
    /// `kernels[0]` models the objective, `kernels[j]` constraint `j` with limit `thresholds[j - 1]`.
    pub fn new(
        kernels: Vec<KernelSpec>,
        beta: f64,
        thresholds: Vec<f64>,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        check_beta(beta)?;
        if kernels.len() < 2 {
            return Err(Error::input(
                "need one objective kernel and at least one constraint kernel",
            ));
        }
        if thresholds.len() != kernels.len() - 1 {
            return Err(Error::input(format!(
                "{} constraint kernels but {} thresholds",
                kernels.len() - 1,
                thresholds.len()
            )));
        }
        if let Some(t) = thresholds.iter().find(|t| !t.is_finite()) {
            return Err(Error::input(format!("threshold {t} is not finite")));
        }
        let dim = kernels[0].dim();
        if kernels.iter().any(|k| k.dim() != dim) {
            return Err(Error::input("kernels disagree on the input dimension"));
        }
        for s in &samples {
            if s.outputs.len() != kernels.len() {
                return Err(Error::input(format!(
                    "sample has {} outputs, expected {}",
                    s.outputs.len(),
                    kernels.len()
                )));
            }
        }
        let inputs: Vec<Vec<f64>> = samples.iter().map(|s| s.point.clone()).collect();
        let gps = kernels
            .into_iter()
            .enumerate()
            .map(|(j, k)| {
                let ys = samples.iter().map(|s| s.outputs[j]).collect();
                GaussianProcess::fit(k, inputs.clone(), ys)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SafeOptState {
            gps,
            beta,
            thresholds,
            samples,
            iteration: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.gps[0].dim()
    }

    /// Number of constraints `J`.
    pub fn num_constraints(&self) -> usize {
        self.thresholds.len()
    }

    /// `J + 1`.
    pub fn num_outputs(&self) -> usize {
        self.gps.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn objective_gp(&self) -> &GaussianProcess {
        &self.gps[0]
    }

    pub fn constraint_gps(&self) -> &[GaussianProcess] {
        &self.gps[1..]
    }

    pub fn gp(&self, output: usize) -> &GaussianProcess {
        &self.gps[output]
    }

    /// Appends a measurement to every GP and advances the iteration counter.
    pub fn add_sample(&mut self, point: Vec<f64>, outputs: Vec<f64>) -> Result<()> {
        if outputs.len() != self.num_outputs() {
            return Err(Error::input(format!(
                "measurement has {} outputs, expected {}",
                outputs.len(),
                self.num_outputs()
            )));
        }
        // Validate against a copy so a failure leaves the state consistent.
        let mut updated = self.gps.clone();
        for (gp, y) in updated.iter_mut().zip(&outputs) {
            gp.push_observation(&point, *y)?;
        }
        self.gps = updated;
        self.samples.push(Sample::new(point, outputs));
        self.iteration += 1;
        Ok(())
    }

    /// Index of the sample with the smallest measured objective (first on ties).
    pub fn incumbent(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, s) in self.samples.iter().enumerate() {
            if best.is_none_or(|b| s.objective() < self.samples[b].objective()) {
                best = Some(i);
            }
        }
        best
    }

    pub fn bounds(&self, x: &[f64], output: usize) -> Result<ConfidenceBounds> {
        self.gps[output].bounds(x, self.beta)
    }

    /// Bounds for every output, objective first.
    pub fn all_bounds(&self, x: &[f64]) -> Result<Vec<ConfidenceBounds>> {
        self.gps.iter().map(|gp| gp.bounds(x, self.beta)).collect()
    }

    /// Safety verdict from precomputed bounds for all outputs.
    pub fn verdict_from_bounds(&self, bounds: &[ConfidenceBounds]) -> SafetyVerdict {
        let margin = bounds[1..]
            .iter()
            .zip(&self.thresholds)
            .map(|(b, t)| b.upper - t)
            .fold(f64::NEG_INFINITY, f64::max);
        SafetyVerdict::from_margin(margin)
    }

    /// `u_n(x, j) ≤ J_max_j` for every constraint. The objective GP is not consulted.
    pub fn is_safe(&self, x: &[f64]) -> Result<SafetyVerdict> {
        let mut margin = f64::NEG_INFINITY;
        for (gp, t) in self.constraint_gps().iter().zip(&self.thresholds) {
            margin = margin.max(gp.bounds(x, self.beta)?.upper - t);
        }
        Ok(SafetyVerdict::from_margin(margin))
    }

    /// The safe candidate with the smallest objective upper bound, and that bound.
    pub fn min_safe_upper<'a, I>(&self, candidates: I) -> Result<(Vec<f64>, f64)>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut best: Option<(&[f64], f64)> = None;
        let mut seen = 0usize;
        for x in candidates {
            seen += 1;
            if !self.is_safe(x)?.is_safe {
                continue;
            }
            let u = self.bounds(x, 0)?.upper;
            if best.is_none_or(|(_, b)| u < b) {
                best = Some((x, u));
            }
        }
        best.map(|(x, u)| (x.to_vec(), u)).ok_or_else(|| {
            Error::EmptySafeSet(format!("none of {seen} candidates is certified safe"))
        })
    }

    /// `l_n(x, 0) ≤ l*`. Safety of `x` is the caller's responsibility.
    pub fn is_minimizer(&self, x: &[f64], l_star: f64) -> Result<bool> {
        Ok(self.bounds(x, 0)?.lower <= l_star)
    }

    /// Auxiliary GPs for every constraint with the optimistic artificial
    /// observation `(x, l_n(x, j))` appended.
    pub fn expansion_probe(&self, x: &[f64]) -> Result<ExpansionProbe<'_>> {
        let views = self
            .constraint_gps()
            .iter()
            .map(|gp| {
                let lower = gp.bounds(x, self.beta)?.lower;
                gp.condition(x, lower)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExpansionProbe {
            origin: x.to_vec(),
            views,
            thresholds: &self.thresholds,
            beta: self.beta,
        })
    }

    /// Whether observing the optimistic constraint values at `x` would certify `probe` safe.
    pub fn is_expander(&self, x: &[f64], probe: &[f64]) -> Result<bool> {
        self.expansion_probe(x)?.certifies(probe)
    }

    /// `max_j w_n(x, j)` over all outputs and the attaining index (smallest on ties).
    pub fn acquisition_width(&self, x: &[f64]) -> Result<(f64, usize)> {
        let bounds = self.all_bounds(x)?;
        Ok(widest(&bounds))
    }
}

/// Max width and its output index, first index winning ties.
pub(crate) fn widest(bounds: &[ConfidenceBounds]) -> (f64, usize) {
    let mut best = (bounds[0].width, 0);
    for (j, b) in bounds.iter().enumerate().skip(1) {
        if b.width > best.0 {
            best = (b.width, j);
        }
    }
    best
}

/// Constraint GPs conditioned on an optimistic observation at one origin point.
pub struct ExpansionProbe<'a> {
    origin: Vec<f64>,
    views: Vec<Conditioned<'a>>,
    thresholds: &'a [f64],
    beta: f64,
}

impl ExpansionProbe<'_> {
    /// `max_j u_aux,j(probe) − J_max_j`.
    pub fn margin(&self, probe: &[f64]) -> Result<f64> {
        let mut margin = f64::NEG_INFINITY;
        for (view, t) in self.views.iter().zip(self.thresholds) {
            margin = margin.max(view.bounds(probe, self.beta)?.upper - t);
        }
        Ok(margin)
    }

    pub fn certifies(&self, probe: &[f64]) -> Result<bool> {
        if probe == self.origin.as_slice() {
            return Err(Error::input(
                "expander probe coincides with the candidate expander",
            ));
        }
        Ok(self.margin(probe)? <= 0.0)
    }
}
