//! Gaussian process regression with an ARD squared-exponential kernel.
//!
//! The covariance factor is stored as a packed lower-triangular Cholesky
//! factor `L` of `K + σ_ω² I`, together with the whitened residuals
//! `z = L⁻¹ (y − ψ)`. With `v = L⁻¹ k(x)` the posterior is
//!
//! ```text
//! μ(x)  = ψ + vᵀ z
//! σ²(x) = k(x, x) − vᵀ v
//! ```
//!
//! Appending an observation only adds one row to `L` and one entry to `z`,
//! so incremental updates cost `O(R²)` instead of a full refactorization.
//! [`Conditioned`] uses the same bordering step without copying the factor,
//! which is what the expander searches rely on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pivots at or below this fraction of the signal variance count as a failed factorization.
const PIVOT_FLOOR: f64 = 1e-13;
/// Diagonal jitter (relative to the signal variance) used when a noiseless fit breaks down.
const JITTER: f64 = 1e-10;
/// Negative variances down to this fraction of the signal variance are round-off and clamp to zero.
const VARIANCE_ROUNDOFF: f64 = 1e-10;

/// Hyperparameters of one output's squared-exponential kernel plus its constant prior mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    #[serde(default)]
    pub noise_variance: f64,
    #[serde(default)]
    pub prior_mean: f64,
}

impl KernelSpec {
    pub fn new(
        lengthscales: Vec<f64>,
        signal_variance: f64,
        noise_variance: f64,
        prior_mean: f64,
    ) -> Result<Self> {
        let spec = KernelSpec {
            lengthscales,
            signal_variance,
            noise_variance,
            prior_mean,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::input("kernel needs at least one lengthscale"));
        }
        if let Some(l) = self
            .lengthscales
            .iter()
            .find(|l| !(l.is_finite() && **l > 0.0))
        {
            return Err(Error::input(format!("lengthscale {l} must be positive")));
        }
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(Error::input(format!(
                "signal variance {} must be positive",
                self.signal_variance
            )));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(Error::input(format!(
                "noise variance {} must be non-negative",
                self.noise_variance
            )));
        }
        if !self.prior_mean.is_finite() {
            return Err(Error::input("prior mean must be finite"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check_dim(a)?;
        self.check_dim(b)?;
        Ok(self.eval_unchecked(a, b))
    }

    pub(crate) fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::input(format!(
                "point has dimension {}, kernel expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((ai, bi), l) in a.iter().zip(b).zip(&self.lengthscales) {
            let d = (ai - bi) / l;
            r2 += d * d;
        }
        self.signal_variance * (-0.5 * r2).exp()
    }
}

/// `σ_f² · exp(−½ Σ_d ((a_d − b_d)/ℓ_d)²)`.
pub fn kernel_eval(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    spec.eval(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
}

impl Posterior {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn bounds(&self, beta: f64) -> ConfidenceBounds {
        ConfidenceBounds::new(self.mean, self.std_dev(), beta)
    }
}

/// `[μ − βσ, μ + βσ]` and its width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceBounds {
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
}

impl ConfidenceBounds {
    fn new(mean: f64, std_dev: f64, beta: f64) -> Self {
        let lower = mean - beta * std_dev;
        let upper = mean + beta * std_dev;
        ConfidenceBounds {
            lower,
            upper,
            width: upper - lower,
        }
    }
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(Error::input(format!("beta must be positive, got {beta}")))
    }
}

#[derive(Clone, Debug)]
pub struct GaussianProcess {
    kernel: KernelSpec,
    inputs: Vec<Vec<f64>>,
    outputs: Vec<f64>,
    /// Packed rows of the lower Cholesky factor; row `i` starts at `i(i+1)/2`.
    factor: Vec<f64>,
    whitened: Vec<f64>,
    /// Diagonal jitter that a full fit had to add; zero in the normal case.
    jitter: f64,
}

impl GaussianProcess {
    /// A GP with no observations; queries return the prior.
    pub fn new(kernel: KernelSpec) -> Result<Self> {
        kernel.validate()?;
        Ok(GaussianProcess {
            kernel,
            inputs: Vec::new(),
            outputs: Vec::new(),
            factor: Vec::new(),
            whitened: Vec::new(),
            jitter: 0.0,
        })
    }

    /// Fits from scratch. A noiseless kernel whose Gram matrix is not positive
    /// definite (duplicate inputs) is retried once with diagonal jitter.
    pub fn fit(kernel: KernelSpec, inputs: Vec<Vec<f64>>, outputs: Vec<f64>) -> Result<Self> {
        kernel.validate()?;
        if inputs.len() != outputs.len() {
            return Err(Error::input(format!(
                "{} inputs but {} outputs",
                inputs.len(),
                outputs.len()
            )));
        }
        for x in &inputs {
            kernel.check_dim(x)?;
        }
        if let Some(y) = outputs.iter().find(|y| !y.is_finite()) {
            return Err(Error::input(format!("non-finite observation {y}")));
        }
        match Self::factorize(&kernel, &inputs, 0.0) {
            Ok(factor) => Ok(Self::assemble(kernel, inputs, outputs, factor, 0.0)),
            Err(e) if kernel.noise_variance == 0.0 => {
                let jitter = JITTER * kernel.signal_variance;
                log::debug!("{e}; refitting with diagonal jitter {jitter:e}");
                let factor = Self::factorize(&kernel, &inputs, jitter)?;
                Ok(Self::assemble(kernel, inputs, outputs, factor, jitter))
            }
            Err(e) => Err(e),
        }
    }

    fn assemble(
        kernel: KernelSpec,
        inputs: Vec<Vec<f64>>,
        outputs: Vec<f64>,
        factor: Vec<f64>,
        jitter: f64,
    ) -> Self {
        let mut gp = GaussianProcess {
            kernel,
            inputs,
            outputs,
            factor,
            whitened: Vec::new(),
            jitter,
        };
        let psi = gp.kernel.prior_mean;
        let residuals: Vec<f64> = gp.outputs.iter().map(|y| y - psi).collect();
        gp.whitened = gp.forward_solve(&residuals);
        gp
    }

    fn factorize(kernel: &KernelSpec, inputs: &[Vec<f64>], jitter: f64) -> Result<Vec<f64>> {
        let n = inputs.len();
        let floor = PIVOT_FLOOR * kernel.signal_variance;
        let mut l = vec![0.0; n * (n + 1) / 2];
        for i in 0..n {
            let ri = i * (i + 1) / 2;
            for j in 0..=i {
                let rj = j * (j + 1) / 2;
                let mut s = kernel.eval_unchecked(&inputs[i], &inputs[j]);
                for k in 0..j {
                    s -= l[ri + k] * l[rj + k];
                }
                if i == j {
                    let pivot = s + kernel.noise_variance + jitter;
                    if pivot <= floor {
                        return Err(Error::Numerical(format!(
                            "covariance matrix not positive definite at observation {i} \
                             (pivot {pivot:.3e}); duplicate inputs with zero noise variance?"
                        )));
                    }
                    l[ri + i] = pivot.sqrt();
                } else {
                    l[ri + j] = s / l[rj + j];
                }
            }
        }
        Ok(l)
    }

    /// Solves `L v = b` for the current factor (`b.len()` may not exceed R).
    fn forward_solve(&self, b: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(b.len());
        for (i, bi) in b.iter().enumerate() {
            let row = &self.factor[i * (i + 1) / 2..(i + 1) * (i + 2) / 2];
            let mut s = *bi;
            for k in 0..i {
                s -= row[k] * v[k];
            }
            v.push(s / row[i]);
        }
        v
    }

    /// `v = L⁻¹ k_R(x)`.
    fn whiten(&self, x: &[f64]) -> Vec<f64> {
        let k: Vec<f64> = self
            .inputs
            .iter()
            .map(|xi| self.kernel.eval_unchecked(xi, x))
            .collect();
        self.forward_solve(&k)
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn posterior(&self, x: &[f64]) -> Result<Posterior> {
        self.kernel.check_dim(x)?;
        let v = self.whiten(x);
        let mean = self.kernel.prior_mean + dot(&v, &self.whitened);
        let variance = clamp_variance(
            self.kernel.eval_unchecked(x, x) - dot(&v, &v),
            self.kernel.signal_variance,
        )?;
        Ok(Posterior { mean, variance })
    }

    pub fn bounds(&self, x: &[f64], beta: f64) -> Result<ConfidenceBounds> {
        check_beta(beta)?;
        Ok(self.posterior(x)?.bounds(beta))
    }

    /// Returns a new GP with `(x, y)` appended.
    pub fn add_observation(&self, x: &[f64], y: f64) -> Result<Self> {
        let mut gp = self.clone();
        gp.push_observation(x, y)?;
        Ok(gp)
    }

    /// In-place variant of [`add_observation`](Self::add_observation) for drivers that own their GPs.
    pub fn push_observation(&mut self, x: &[f64], y: f64) -> Result<()> {
        self.kernel.check_dim(x)?;
        if !y.is_finite() {
            return Err(Error::input(format!("non-finite observation {y}")));
        }
        let border = Border::new(self, x, y)?;
        self.factor.extend_from_slice(&border.row);
        self.factor.push(border.diag);
        self.whitened.push(border.whitened);
        self.inputs.push(x.to_vec());
        self.outputs.push(y);
        Ok(())
    }

    /// The GP that would result from observing `y` at `x`, for hypothetical
    /// reasoning. `self` is left untouched.
    pub fn with_artificial_observation(&self, x: &[f64], y: f64) -> Result<Self> {
        self.add_observation(x, y)
    }

    /// Borrowing form of [`with_artificial_observation`](Self::with_artificial_observation):
    /// identical arithmetic, no copy of the factor.
    pub fn condition(&self, x: &[f64], y: f64) -> Result<Conditioned<'_>> {
        self.kernel.check_dim(x)?;
        let border = Border::new(self, x, y)?;
        Ok(Conditioned {
            base: self,
            point: x.to_vec(),
            border,
        })
    }
}

/// One new row of the bordered Cholesky factor.
#[derive(Clone, Debug)]
struct Border {
    row: Vec<f64>,
    diag: f64,
    whitened: f64,
}

impl Border {
    fn new(gp: &GaussianProcess, x: &[f64], y: f64) -> Result<Self> {
        let kernel = &gp.kernel;
        let row = gp.whiten(x);
        let base = kernel.eval_unchecked(x, x) + kernel.noise_variance + gp.jitter;
        let floor = PIVOT_FLOOR * kernel.signal_variance;
        let mut pivot = base - dot(&row, &row);
        if pivot <= floor && kernel.noise_variance == 0.0 {
            let jitter = JITTER * kernel.signal_variance;
            log::debug!("degenerate pivot {pivot:.3e} while adding an observation; adding jitter {jitter:e}");
            pivot += jitter;
        }
        if pivot <= floor {
            return Err(Error::Numerical(format!(
                "covariance matrix not positive definite after adding observation {} \
                 (pivot {pivot:.3e})",
                gp.len()
            )));
        }
        let diag = pivot.sqrt();
        let whitened = ((y - kernel.prior_mean) - dot(&row, &gp.whitened)) / diag;
        Ok(Border {
            row,
            diag,
            whitened,
        })
    }
}

/// A GP plus one hypothetical observation, borrowed from its base.
#[derive(Clone, Debug)]
pub struct Conditioned<'a> {
    base: &'a GaussianProcess,
    point: Vec<f64>,
    border: Border,
}

impl Conditioned<'_> {
    pub fn posterior(&self, x: &[f64]) -> Result<Posterior> {
        let base = self.base;
        base.kernel.check_dim(x)?;
        let mut v = base.whiten(x);
        let k_new = base.kernel.eval_unchecked(&self.point, x);
        let mut s = k_new;
        for (r, vi) in self.border.row.iter().zip(&v) {
            s -= r * vi;
        }
        v.push(s / self.border.diag);
        let mut mean_part = 0.0;
        for (vi, zi) in v.iter().zip(base.whitened.iter().chain([&self.border.whitened])) {
            mean_part += vi * zi;
        }
        let variance = clamp_variance(
            base.kernel.eval_unchecked(x, x) - dot(&v, &v),
            base.kernel.signal_variance,
        )?;
        Ok(Posterior {
            mean: base.kernel.prior_mean + mean_part,
            variance,
        })
    }

    pub fn bounds(&self, x: &[f64], beta: f64) -> Result<ConfidenceBounds> {
        check_beta(beta)?;
        Ok(self.posterior(x)?.bounds(beta))
    }
}

fn clamp_variance(variance: f64, signal_variance: f64) -> Result<f64> {
    if variance >= 0.0 {
        Ok(variance)
    } else if variance >= -VARIANCE_ROUNDOFF * signal_variance {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!(
            "posterior variance {variance:.3e} is negative beyond round-off"
        )))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}
