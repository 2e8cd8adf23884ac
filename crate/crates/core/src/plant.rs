//! Simulated cascade position/speed control loop and its measurement metrics.
//!
//! The loop is `P_s → K_p → (+S_s, −S) → K_v + K_vi/s → G(s) → S → 1/s → P`.
//! [`BallScrewPlant`] turns one simulation into an objective and one
//! stability constraint; [`QuadraticPlant`] is an analytic toy with the same
//! interface. The trace metrics at the bottom of the module work on recorded
//! error signals and do not depend on the simulator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn plant_err(msg: impl Into<String>) -> Error {
    Error::Plant(msg.into())
}

/// Rational transfer function with coefficients in descending powers of `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferFunction {
    pub numerator: Vec<f64>,
    pub denominator: Vec<f64>,
}

impl TransferFunction {
    pub fn new(numerator: Vec<f64>, denominator: Vec<f64>) -> Result<Self> {
        let tf = TransferFunction {
            numerator,
            denominator,
        };
        tf.validate()?;
        Ok(tf)
    }

    /// `gain·ω²/(s² + 2ζω s + ω²)`.
    pub fn second_order(natural_frequency: f64, damping: f64, gain: f64) -> Self {
        let w2 = natural_frequency * natural_frequency;
        TransferFunction {
            numerator: vec![gain * w2],
            denominator: vec![1.0, 2.0 * damping * natural_frequency, w2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|c| c.is_finite());
        if self.denominator.is_empty() || self.numerator.is_empty() {
            return Err(plant_err("transfer function needs nonempty coefficient lists"));
        }
        if !finite(&self.numerator) || !finite(&self.denominator) {
            return Err(plant_err("transfer function coefficients must be finite"));
        }
        if self.denominator[0] == 0.0 {
            return Err(plant_err("denominator leading coefficient is zero"));
        }
        if self.numerator.len() > self.denominator.len() {
            return Err(plant_err("transfer function is improper"));
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.denominator.len() - 1
    }

    /// Controllable canonical realisation.
    fn realise(&self) -> StateSpace {
        let m = self.order();
        let lead = self.denominator[0];
        let a: Vec<f64> = self.denominator[1..].iter().map(|c| c / lead).collect();
        let mut b = vec![0.0; m + 1 - self.numerator.len()];
        b.extend(self.numerator.iter().map(|c| c / lead));
        let d = b[0];
        // x_1..x_m with x_i' = x_{i+1}; output weights run from x_1 (s^0) up.
        let c = (0..m).map(|i| b[m - i] - a[m - 1 - i] * d).collect();
        let last_row = (0..m).map(|i| -a[m - 1 - i]).collect();
        StateSpace { last_row, c, d }
    }
}

struct StateSpace {
    last_row: Vec<f64>,
    c: Vec<f64>,
    d: f64,
}

impl StateSpace {
    fn order(&self) -> usize {
        self.c.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Setpoint {
    /// `clamp(amplitude·sin(2πt/period), lower, upper)`.
    TruncatedSine {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        lower: f64,
        #[serde(default = "default_upper")]
        upper: f64,
    },
    Constant {
        value: f64,
    },
    /// Values at multiples of the time step, linearly interpolated between
    /// and held after the last one.
    Series {
        values: Vec<f64>,
    },
}

fn default_upper() -> f64 {
    0.9
}

impl Setpoint {
    fn validate(&self) -> Result<()> {
        match self {
            Setpoint::TruncatedSine {
                amplitude,
                period,
                lower,
                upper,
            } => {
                if !(amplitude.is_finite() && *period > 0.0 && period.is_finite() && lower <= upper) {
                    return Err(plant_err("truncated sine needs finite amplitude, period > 0, lower <= upper"));
                }
            }
            Setpoint::Constant { value } => {
                if !value.is_finite() {
                    return Err(plant_err("constant setpoint must be finite"));
                }
            }
            Setpoint::Series { values } => {
                if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                    return Err(plant_err("setpoint series must be nonempty and finite"));
                }
            }
        }
        Ok(())
    }

    pub fn at(&self, t: f64, time_step: f64) -> f64 {
        match self {
            Setpoint::TruncatedSine {
                amplitude,
                period,
                lower,
                upper,
            } => (amplitude * (2.0 * std::f64::consts::PI * t / period).sin()).clamp(*lower, *upper),
            Setpoint::Constant { value } => *value,
            Setpoint::Series { values } => {
                let pos = (t / time_step).max(0.0);
                let i = pos.floor() as usize;
                if i + 1 >= values.len() {
                    return *values.last().unwrap();
                }
                let frac = pos - i as f64;
                values[i] + frac * (values[i + 1] - values[i])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantModel {
    pub drive: TransferFunction,
    pub time_step: f64,
    pub horizon: f64,
    pub setpoint: Setpoint,
    #[serde(default)]
    pub speed_feedforward: f64,
    #[serde(default = "default_ceiling")]
    pub saturation: f64,
}

fn default_ceiling() -> f64 {
    1e6
}

impl Default for PlantModel {
    fn default() -> Self {
        PlantModel {
            drive: TransferFunction::second_order(40.0, 0.7, 0.5),
            time_step: 1e-3,
            horizon: 12.0,
            setpoint: Setpoint::TruncatedSine {
                amplitude: 1.0,
                period: 4.0,
                lower: 0.0,
                upper: 0.9,
            },
            speed_feedforward: 0.0,
            saturation: default_ceiling(),
        }
    }
}

impl PlantModel {
    pub fn validate(&self) -> Result<()> {
        self.drive.validate()?;
        self.setpoint.validate()?;
        if !(self.time_step > 0.0 && self.time_step.is_finite()) {
            return Err(plant_err("time step must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(plant_err("horizon must be positive"));
        }
        if self.horizon / self.time_step > 1e8 {
            return Err(plant_err("horizon / time step exceeds 1e8 samples"));
        }
        if !(self.saturation > 0.0) || !self.speed_feedforward.is_finite() {
            return Err(plant_err("saturation must be positive and feedforward finite"));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.horizon / self.time_step).round() as usize + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub kp: f64,
    pub kv: f64,
    pub kvi: f64,
}

impl Gains {
    pub fn from_slice(x: &[f64]) -> Result<Self> {
        match x {
            [kp, kv, kvi] if x.iter().all(|v| v.is_finite()) => Ok(Gains {
                kp: *kp,
                kv: *kv,
                kvi: *kvi,
            }),
            _ => Err(Error::input(format!("expected 3 finite gains, got {x:?}"))),
        }
    }
}

/// Position, speed and setpoint sampled at `k·time_step`, `k = 0..samples`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub time_step: f64,
    pub position: Vec<f64>,
    pub speed: Vec<f64>,
    pub setpoint: Vec<f64>,
    pub saturated: bool,
}

impl Trace {
    pub fn position_error(&self) -> Vec<f64> {
        self.position
            .iter()
            .zip(&self.setpoint)
            .map(|(p, s)| p - s)
            .collect()
    }
}

struct Loop<'a> {
    ss: StateSpace,
    gains: Gains,
    model: &'a PlantModel,
}

impl Loop<'_> {
    /// Returns (speed, derivative) for the stacked state `[x.., I, P]`.
    fn eval(&self, t: f64, state: &[f64], deriv: &mut [f64]) -> f64 {
        let m = self.ss.order();
        let Gains { kp, kv, kvi } = self.gains;
        let (x, integral, pos) = (&state[..m], state[m], state[m + 1]);
        let reference = kp * (self.model.setpoint.at(t, self.model.time_step) - pos) + self.model.speed_feedforward;
        let cx: f64 = self.ss.c.iter().zip(x).map(|(c, v)| c * v).sum();
        let speed = (cx + self.ss.d * (kv * reference + kvi * integral)) / (1.0 + self.ss.d * kv);
        let speed_err = reference - speed;
        let u = kv * speed_err + kvi * integral;
        if m > 0 {
            deriv[..m - 1].copy_from_slice(&x[1..]);
            deriv[m - 1] = self.ss.last_row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + u;
        }
        deriv[m] = speed_err;
        deriv[m + 1] = speed;
        speed
    }
}

/// Fixed-step RK4 simulation of the closed loop. States leaving
/// `[-saturation, saturation]` are clamped and the trace is flagged.
pub fn simulate(model: &PlantModel, gains: Gains) -> Result<Trace> {
    model.validate()?;
    let ss = model.drive.realise();
    if (1.0 + ss.d * gains.kv).abs() < 1e-12 {
        return Err(plant_err("algebraic loop is singular for these gains"));
    }
    let lp = Loop { ss, gains, model };
    let dim = lp.ss.order() + 2;
    let n = model.samples();
    let h = model.time_step;
    let mut state = vec![0.0; dim];
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let mut trace = Trace {
        time_step: h,
        position: Vec::with_capacity(n),
        speed: Vec::with_capacity(n),
        setpoint: Vec::with_capacity(n),
        saturated: false,
    };
    let ceiling = model.saturation;
    for k in 0..n {
        let t = k as f64 * h;
        let speed = lp.eval(t, &state, &mut k1);
        trace.position.push(state[dim - 1]);
        trace.speed.push(speed.clamp(-ceiling, ceiling));
        trace.setpoint.push(model.setpoint.at(t, h));
        if k + 1 == n {
            break;
        }
        for i in 0..dim {
            tmp[i] = state[i] + 0.5 * h * k1[i];
        }
        lp.eval(t + 0.5 * h, &tmp, &mut k2);
        for i in 0..dim {
            tmp[i] = state[i] + 0.5 * h * k2[i];
        }
        lp.eval(t + 0.5 * h, &tmp, &mut k3);
        for i in 0..dim {
            tmp[i] = state[i] + h * k3[i];
        }
        lp.eval(t + h, &tmp, &mut k4);
        for i in 0..dim {
            let next = state[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            state[i] = if next.is_nan() {
                trace.saturated = true;
                ceiling
            } else if next.abs() > ceiling {
                trace.saturated = true;
                next.clamp(-ceiling, ceiling)
            } else {
                next
            };
        }
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantObjectiveConfig {
    pub tracking_weight: f64,
    pub constraint_scale: f64,
    pub margin: f64,
    /// Upper clip applied to the constraint value; the sign is never changed.
    pub constraint_cap: f64,
}

impl Default for PlantObjectiveConfig {
    fn default() -> Self {
        PlantObjectiveConfig {
            tracking_weight: 1000.0,
            constraint_scale: 100.0,
            margin: 0.005,
            constraint_cap: 10.0,
        }
    }
}

impl PlantObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tracking_weight > 0.0 && self.constraint_scale > 0.0) {
            return Err(plant_err("objective weights must be positive"));
        }
        if !self.margin.is_finite() || !(self.constraint_cap > 0.0) {
            return Err(plant_err("margin must be finite and constraint cap positive"));
        }
        Ok(())
    }
}

/// `γ₁·Σ|P − P_s|·dt + max|S|`.
pub fn objective_j(
    position: &[f64],
    setpoint: &[f64],
    speed: &[f64],
    cfg: &PlantObjectiveConfig,
    time_step: f64,
) -> Result<f64> {
    if position.len() != setpoint.len() || position.len() != speed.len() {
        return Err(Error::input("objective traces must have equal length"));
    }
    let l1: f64 = position.iter().zip(setpoint).map(|(p, s)| (p - s).abs()).sum::<f64>() * time_step;
    let peak = speed.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    Ok(cfg.tracking_weight * l1 + peak)
}

const PEAK_PROMINENCE: f64 = 1e-9;

/// Indices of strict local maxima whose prominence exceeds 1e-9.
fn peaks(a: &[f64]) -> Vec<usize> {
    let n = a.len();
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if a[i] > a[i - 1] {
            // Walk across a plateau; it counts only if it then descends.
            let mut j = i;
            while j + 1 < n && a[j + 1] == a[i] {
                j += 1;
            }
            if j + 1 < n && a[j + 1] < a[i] {
                let top = a[i];
                let mut left_min = top;
                for v in a[..i].iter().rev() {
                    if *v > top {
                        break;
                    }
                    left_min = left_min.min(*v);
                }
                let mut right_min = top;
                for v in &a[j + 1..] {
                    if *v > top {
                        break;
                    }
                    right_min = right_min.min(*v);
                }
                if top - left_min.max(right_min) > PEAK_PROMINENCE {
                    out.push(i);
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Least-squares slope of the peak amplitudes of `|signal|` against their
/// times; zero when fewer than two peaks exist.
pub fn peak_slope(signal: &[f64], time_step: f64) -> Result<f64> {
    if signal.len() < 3 {
        return Err(Error::input("peak_slope needs at least 3 samples"));
    }
    let abs: Vec<f64> = signal.iter().map(|v| v.abs()).collect();
    let idx = peaks(&abs);
    if idx.len() < 2 {
        return Ok(0.0);
    }
    let k = idx.len() as f64;
    let tm = idx.iter().map(|i| *i as f64 * time_step).sum::<f64>() / k;
    let am = idx.iter().map(|i| abs[*i]).sum::<f64>() / k;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in &idx {
        let dt = *i as f64 * time_step - tm;
        sxy += dt * (abs[*i] - am);
        sxx += dt * dt;
    }
    Ok(sxy / sxx)
}

/// `γ₂·(p₁ − σ)`, without the cap.
pub fn constraint_h(p1: f64, cfg: &PlantObjectiveConfig) -> f64 {
    cfg.constraint_scale * (p1 - cfg.margin)
}

/// Noise-free objective and capped constraint of one trace. A saturated
/// trace is unstable by definition, so its constraint is forced to the cap.
pub fn evaluate_trace(trace: &Trace, cfg: &PlantObjectiveConfig) -> Result<(f64, f64)> {
    let j = objective_j(&trace.position, &trace.setpoint, &trace.speed, cfg, trace.time_step)?;
    let h = if trace.saturated {
        cfg.constraint_cap
    } else {
        let p1 = peak_slope(&trace.position_error(), trace.time_step)?;
        constraint_h(p1, cfg).min(cfg.constraint_cap)
    };
    Ok((j, h))
}

/// Anything that can be measured at a parameter vector: the first output is
/// the objective, the rest are constraints.
pub trait Plant {
    fn dim(&self) -> usize;
    fn num_outputs(&self) -> usize;
    /// One (possibly noisy) measurement.
    fn measure(&mut self, x: &[f64]) -> Result<Vec<f64>>;
    /// Noise-free outputs, used to audit safety after a run.
    fn true_outputs(&self, x: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug)]
struct Noise {
    dist: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl Noise {
    fn new(std: f64, seed: u64) -> Result<Self> {
        let dist = if std > 0.0 {
            Some(Normal::new(0.0, std).map_err(|e| plant_err(e.to_string()))?)
        } else if std == 0.0 {
            None
        } else {
            return Err(plant_err("noise standard deviation must be >= 0"));
        };
        Ok(Noise {
            dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn apply(&mut self, values: &mut [f64]) {
        if let Some(d) = &self.dist {
            for v in values {
                *v += d.sample(&mut self.rng);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BallScrewPlant {
    pub model: PlantModel,
    pub objective: PlantObjectiveConfig,
    noise: Noise,
}

impl BallScrewPlant {
    pub fn new(model: PlantModel, objective: PlantObjectiveConfig, noise_std: f64, seed: u64) -> Result<Self> {
        model.validate()?;
        objective.validate()?;
        Ok(BallScrewPlant {
            model,
            objective,
            noise: Noise::new(noise_std, seed)?,
        })
    }

    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        simulate(&self.model, Gains::from_slice(x)?)
    }
}

impl Plant for BallScrewPlant {
    fn dim(&self) -> usize {
        3
    }

    fn num_outputs(&self) -> usize {
        2
    }

    fn measure(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.true_outputs(x)?;
        self.noise.apply(&mut out);
        Ok(out)
    }

    fn true_outputs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (j, h) = evaluate_trace(&self.trace(x)?, &self.objective)?;
        Ok(vec![j, h])
    }
}

/// `f(x) = offset + Σ w_d (x_d − c_d)²` with the single constraint
/// `‖x − c_g‖² − r²`, which is safe inside a ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    pub center: Vec<f64>,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub offset: f64,
    pub safe_center: Vec<f64>,
    pub safe_radius: f64,
}

impl QuadraticSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.center.len();
        if n == 0 || self.weights.len() != n || self.safe_center.len() != n {
            return Err(plant_err("quadratic plant vectors must share a nonzero length"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || !(self.safe_radius > 0.0) {
            return Err(plant_err("quadratic weights must be >= 0 and radius > 0"));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.center.len() {
            return Err(Error::input(format!(
                "point has dimension {}, plant expects {}",
                x.len(),
                self.center.len()
            )));
        }
        let f = self.offset
            + x.iter()
                .zip(&self.center)
                .zip(&self.weights)
                .map(|((v, c), w)| w * (v - c) * (v - c))
                .sum::<f64>();
        let g = x
            .iter()
            .zip(&self.safe_center)
            .map(|(v, c)| (v - c) * (v - c))
            .sum::<f64>()
            - self.safe_radius * self.safe_radius;
        Ok(vec![f, g])
    }
}

#[derive(Clone, Debug)]
pub struct QuadraticPlant {
    pub spec: QuadraticSpec,
    noise: Noise,
}

impl QuadraticPlant {
    pub fn new(spec: QuadraticSpec, noise_std: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(QuadraticPlant {
            spec,
            noise: Noise::new(noise_std, seed)?,
        })
    }
}

impl Plant for QuadraticPlant {
    fn dim(&self) -> usize {
        self.spec.center.len()
    }

    fn num_outputs(&self) -> usize {
        2
    }

    fn measure(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.spec.eval(x)?;
        self.noise.apply(&mut out);
        Ok(out)
    }

    fn true_outputs(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.spec.eval(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceMetricsConfig {
    pub motion_end: usize,
    pub settle_end: usize,
    #[serde(default = "default_band")]
    pub band: [f64; 2],
    pub sample_rate: f64,
}

fn default_band() -> [f64; 2] {
    [140.0, 1250.0]
}

impl TraceMetricsConfig {
    fn check_window(&self, len: usize) -> Result<()> {
        if self.settle_end <= self.motion_end {
            return Err(Error::input(format!(
                "settle_end {} must exceed motion_end {}",
                self.settle_end, self.motion_end
            )));
        }
        if self.settle_end >= len {
            return Err(Error::input(format!(
                "trace of length {len} does not reach index {}",
                self.settle_end
            )));
        }
        Ok(())
    }
}

/// Right-sided sigmoid filter `1 − 1/(1 + exp(−(i − n_s − 150)/10))`.
pub fn xi(i: usize, motion_end: usize) -> f64 {
    let z = -((i as f64) - (motion_end as f64) - 150.0) / 10.0;
    1.0 - 1.0 / (1.0 + z.exp())
}

/// `Σ_{i=n_s}^{n_P} |ξ(i,n_s)·e_i| / (n_P − n_s)`.
pub fn e_avg(error: &[f64], cfg: &TraceMetricsConfig) -> Result<f64> {
    cfg.check_window(error.len())?;
    let sum: f64 = (cfg.motion_end..=cfg.settle_end)
        .map(|i| (xi(i, cfg.motion_end) * error[i]).abs())
        .sum();
    Ok(sum / (cfg.settle_end - cfg.motion_end) as f64)
}

/// Largest DFT magnitude of the ξ-filtered window `n_s..=n_P` over bins whose
/// frequency lies in the band.
pub fn fft_max(error: &[f64], cfg: &TraceMetricsConfig) -> Result<f64> {
    cfg.check_window(error.len())?;
    let [lo, hi] = cfg.band;
    if !(cfg.sample_rate > 0.0 && lo > 0.0 && lo < hi && hi <= cfg.sample_rate / 2.0) {
        return Err(Error::input(format!(
            "band [{lo}, {hi}] Hz must lie inside (0, {}] Hz",
            cfg.sample_rate / 2.0
        )));
    }
    let mut buf: Vec<Complex<f64>> = (cfg.motion_end..=cfg.settle_end)
        .map(|i| Complex::new(xi(i, cfg.motion_end) * error[i], 0.0))
        .collect();
    let n = buf.len();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let df = cfg.sample_rate / n as f64;
    Ok((0..=n / 2)
        .filter(|k| {
            let f = *k as f64 * df;
            f >= lo && f <= hi
        })
        .map(|k| buf[k].norm())
        .fold(0.0, f64::max))
}
