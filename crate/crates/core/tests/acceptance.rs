//! End-to-end acceptance checks. Each `criterion_*` test is one pass/fail line.
//!
//! Oracles here are written independently of the library internals: dense
//! linear algebra through nalgebra, literal set definitions evaluated without
//! caching, brute-force pairing and direct DFT sums.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safeopt::config::ExperimentConfig;
use safeopt::grid::{grid_step, GridSpec};
use safeopt::gridfree::pair_nearest;
use safeopt::harness::run_experiment;
use safeopt::plant::{e_avg, fft_max, xi, TraceMetricsConfig};
use safeopt::{GaussianProcess, KernelSpec, Sample, SafeOptState, SearchBox};

// ---------------------------------------------------------------------------
// Dense GP oracle

struct DenseGp {
    kernel: KernelSpec,
    inputs: Vec<Vec<f64>>,
    alpha: DVector<f64>,
    gram: DMatrix<f64>,
}

fn k_se(kernel: &KernelSpec, a: &[f64], b: &[f64]) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(&kernel.lengthscales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    kernel.signal_variance * (-0.5 * r2).exp()
}

impl DenseGp {
    fn fit(kernel: &KernelSpec, inputs: &[Vec<f64>], outputs: &[f64]) -> Self {
        let n = inputs.len();
        let gram = DMatrix::from_fn(n, n, |i, j| {
            k_se(kernel, &inputs[i], &inputs[j]) + if i == j { kernel.noise_variance } else { 0.0 }
        });
        let y = DVector::from_iterator(n, outputs.iter().map(|v| v - kernel.prior_mean));
        let alpha = gram.clone().lu().solve(&y).expect("oracle gram matrix is singular");
        DenseGp {
            kernel: kernel.clone(),
            inputs: inputs.to_vec(),
            alpha,
            gram,
        }
    }

    fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let n = self.inputs.len();
        if n == 0 {
            return (self.kernel.prior_mean, self.kernel.signal_variance);
        }
        let kx = DVector::from_iterator(n, self.inputs.iter().map(|xi| k_se(&self.kernel, xi, x)));
        let mean = self.kernel.prior_mean + kx.dot(&self.alpha);
        let v = self.gram.clone().lu().solve(&kx).unwrap();
        let var = (self.kernel.signal_variance - kx.dot(&v)).max(0.0);
        (mean, var)
    }

    fn bounds(&self, x: &[f64], beta: f64) -> (f64, f64) {
        let (m, v) = self.posterior(x);
        (m - beta * v.sqrt(), m + beta * v.sqrt())
    }
}

fn random_kernel(rng: &mut ChaCha8Rng, dim: usize, noise: bool) -> KernelSpec {
    KernelSpec::new(
        (0..dim).map(|_| rng.gen_range(0.2..1.5)).collect(),
        rng.gen_range(0.5..3.0),
        if noise { rng.gen_range(1e-3..1e-1) } else { 0.0 },
        rng.gen_range(-1.0..1.0),
    )
    .unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
}

#[test]
fn criterion_01_gp_numerics_match_dense_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_mean, mut worst_var, mut worst_inc) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let dim = rng.gen_range(1..=5);
        let r = rng.gen_range(1..=50);
        let kernel = random_kernel(&mut rng, dim, true);
        let xs = random_points(&mut rng, r, dim);
        let ys: Vec<f64> = (0..r).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let gp = GaussianProcess::fit(kernel.clone(), xs.clone(), ys.clone()).unwrap();
        let oracle = DenseGp::fit(&kernel, &xs, &ys);
        for q in random_points(&mut rng, 10, dim) {
            let p = gp.posterior(&q).unwrap();
            let (m, v) = oracle.posterior(&q);
            worst_mean = worst_mean.max((p.mean - m).abs());
            worst_var = worst_var.max((p.variance - v).abs());
        }
        // Grow a second model one observation at a time and compare with a refit.
        let split = r / 2;
        let mut inc = GaussianProcess::fit(kernel.clone(), xs[..split].to_vec(), ys[..split].to_vec()).unwrap();
        for i in split..r {
            inc = inc.add_observation(&xs[i], ys[i]).unwrap();
        }
        for q in random_points(&mut rng, 5, dim) {
            let a = inc.posterior(&q).unwrap();
            let b = gp.posterior(&q).unwrap();
            worst_inc = worst_inc.max((a.mean - b.mean).abs()).max((a.variance - b.variance).abs());
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    println!("criterion 1: mean err {worst_mean:.2e}, var err {worst_var:.2e}, incremental err {worst_inc:.2e}, {elapsed:.2}s");
    assert!(worst_mean <= 1e-10, "posterior mean deviates by {worst_mean:e}");
    assert!(worst_var <= 1e-10, "posterior variance deviates by {worst_var:e}");
    assert!(worst_inc <= 1e-8, "incremental update deviates by {worst_inc:e}");
    assert!(elapsed < 10.0, "took {elapsed:.1}s");
}

// ---------------------------------------------------------------------------
// Literal grid SafeOpt iteration

struct LiteralStep {
    index: usize,
    safe: Vec<usize>,
    minimizers: Vec<usize>,
    expanders: Vec<usize>,
}

/// One iteration of grid SafeOpt recomputed from the set definitions, with
/// every posterior evaluated by a fresh dense solve.
fn literal_grid_step(
    kernels: &[KernelSpec],
    samples: &[Sample],
    beta: f64,
    thresholds: &[f64],
    grid: &[Vec<f64>],
) -> Option<LiteralStep> {
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.point.clone()).collect();
    let gps: Vec<DenseGp> = kernels
        .iter()
        .enumerate()
        .map(|(j, k)| DenseGp::fit(k, &xs, &samples.iter().map(|s| s.outputs[j]).collect::<Vec<_>>()))
        .collect();
    let u = |x: &[f64], j: usize| gps[j].bounds(x, beta).1;
    let l = |x: &[f64], j: usize| gps[j].bounds(x, beta).0;
    let in_safe = |x: &[f64]| (1..kernels.len()).all(|j| u(x, j) <= thresholds[j - 1]);

    let safe: Vec<usize> = (0..grid.len()).filter(|i| in_safe(&grid[*i])).collect();
    if safe.is_empty() {
        return None;
    }
    let l_star = safe.iter().map(|i| u(&grid[*i], 0)).fold(f64::INFINITY, f64::min);
    let minimizers: Vec<usize> = safe.iter().copied().filter(|i| l(&grid[*i], 0) <= l_star).collect();
    let mut expanders = Vec::new();
    for &i in &safe {
        let x = &grid[i];
        let aux: Vec<DenseGp> = (1..kernels.len())
            .map(|j| {
                let mut ax = xs.clone();
                ax.push(x.clone());
                let mut ay: Vec<f64> = samples.iter().map(|s| s.outputs[j]).collect();
                ay.push(l(x, j));
                DenseGp::fit(&kernels[j], &ax, &ay)
            })
            .collect();
        let certifies = |p: &[f64]| aux.iter().enumerate().all(|(j, g)| g.bounds(p, beta).1 <= thresholds[j]);
        if (0..grid.len()).any(|k| !safe.contains(&k) && certifies(&grid[k])) {
            expanders.push(i);
        }
    }
    let width = |x: &[f64]| (0..kernels.len()).map(|j| u(x, j) - l(x, j)).fold(f64::NEG_INFINITY, f64::max);
    let mut index = None;
    let mut best = f64::NEG_INFINITY;
    for i in 0..grid.len() {
        if minimizers.contains(&i) || expanders.contains(&i) {
            let w = width(&grid[i]);
            if w > best {
                best = w;
                index = Some(i);
            }
        }
    }
    index.map(|index| LiteralStep {
        index,
        safe,
        minimizers,
        expanders,
    })
}

#[test]
fn criterion_02_grid_step_equals_literal_algorithm() {
    let t0 = Instant::now();
    let mut mismatches = Vec::new();
    let mut compared = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let dim = if seed % 2 == 0 { 1 } else { 2 };
        let counts = if dim == 1 { vec![rng.gen_range(30..=121)] } else { vec![11, 11] };
        let bounds = SearchBox::new(vec![0.0; dim], vec![1.0; dim]).unwrap();
        let grid = GridSpec { counts }.build(&bounds).unwrap();
        let kernels: Vec<KernelSpec> = (0..2)
            .map(|_| {
                KernelSpec::new(
                    vec![rng.gen_range(0.15..0.4); dim],
                    1.0,
                    1e-4,
                    0.0,
                )
                .unwrap()
            })
            .collect();
        // A few grid points near one corner with comfortably negative constraint values.
        let mut samples = Vec::new();
        for _ in 0..rng.gen_range(2..=4) {
            let i = rng.gen_range(0..grid.len() / 3);
            let p = grid.points[i].clone();
            if samples.iter().any(|s: &Sample| s.point == p) {
                continue;
            }
            samples.push(Sample::new(p, vec![rng.gen_range(-1.0..1.0), rng.gen_range(-2.5..-1.5)]));
        }
        let thresholds = vec![0.0];
        let beta = 2.0;
        let mut state = SafeOptState::new(kernels.clone(), beta, thresholds.clone(), samples.clone()).unwrap();
        // Two iterations per toy: the second one exercises a grown data set.
        for _ in 0..2 {
            let lit = literal_grid_step(&kernels, state.samples(), beta, &thresholds, &grid.points);
            let got = grid_step(&state, &grid);
            match (lit, got) {
                (Some(lit), Ok(step)) => {
                    compared += 1;
                    if lit.index != step.index
                        || lit.safe != step.safe
                        || lit.minimizers != step.minimizers
                        || lit.expanders != step.expanders
                    {
                        mismatches.push(format!(
                            "seed {seed}: literal ({}, |S| {}, |M| {}, |E| {}) vs step ({}, |S| {}, |M| {}, |E| {})",
                            lit.index,
                            lit.safe.len(),
                            lit.minimizers.len(),
                            lit.expanders.len(),
                            step.index,
                            step.safe.len(),
                            step.minimizers.len(),
                            step.expanders.len()
                        ));
                        break;
                    }
                    let x = step.point.clone();
                    let y = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..-1.0)];
                    state.add_sample(x, y).unwrap();
                }
                (None, Err(_)) => break,
                (lit, got) => {
                    mismatches.push(format!("seed {seed}: literal {:?} vs step {:?}", lit.map(|l| l.index), got.map(|s| s.index)));
                    break;
                }
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    println!("criterion 2: {compared} iterations compared, {} mismatches, {elapsed:.1}s", mismatches.len());
    assert!(mismatches.is_empty(), "{mismatches:#?}");
    assert!(compared >= 20);
    assert!(elapsed < 120.0);
}

// ---------------------------------------------------------------------------
// Pairing

#[test]
fn criterion_05_pairing_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for cloud in 0..100 {
        let dim = rng.gen_range(1..=4);
        let m = rng.gen_range(1..40);
        let l = rng.gen_range(1..40);
        // Coarse coordinates make exact distance ties common.
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| rng.gen_range(0..6) as f64).collect()).collect()
        };
        let safe = draw(m);
        let unsafe_pts = draw(l);
        let mut expected = Vec::new();
        for s in &safe {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, u) in unsafe_pts.iter().enumerate() {
                let d: f64 = s.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            expected.push((s.clone(), unsafe_pts[best].clone()));
        }
        assert_eq!(pair_nearest(&safe, &unsafe_pts), expected, "cloud {cloud}");
    }
}

// ---------------------------------------------------------------------------
// Trace metrics

fn direct_dft_magnitude(x: &[f64], k: usize) -> f64 {
    let n = x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (t, v) in x.iter().enumerate() {
        let a = -2.0 * std::f64::consts::PI * k as f64 * t as f64 / n;
        re += v * a.cos();
        im += v * a.sin();
    }
    (re * re + im * im).sqrt()
}

#[test]
fn criterion_09_trace_metrics() {
    assert_eq!(xi(150, 0), 0.5);
    assert_eq!(xi(1150, 1000), 0.5);

    let cfg = TraceMetricsConfig {
        motion_end: 100,
        settle_end: 3100,
        band: [140.0, 1250.0],
        sample_rate: 2500.0,
    };
    let len = 3200;

    // Constant error of 1: the mean of ξ over the window.
    let ones = vec![1.0; len];
    let mut direct = 0.0;
    for i in cfg.motion_end..=cfg.settle_end {
        let z = -((i - cfg.motion_end) as f64 - 150.0) / 10.0;
        direct += (1.0 - 1.0 / (1.0 + z.exp())).abs();
    }
    direct /= (cfg.settle_end - cfg.motion_end) as f64;
    let got = e_avg(&ones, &cfg).unwrap();
    assert!((got - direct).abs() <= 1e-9, "{got} vs {direct}");

    // A ramp with sign changes, summed directly.
    let ramp: Vec<f64> = (0..len).map(|i| ((i as f64) * 0.013).sin() * (i as f64) * 1e-3).collect();
    let mut direct = 0.0;
    for i in cfg.motion_end..=cfg.settle_end {
        let z = -((i - cfg.motion_end) as f64 - 150.0) / 10.0;
        direct += ((1.0 - 1.0 / (1.0 + z.exp())) * ramp[i]).abs();
    }
    direct /= (cfg.settle_end - cfg.motion_end) as f64;
    assert!((e_avg(&ramp, &cfg).unwrap() - direct).abs() <= 1e-9);

    // 200 Hz tone: compare against the windowed-sinusoid bin computed by direct summation.
    let amp = 0.7;
    let tone: Vec<f64> = (0..len)
        .map(|i| amp * (2.0 * std::f64::consts::PI * 200.0 * i as f64 / cfg.sample_rate).sin())
        .collect();
    let window: Vec<f64> = (cfg.motion_end..=cfg.settle_end)
        .map(|i| {
            let z = -((i - cfg.motion_end) as f64 - 150.0) / 10.0;
            (1.0 - 1.0 / (1.0 + z.exp())) * tone[i]
        })
        .collect();
    let n = window.len();
    let df = cfg.sample_rate / n as f64;
    let oracle = (0..=n / 2)
        .filter(|k| (*k as f64 * df) >= 140.0 && (*k as f64 * df) <= 1250.0)
        .map(|k| direct_dft_magnitude(&window, k))
        .fold(0.0, f64::max);
    let got = fft_max(&tone, &cfg).unwrap();
    let rel = (got - oracle).abs() / oracle;
    println!("criterion 9: fft_max {got:.4} vs direct DFT {oracle:.4} (rel {rel:.2e})");
    assert!(rel <= 0.05);

    assert_eq!(fft_max(&vec![0.0; len], &cfg).unwrap(), 0.0);
}

// ---------------------------------------------------------------------------
// Determinism

const QUADRATIC_TOY: &str = r#"
algorithm = "grid-free"
seed = 3
beta = 2.0
thresholds = 0.0

[search_box]
lower = [0.0, 0.0]
upper = [1.0, 1.0]

[initial]
points = [[0.2, 0.2], [0.25, 0.3]]

[[kernels]]
lengthscales = [0.3, 0.3]
signal_variance = 1.0
noise_variance = 1e-4

[[kernels]]
lengthscales = [0.3, 0.3]
signal_variance = 0.2
noise_variance = 1e-4

[plant]
kind = "quadratic"
center = [0.7, 0.55]
weights = [1.0, 1.0]
safe_center = [0.4, 0.4]
safe_radius = 0.45

[grid]
counts = [21, 21]
max_iter = 8

[grid_free]
max_iter = 8

[grid_free.init]
count = 60

[volume]
count = 2000
"#;

#[test]
fn criterion_10_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for (alg, tag) in [("grid-free", "grid-free"), ("grid", "grid")] {
        let text = QUADRATIC_TOY.replace("algorithm = \"grid-free\"", &format!("algorithm = \"{alg}\""));
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert!(!a.rows.is_empty(), "{tag} run made no progress: {:?}", a.summary.stop);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap(), "{tag} JSON differs");
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap(), "{tag} CSV differs");
        let pa = a.write(&dir.path().join("a")).unwrap();
        let pb = b.write(&dir.path().join("b")).unwrap();
        assert_eq!(std::fs::read(&pa.json).unwrap(), std::fs::read(&pb.json).unwrap());
        assert_eq!(std::fs::read(&pa.csv).unwrap(), std::fs::read(&pb.csv).unwrap());
    }
    // The ball-screw plant too, on a short run.
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/ball-screw-grid-free.toml"))
        .unwrap()
        .replace("max_iter = 50", "max_iter = 3");
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
}

// ---------------------------------------------------------------------------
// Grid-free sub-problems against dense scans

/// Surrogates of a 1-D toy evaluated through the dense oracle.
struct Toy1d {
    kernels: Vec<KernelSpec>,
    samples: Vec<Sample>,
    beta: f64,
    gps: Vec<DenseGp>,
}

impl Toy1d {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let ls = rng.gen_range(0.12..0.2);
        let kernels = vec![
            KernelSpec::new(vec![ls], 1.0, 1e-4, 0.0).unwrap(),
            KernelSpec::new(vec![ls], 1.0, 1e-4, 0.0).unwrap(),
        ];
        let mut xs: Vec<f64> = (0..3).map(|_| rng.gen_range(0.02..0.2)).collect();
        xs.sort_by(f64::total_cmp);
        let samples: Vec<Sample> = xs
            .iter()
            .map(|x| Sample::new(vec![*x], vec![rng.gen_range(-1.0..1.0), rng.gen_range(-2.5..-1.8)]))
            .collect();
        let gps = (0..2)
            .map(|j| {
                let pts: Vec<Vec<f64>> = samples.iter().map(|s| s.point.clone()).collect();
                let ys: Vec<f64> = samples.iter().map(|s| s.outputs[j]).collect();
                DenseGp::fit(&kernels[j], &pts, &ys)
            })
            .collect();
        Toy1d {
            kernels,
            samples,
            beta: 2.0,
            gps,
        }
    }

    fn state(&self) -> SafeOptState {
        SafeOptState::new(self.kernels.clone(), self.beta, vec![0.0], self.samples.clone()).unwrap()
    }

    fn bounds(&self, x: f64, j: usize) -> (f64, f64) {
        self.gps[j].bounds(&[x], self.beta)
    }

    fn width(&self, x: f64, k: usize) -> f64 {
        let (l, u) = self.bounds(x, k);
        u - l
    }

    fn safety_margin(&self, x: f64) -> f64 {
        self.bounds(x, 1).1
    }

    fn l_star(&self) -> f64 {
        self.samples
            .iter()
            .filter(|s| self.safety_margin(s.point[0]) <= 0.0)
            .map(|s| self.bounds(s.point[0], 0).1)
            .fold(f64::INFINITY, f64::min)
    }

    /// Upper bound at `xp` after the optimistic observation `(x, l(x, 1))`.
    fn aux_margin(&self, x: f64, xp: f64) -> f64 {
        let mut pts: Vec<Vec<f64>> = self.samples.iter().map(|s| s.point.clone()).collect();
        let mut ys: Vec<f64> = self.samples.iter().map(|s| s.outputs[1]).collect();
        pts.push(vec![x]);
        ys.push(self.bounds(x, 1).0);
        DenseGp::fit(&self.kernels[1], &pts, &ys).bounds(&[xp], self.beta).1
    }
}

fn lattice(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Maximizes `f` over the feasible points of a 1-D interval by a dense scan
/// followed by repeated zooming around the best point.
fn zoom_scan_1d(f: &dyn Fn(f64) -> f64, feasible: &dyn Fn(f64) -> bool, lo: f64, hi: f64) -> Option<(f64, f64)> {
    let (mut a, mut b) = (lo, hi);
    let mut best: Option<(f64, f64)> = None;
    for round in 0..6 {
        let pts = lattice(a, b, if round == 0 { 20001 } else { 401 });
        let step = (b - a) / (pts.len() - 1) as f64;
        for x in pts {
            if feasible(x) {
                let v = f(x);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((x, v));
                }
            }
        }
        let (x, _) = best?;
        a = (x - step).max(lo);
        b = (x + step).min(hi);
    }
    best
}

#[test]
fn criterion_03_gridfree_subproblems_match_dense_scans() {
    use safeopt::gridfree::{init_guesses, solve_p1, solve_p2, GridFreeConfig, InitGuesses};
    use safeopt::pattern_search::PatternSearchConfig;

    let t0 = Instant::now();
    let solver = PatternSearchConfig {
        initial_mesh: 0.25,
        mesh_tolerance: 1e-8,
        constraint_tolerance: 0.0,
        max_evals: 200_000,
        ..Default::default()
    };
    // Pattern search stops once a failed poll at mesh m leaves m/2 below the
    // tolerance, so the terminal poll stencil has half-width below twice the tolerance.
    let cell = 2.0 * solver.mesh_tolerance;
    let cfg = GridFreeConfig::default();
    let bounds = SearchBox::new(vec![0.0], vec![1.0]).unwrap();
    let mut report = Vec::new();
    let mut failures = Vec::new();
    for seed in 0..10u64 {
        let toy = Toy1d::new(seed);
        let state = toy.state();

        // P1: best over every output k of the width on the feasible set.
        let p1 = solve_p1(&state, &cfg, &solver, &bounds).unwrap();
        let l_star = toy.l_star();
        let feas1 = |x: f64| toy.safety_margin(x) <= 0.0 && toy.bounds(x, 0).0 <= l_star;
        let mut oracle: Option<(f64, f64)> = None;
        for k in 0..2 {
            let f = |x: f64| toy.width(x, k);
            if let Some((x, v)) = zoom_scan_1d(&f, &feas1, 0.0, 1.0) {
                if oracle.is_none_or(|(_, bv)| v > bv) {
                    oracle = Some((x, v));
                }
            }
        }
        let (ox, ov) = oracle.unwrap();
        let (dx, dv) = ((p1.point[0] - ox).abs(), (p1.width - ov).abs());
        report.push(format!("seed {seed} P1: x {:.9} vs {ox:.9}, w {:.9} vs {ov:.9}", p1.point[0], p1.width));
        if dx > cell || dv > 1e-6 {
            failures.push(format!("seed {seed} P1 dx {dx:.2e} dv {dv:.2e}"));
        }

        // P2: joint lattice over (x, x') with x safe and x' strictly unsafe.
        let safe = |x: f64| toy.safety_margin(x) <= 0.0;
        let delta = 1e-12;
        let unsafe_ = |x: f64| toy.safety_margin(x) >= delta;
        let q = |x: f64, xp: f64, k: usize| toy.width(x, k) - cfg.penalty * toy.aux_margin(x, xp).max(0.0);
        // Start pairs exactly as the driver draws them.
        let starts = match init_guesses(&state, &cfg.init, &bounds, seed).unwrap() {
            InitGuesses::Pairs { pairs, .. } => pairs,
            other => panic!("seed {seed}: no unsafe guess drawn: {other:?}"),
        };
        let p2 = solve_p2(&state, &cfg, &solver, &bounds, &starts).unwrap();

        let mut best_k: Option<(f64, f64, f64)> = None; // (x, q, width)
        for k in 0..2 {
            let mut best: Option<(f64, f64, f64)> = None;
            let (mut ax, mut bx, mut ap, mut bp) = (0.0, 1.0, 0.0, 1.0);
            for round in 0..6 {
                let n = if round == 0 { 300 } else { 41 };
                let (gx, gp) = (lattice(ax, bx, n), lattice(ap, bp, n));
                for x in &gx {
                    if !safe(*x) {
                        continue;
                    }
                    for xp in &gp {
                        if unsafe_(*xp) {
                            let v = q(*x, *xp, k);
                            if best.is_none_or(|(_, _, bv)| v > bv) {
                                best = Some((*x, *xp, v));
                            }
                        }
                    }
                }
                let (x, xp, _) = best.unwrap();
                let (sx, sp) = ((bx - ax) / (n - 1) as f64, (bp - ap) / (n - 1) as f64);
                (ax, bx) = ((x - sx).max(0.0), (x + sx).min(1.0));
                (ap, bp) = ((xp - sp).max(0.0), (xp + sp).min(1.0));
            }
            let (x, _, v) = best.unwrap();
            let w = toy.width(x, k);
            if best_k.is_none_or(|(_, _, bw)| w > bw) {
                best_k = Some((x, v, w));
            }
        }
        let (ox, oq, _) = best_k.unwrap();
        let (dx, dq) = ((p2.point[0] - ox).abs(), (p2.q - oq).abs());
        report.push(format!("seed {seed} P2: x {:.9} vs {ox:.9}, q {:.9} vs {oq:.9}", p2.point[0], p2.q));
        if dx > cell || dq > 1e-6 {
            failures.push(format!("seed {seed} P2 dx {dx:.2e} dq {dq:.2e}"));
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    println!("criterion 3 ({elapsed:.1}s):\n  {}", report.join("\n  "));
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(elapsed < 300.0);
}

// ---------------------------------------------------------------------------
// Full runs

fn config_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_path(name)).unwrap()
}

#[test]
fn criterion_04_every_measurement_is_truly_safe() {
    use safeopt::harness::true_outputs;

    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut unsafe_runs = Vec::new();
    let mut evaluations = 0;
    for name in ["ball-screw-grid-free.toml", "ball-screw-grid.toml"] {
        let mut cfg = load_config(name);
        assert_eq!(cfg.beta, 3.0);
        cfg.volume.count = 0;
        for seed in 0..20u64 {
            cfg.seed = seed;
            let record = run_experiment(&cfg).unwrap();
            let truth = true_outputs(&record).unwrap();
            evaluations += truth.len();
            let bad: Vec<f64> = truth.iter().map(|y| y[1]).filter(|h| *h > 0.0).collect();
            lines.push(format!(
                "{} seed {seed}: {} evaluations, {} unsafe, stop {:?}",
                record.algorithm.tag(),
                truth.len(),
                bad.len(),
                record.summary.stop
            ));
            if !bad.is_empty() {
                unsafe_runs.push(format!("{} seed {seed}: h = {bad:?}", record.algorithm.tag()));
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    println!("criterion 4 ({evaluations} evaluations, {elapsed:.0}s):\n  {}", lines.join("\n  "));
    assert!(unsafe_runs.is_empty(), "{unsafe_runs:#?}");
    assert!(elapsed < 600.0, "took {elapsed:.0}s");
}

const TIMING_TOY: &str = r#"
algorithm = "grid"
seed = 0
beta = 2.0
thresholds = 0.0

[search_box]
lower = [0.0, 0.0]
upper = [1.0, 1.0]

[initial]
points = [[0.45, 0.45], [0.25, 0.45], [0.65, 0.45], [0.45, 0.25], [0.45, 0.65]]

[[kernels]]
lengthscales = [0.2, 0.2]
signal_variance = 1.0
noise_variance = 1e-4

[[kernels]]
lengthscales = [0.2, 0.2]
signal_variance = 0.25
noise_variance = 1e-4

[plant]
kind = "quadratic"
center = [0.65, 0.6]
weights = [1.0, 1.0]
safe_center = [0.45, 0.45]
safe_radius = 0.4

[grid]
counts = [50, 50]
max_iter = 25

[grid_free]
max_iter = 25
point_tolerance = 1e-9
objective_tolerance = 1e-9
max_starts = 20

[grid_free.init]
count = 100
seed_with_samples = true

[volume]
count = 0
"#;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_06_timing_trends() {
    let grid_cfg = ExperimentConfig::from_toml_str(TIMING_TOY).unwrap();
    let gf_cfg = ExperimentConfig::from_toml_str(&TIMING_TOY.replace("algorithm = \"grid\"", "algorithm = \"grid-free\"")).unwrap();
    let t0 = Instant::now();
    let grid = run_experiment(&grid_cfg).unwrap();
    let gf = run_experiment(&gf_cfg).unwrap();
    assert_eq!(grid.rows.len(), 25, "grid stopped early: {:?}", grid.summary.stop);
    assert_eq!(gf.rows.len(), 25, "grid-free stopped early: {:?}", gf.summary.stop);

    let gt: Vec<f64> = grid.timings.iterations.iter().map(|t| t.total_s).collect();
    let ft: Vec<f64> = gf.timings.iterations.iter().map(|t| t.total_s).collect();
    let (g_first, g_last) = (mean(&gt[..5]), mean(&gt[20..]));
    let f_max = ft.iter().copied().fold(0.0, f64::max);
    let (g_total, f_total) = (grid.timings.wall_s, gf.timings.wall_s);
    println!(
        "criterion 6 ({:.0}s): grid first-5 {g_first:.4}s last-5 {g_last:.4}s total {g_total:.2}s; \
         grid-free first {:.4}s max {f_max:.4}s total {f_total:.2}s (ratio {:.3})",
        t0.elapsed().as_secs_f64(),
        ft[0],
        f_total / g_total
    );
    let ms: Vec<String> = ft.iter().map(|t| format!("{:.1}", t * 1e3)).collect();
    println!("  grid-free per-iteration ms: {}", ms.join(" "));
    let checks = [
        (g_last > g_first, "grid iteration time grows"),
        (f_max <= 2.0 * ft[0], "grid-free iteration time within 2x of its first"),
        (f_total <= 0.5 * g_total, "grid-free total at most half of grid total"),
    ];
    for (ok, what) in checks {
        println!("  {}: {what}", if ok { "PASS" } else { "FAIL" });
    }
    assert!(checks.iter().all(|c| c.0), "criterion 6 sub-checks failed");
    assert!(t0.elapsed().as_secs_f64() < 900.0);
}

fn off_grid_toy(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
    let r: f64 = rng.gen_range(0.0..0.1);
    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (x0, y0) = (0.3 + r * a.cos(), 0.35 + r * a.sin());
    format!(
        r#"
algorithm = "grid"
seed = {seed}
beta = 2.0
thresholds = 0.0

[search_box]
lower = [0.0, 0.0]
upper = [1.0, 1.0]

[initial]
points = [[{x0}, {y0}], [{x1}, {y0}], [{x0}, {y1}]]

[[kernels]]
lengthscales = [0.3, 0.3]
signal_variance = 1.0
noise_variance = 1e-4

[[kernels]]
lengthscales = [0.3, 0.3]
signal_variance = 0.1
noise_variance = 1e-4

[plant]
kind = "quadratic"
center = [0.5, 0.5]
weights = [1.0, 1.0]
safe_center = [0.5, 0.5]
safe_radius = 0.35

[grid]
counts = [6, 6]
max_iter = 40

# Tolerances small enough that both drivers spend the whole budget.
[grid_free]
max_iter = 40
point_tolerance = 1e-9
objective_tolerance = 1e-9

[grid_free.init]
count = 100
seed_with_samples = true

[volume]
count = 0
"#,
        x1 = x0 + 0.05,
        y1 = y0 + 0.05,
    )
}

#[test]
fn criterion_07_off_grid_optimum() {
    // The optimum (0.5, 0.5) is the centre of a cell of the 0.2-spaced grid.
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let text = off_grid_toy(seed);
        let grid = run_experiment(&ExperimentConfig::from_toml_str(&text).unwrap()).unwrap();
        let gf_text = text.replace("algorithm = \"grid\"", "algorithm = \"grid-free\"");
        let gf = run_experiment(&ExperimentConfig::from_toml_str(&gf_text).unwrap()).unwrap();
        let (g, f) = (grid.summary.best_objective.unwrap(), gf.summary.best_objective.unwrap());
        let ran = !grid.summary.stop.is_failure() && !gf.summary.stop.is_failure() && !gf.rows.is_empty();
        if ran && f <= g {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: grid {g:.5} ({} it), grid-free {f:.5} ({} it, {:?})",
            grid.rows.len(),
            gf.rows.len(),
            gf.summary.stop
        ));
    }
    println!("criterion 7: {wins}/10\n  {}", lines.join("\n  "));
    assert!(wins >= 9, "grid-free matched or beat grid on only {wins}/10 seeds");
}

#[test]
fn criterion_08_initialization_study() {
    use safeopt::run::StopReason;
    use safeopt::sampling::Sampler;

    let base = load_config("ball-screw-grid-free.toml");
    let mut agree = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut vols = Vec::new();
        for count in [100, 700] {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.grid_free.as_mut().unwrap().init.count = count;
            let record = run_experiment(&cfg).unwrap();
            vols.push(record.summary.safe_volume.unwrap_or(f64::NAN));
            lines.push(format!(
                "seed {seed} m0 {count}: volume {:?}, {} iterations, stop {:?}",
                record.summary.safe_volume,
                record.rows.len(),
                record.summary.stop
            ));
        }
        if vols[0] >= 2.0 * vols[1] {
            agree += 1;
        }
    }

    // Uniform random guesses with m0 = 300: look for a run whose first
    // recommendation repeats an initial point and stops on the objective rule.
    let mut stalls = Vec::new();
    for seed in 0..10u64 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.volume.count = 0;
        let gf = cfg.grid_free.as_mut().unwrap();
        gf.init.count = 300;
        gf.init.sampler = Sampler::UniformRandom;
        let record = run_experiment(&cfg).unwrap();
        if let StopReason::Displacement { point, objective } = record.summary.stop {
            let eps2 = cfg.grid_free.as_ref().unwrap().objective_tolerance;
            if record.rows.len() == 1 && objective <= eps2 {
                stalls.push(format!("seed {seed}: dx {point:e}, df {objective:e}"));
            }
        }
    }
    println!(
        "criterion 8: volume ratio >= 2 on {agree}/5 seeds; stalls {stalls:?}\n  {}",
        lines.join("\n  ")
    );
    assert!(agree >= 4, "m0 = 100 volume was at least twice the m0 = 700 volume on only {agree}/5 seeds");
    assert!(!stalls.is_empty(), "no uniform-random run stalled on the objective rule");
}
