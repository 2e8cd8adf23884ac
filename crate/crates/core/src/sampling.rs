//! Seeded samplers over the search box and safe-set volume estimation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::safety::SafeOptState;
use crate::space::SearchBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    LatinHypercube,
    UniformRandom,
}

impl Sampler {
    pub fn tag(self) -> &'static str {
        match self {
            Sampler::LatinHypercube => "lh",
            Sampler::UniformRandom => "rand",
        }
    }

    pub fn draw(self, count: usize, bounds: &SearchBox, seed: u64) -> Result<SampleBatch> {
        match self {
            Sampler::LatinHypercube => latin_hypercube(count, bounds, seed),
            Sampler::UniformRandom => uniform_random(count, bounds, seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub points: Vec<Vec<f64>>,
    pub sampler: Sampler,
    pub seed: u64,
}

fn check_count(count: usize) -> Result<()> {
    if count == 0 {
        Err(Error::input("sample count must be at least 1"))
    } else {
        Ok(())
    }
}

/// One point per stratum `[i/count, (i+1)/count)` in every dimension, placed
/// uniformly inside its stratum; strata are matched across dimensions by
/// independent random permutations.
pub fn latin_hypercube(count: usize, bounds: &SearchBox, seed: u64) -> Result<SampleBatch> {
    check_count(count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = bounds.dim();
    let mut points = vec![vec![0.0; dim]; count];
    let mut strata: Vec<usize> = (0..count).collect();
    for d in 0..dim {
        strata.shuffle(&mut rng);
        let (lo, width) = (bounds.lower[d], bounds.width(d));
        for (p, s) in points.iter_mut().zip(&strata) {
            let u: f64 = rng.gen();
            let frac = (*s as f64 + u) / count as f64;
            p[d] = (lo + width * frac).min(bounds.upper[d]);
        }
    }
    Ok(SampleBatch {
        points,
        sampler: Sampler::LatinHypercube,
        seed,
    })
}

pub fn uniform_random(count: usize, bounds: &SearchBox, seed: u64) -> Result<SampleBatch> {
    check_count(count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..count)
        .map(|_| {
            bounds
                .lower
                .iter()
                .zip(&bounds.upper)
                .map(|(lo, hi)| rng.gen_range(*lo..=*hi))
                .collect()
        })
        .collect();
    Ok(SampleBatch {
        points,
        sampler: Sampler::UniformRandom,
        seed,
    })
}

/// Fraction of `count` sampled points that the state certifies safe.
pub fn safe_volume_estimate(
    state: &SafeOptState,
    bounds: &SearchBox,
    count: usize,
    sampler: Sampler,
    seed: u64,
) -> Result<f64> {
    let batch = sampler.draw(count, bounds, seed)?;
    let mut safe = 0usize;
    for p in &batch.points {
        if state.is_safe(p)?.is_safe {
            safe += 1;
        }
    }
    Ok(safe as f64 / count as f64)
}
