//! Ancestral sampling through the learned reverse process.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{Condition, DenoiserParams};
use crate::error::{invalid, Result};
use crate::rng;
use crate::schedule::{NoiseSchedule, StateVector};

/// Starting states `x_T ~ N(0, I)`. The draw never sees a condition.
pub fn initial_states(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, "sample-init");
    Array2::from_shape_fn((n, dim), |_| StandardNormal.sample(&mut r))
}

/// Runs one reverse trajectory per row of `conds`, returning the final `x_0` rows.
pub fn sample_batch(params: &DenoiserParams, conds: &[Condition], seed: u64, schedule: &NoiseSchedule) -> Result<Array2<f64>> {
    if conds.is_empty() {
        return Err(invalid("sample count must be at least 1"));
    }
    let (n, dim) = (conds.len(), params.arch.dim);
    let mut x = initial_states(n, dim, seed);
    let mut noise = rng::stream(seed, "sample-noise");
    for t in (1..=schedule.num_steps()).rev() {
        let mean = params.denoise_batch(&x, conds, &vec![t; n])?;
        x = if t == 1 {
            mean
        } else {
            let sigma = schedule.sigma(t);
            mean.mapv(|m| {
                let z: f64 = StandardNormal.sample(&mut noise);
                m + sigma * z
            })
        };
    }
    Ok(x)
}

/// `n` independent samples under one condition.
pub fn sample(params: &DenoiserParams, cond: &Condition, n: usize, seed: u64, schedule: &NoiseSchedule) -> Result<Vec<StateVector>> {
    let x = sample_batch(params, &vec![*cond; n], seed, schedule)?;
    Ok(x.rows().into_iter().map(|r| StateVector::clean(r.to_vec())).collect())
}
