//! Noise schedule, forward noising and ancestral reverse steps.
//!
//! Retention coefficients are cumulative: `alpha(t)` is the product of
//! `1 - beta_s` for `s <= t`, so `alpha(0) == 1` and the forward marginal is
//! `x_t = sqrt(alpha_t) x_0 + sqrt(1 - alpha_t) eps`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest signal-to-noise ratio accepted at the terminal step.
pub const MAX_TERMINAL_SNR: f64 = 0.05;

/// A point of the data space tagged with its diffusion timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub values: Vec<f64>,
    pub timestep: usize,
}

impl StateVector {
    pub fn new(values: Vec<f64>, timestep: usize) -> Self {
        Self { values, timestep }
    }

    pub fn clean(values: Vec<f64>) -> Self {
        Self::new(values, 0)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Linear-beta schedule parameters, as stored in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 100, beta_min: 1e-4, beta_max: 0.2 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    num_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Builds a DDPM schedule with `T` linearly spaced betas.
///
/// `sigma_t` is the posterior standard deviation of `q(x_{t-1} | x_t, x_0)`.
/// That posterior collapses at `t = 1`, where `sigma_1 = sqrt(beta_1)` is used
/// instead so every step keeps a positive scale for the `1 / (2 sigma_t^2)`
/// weights.
pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(invalid(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(invalid(format!(
            "beta bounds must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut alphas = Vec::with_capacity(steps + 1);
    alphas.push(1.0);
    for b in &betas {
        let prev = *alphas.last().unwrap();
        alphas.push(prev * (1.0 - b));
    }
    let sigmas = (1..=steps)
        .map(|t| {
            let beta = betas[t - 1];
            if t == 1 {
                beta.sqrt()
            } else {
                (beta * (1.0 - alphas[t - 1]) / (1.0 - alphas[t])).sqrt()
            }
        })
        .collect();
    Ok(NoiseSchedule { num_steps: steps, betas, alphas, sigmas })
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// Cumulative retention, `t` in `0..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Reverse-step standard deviation, `t` in `1..=T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn terminal_snr(&self) -> f64 {
        let a = self.alphas[self.num_steps];
        a.sqrt() / (1.0 - a).sqrt()
    }

    /// Rejects schedules whose terminal state is not close to pure noise.
    pub fn check_terminal_snr(&self) -> Result<()> {
        let snr = self.terminal_snr();
        if snr < MAX_TERMINAL_SNR {
            Ok(())
        } else {
            Err(invalid(format!("terminal SNR {snr:.4} is not below {MAX_TERMINAL_SNR}")))
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.num_steps).contains(&t) {
            Ok(())
        } else {
            Err(Error::TimestepOutOfRange { t, max: self.num_steps })
        }
    }

    /// Coefficients `(c0, ct)` of the posterior mean
    /// `E[x_{t-1} | x_t, x_0] = c0 x_0 + ct x_t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let beta = self.betas[t - 1];
        let a_t = self.alphas[t];
        let a_prev = self.alphas[t - 1];
        let c0 = a_prev.sqrt() * beta / (1.0 - a_t);
        let ct = (1.0 - beta).sqrt() * (1.0 - a_prev) / (1.0 - a_t);
        (c0, ct)
    }
}

/// `sqrt(alpha) x0 + sqrt(1 - alpha) eps` for an explicit retention value.
pub fn noise_with_retention(x0: &[f64], eps: &[f64], alpha: f64) -> Vec<f64> {
    let (a, b) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// Forward noising to step `t` (`t = 0` returns `x0`).
pub fn add_noise(
    x0: &StateVector,
    eps: &StateVector,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<StateVector> {
    if t > schedule.num_steps {
        return Err(Error::TimestepOutOfRange { t, max: schedule.num_steps });
    }
    check_dims(x0.dim(), eps.dim())?;
    Ok(StateVector::new(noise_with_retention(&x0.values, &eps.values, schedule.alpha(t)), t))
}

/// One reverse step `x_{t-1} = mean + sigma_t noise`; the last step (`t = 1`)
/// drops the noise.
pub fn ancestral_step(
    mean: &StateVector,
    t: usize,
    noise: &StateVector,
    schedule: &NoiseSchedule,
) -> Result<StateVector> {
    schedule.check_step(t)?;
    check_dims(mean.dim(), noise.dim())?;
    let sigma = if t == 1 { 0.0 } else { schedule.sigma(t) };
    Ok(StateVector::new(perturb(&mean.values, sigma, &noise.values), t - 1))
}

/// `mean + sigma * noise`, elementwise.
pub fn perturb(mean: &[f64], sigma: f64, noise: &[f64]) -> Vec<f64> {
    mean.iter().zip(noise).map(|(m, z)| m + sigma * z).collect()
}

/// `log N(x; mean, sigma^2 I)` including the normalizing constant.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    check_dims(x.len(), mean.len())?;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let d = x.len() as f64;
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI).ln() - d * sigma.ln() - sq / (2.0 * sigma * sigma))
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv(v: &[f64]) -> StateVector {
        StateVector::clean(v.to_vec())
    }

    #[test]
    fn default_schedule_is_decreasing_with_small_terminal_retention() {
        let s = build_schedule(100, 1e-4, 0.2).unwrap();
        // direct product as oracle
        let mut prod = 1.0;
        for t in 1..=100 {
            let beta = 1e-4 + (0.2 - 1e-4) * (t - 1) as f64 / 99.0;
            prod *= 1.0 - beta;
            assert!((s.alpha(t) - prod).abs() < 1e-15);
            assert!(s.alpha(t) < s.alpha(t - 1));
            assert!(s.sigma(t) > 0.0);
        }
        assert!(s.alpha(100) < 2.5e-3);
        s.check_terminal_snr().unwrap();
    }

    #[test]
    fn two_step_schedule_by_hand() {
        let s = build_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alphas(), &[1.0, 0.5, 0.25]);
        assert!((s.sigma(1) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((s.sigma(2) - (0.5 * 0.5 / 0.75f64).sqrt()).abs() < 1e-15);
        assert!(s.check_terminal_snr().is_err());
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(build_schedule(1, 1e-4, 0.2).is_err());
        assert!(build_schedule(10, 0.0, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
        assert!(build_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn add_noise_cases() {
        let s = build_schedule(10, 1e-3, 0.3).unwrap();
        let x0 = sv(&[1.5, -2.0]);
        let eps = sv(&[0.3, 0.7]);
        assert_eq!(add_noise(&x0, &eps, 0, &s).unwrap().values, x0.values);
        assert_eq!(noise_with_retention(&x0.values, &eps.values, 0.0), eps.values);
        let y = noise_with_retention(&[2.0], &[1.0], 0.25);
        assert!((y[0] - (1.0 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((y[0] - 1.8660).abs() < 1e-4);
        assert!(matches!(add_noise(&x0, &eps, 11, &s), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn ancestral_step_cases() {
        let s = build_schedule(10, 1e-3, 0.3).unwrap();
        let mean = StateVector::new(vec![0.4, -0.1], 5);
        let out = ancestral_step(&mean, 5, &sv(&[0.0, 0.0]), &s).unwrap();
        assert_eq!(out.values, mean.values);
        assert_eq!(out.timestep, 4);

        let out = ancestral_step(&mean, 1, &sv(&[3.0, -3.0]), &s).unwrap();
        assert_eq!(out.values, mean.values);
        assert_eq!(out.timestep, 0);

        assert!(ancestral_step(&mean, 0, &sv(&[0.0, 0.0]), &s).is_err());
        assert!(ancestral_step(&mean, 11, &sv(&[0.0, 0.0]), &s).is_err());
    }

    #[test]
    fn perturbation_by_sigma() {
        assert_eq!(perturb(&[0.0, 0.0], 2.0, &[1.0, -1.0]), vec![2.0, -2.0]);
    }

    #[test]
    fn log_density_closed_form() {
        let c = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((gaussian_log_density(&[0.3], &[0.3], 1.0).unwrap() - c).abs() < 1e-15);
        assert!((c - (-0.9189)).abs() < 1e-4);
        assert!((gaussian_log_density(&[1.0], &[0.0], 1.0).unwrap() - (c - 0.5)).abs() < 1e-15);
        assert!(gaussian_log_density(&[1.0], &[0.0], 0.0).is_err());
        assert!(gaussian_log_density(&[1.0], &[0.0], -1.0).is_err());
    }

    #[test]
    fn posterior_mean_at_first_step_is_x0() {
        let s = build_schedule(100, 1e-4, 0.2).unwrap();
        let (c0, ct) = s.posterior_coefficients(1);
        assert!((c0 - 1.0).abs() < 1e-12);
        assert_eq!(ct, 0.0);
    }

    proptest! {
        #[test]
        fn forward_noising_is_affine(t in 0usize..=100, x in -5.0f64..5.0, e in -3.0f64..3.0) {
            let s = build_schedule(100, 1e-4, 0.2).unwrap();
            let y = add_noise(&sv(&[x]), &sv(&[e]), t, &s).unwrap();
            let mut alpha = 1.0;
            for k in 1..=t {
                alpha *= 1.0 - (1e-4 + (0.2 - 1e-4) * (k - 1) as f64 / 99.0);
            }
            let expected = alpha.sqrt() * x + (1.0 - alpha).sqrt() * e;
            prop_assert!((y.values[0] - expected).abs() < 1e-12);
        }

        #[test]
        fn log_density_differences_cancel_normalizer(
            x in proptest::collection::vec(-3.0f64..3.0, 3),
            m in proptest::collection::vec(-3.0f64..3.0, 3),
            m2 in proptest::collection::vec(-3.0f64..3.0, 3),
            sigma in 0.05f64..2.0,
        ) {
            let lhs = gaussian_log_density(&x, &m, sigma).unwrap()
                - gaussian_log_density(&x, &m2, sigma).unwrap();
            let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            let rhs = (sq(&x, &m2) - sq(&x, &m)) / (2.0 * sigma * sigma);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }
}
