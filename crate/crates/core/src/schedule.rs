//! Forward diffusion: linear β schedules, marginal noising, and the DDIM
//! timestep subsequence with encode-ratio truncation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// β and cumulative ᾱ tables for `T` discrete steps.
///
/// `alpha_bars` has `T + 1` entries with `alpha_bars[0] = 1`, so timestep 0
/// is the clean image and `betas[t - 1]` is the β of step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Schedule parameters as they appear in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// `T = 200` with the standard 1e-4..0.02 endpoints rescaled by `1000/T`,
    /// which keeps the per-unit-time noise level of the `T = 1000` schedule.
    fn default() -> Self {
        Self {
            timesteps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Linear β ramp from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta vector".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            timesteps: betas.len(),
            betas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::TimestepOutOfRange {
            t,
            min: 0,
            max: self.timesteps,
        })
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`. Returns `x0` unchanged at `t = 0`.
pub fn forward_diffuse(s: &NoiseSchedule, x0: &ImageGrid, t: usize, eps: &ImageGrid) -> Result<ImageGrid> {
    x0.ensure_same_shape(eps)?;
    let ab = s.alpha_bar(t)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    x0.affine(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Reverse-process time grid: `taus[n] = ⌊(λT/N)·n⌋` for `n = 0..=N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    taus: Vec<usize>,
    lambda_bits: u64,
}

impl TimeGrid {
    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn steps(&self) -> usize {
        self.taus.len() - 1
    }

    pub fn lambda(&self) -> f64 {
        f64::from_bits(self.lambda_bits)
    }

    /// Final (largest) timestep, `⌊λT⌋`.
    pub fn last(&self) -> usize {
        *self.taus.last().expect("time grid is never empty")
    }
}

/// Relative slack used when flooring `λT·n/N`, so products that are integral
/// in exact arithmetic are not pushed one below by binary rounding
/// (e.g. `λ = 1/T`).
const FLOOR_SLACK: f64 = 1e-9;

fn snapped_floor(x: f64) -> usize {
    (x + FLOOR_SLACK * x.abs().max(1.0)).floor() as usize
}

/// Number of encode steps `⌊λT⌋`.
pub fn encode_steps(timesteps: usize, lambda: f64) -> usize {
    snapped_floor(lambda * timesteps as f64)
}

pub fn make_tau(timesteps: usize, steps: usize, lambda: f64) -> Result<TimeGrid> {
    if timesteps == 0 || steps == 0 {
        return Err(Error::InvalidArgument("make_tau needs T >= 1 and N >= 1".into()));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidArgument(format!("encode ratio {lambda} outside (0, 1]")));
    }
    let top = encode_steps(timesteps, lambda);
    if steps > top {
        return Err(Error::InvalidArgument(format!(
            "N = {steps} exceeds floor(lambda*T) = {top}; timesteps would repeat"
        )));
    }
    let stride = lambda * timesteps as f64 / steps as f64;
    let taus = (0..=steps).map(|n| snapped_floor(stride * n as f64)).collect();
    Ok(TimeGrid {
        taus,
        lambda_bits: lambda.to_bits(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn two_step_schedule() {
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        let ab = s.alpha_bars();
        assert_eq!(ab[0], 1.0);
        assert!((ab[1] - 0.9).abs() < 1e-15);
        assert!((ab[2] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
    }

    #[test]
    fn thousand_step_terminal_alpha_bar() {
        // mpmath (50 digits): 4.0358297653756833e-5
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(close(s.alpha_bars()[1000], 4.035_829_765_375_683_3e-5, 1e-9));
    }

    #[test]
    fn default_schedule_ends_near_pure_noise() {
        // mpmath (50 digits): 3.0318371672319063e-5
        let s = ScheduleConfig::default().build().unwrap();
        assert!(s.alpha_bars()[200] < 0.01);
        assert!(close(s.alpha_bars()[200], 3.031_837_167_231_906_3e-5, 1e-9));
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.3, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap(); // ᾱ_1 = 0.25
        let ones = ImageGrid::filled(1, 2, 2, 1.0);
        let zeros = ImageGrid::zeros(1, 2, 2);
        let a = forward_diffuse(&s, &ones, 1, &zeros).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.5));
        let b = forward_diffuse(&s, &zeros, 1, &ones).unwrap();
        assert!(b.data().iter().all(|&v| (v - 0.75f64.sqrt()).abs() < 1e-15));
        let c = forward_diffuse(&s, &ones, 0, &b).unwrap();
        assert_eq!(c, ones);
        assert!(forward_diffuse(&s, &ones, 2, &zeros).is_err());
        assert!(forward_diffuse(&s, &ones, 1, &ImageGrid::zeros(1, 2, 3)).is_err());
    }

    #[test]
    fn tau_examples() {
        assert_eq!(make_tau(1000, 5, 0.5).unwrap().taus(), &[0, 100, 200, 300, 400, 500]);
        assert_eq!(make_tau(1000, 1, 1.0).unwrap().taus(), &[0, 1000]);
        assert_eq!(make_tau(10, 3, 1.0).unwrap().taus(), &[0, 3, 6, 10]);
        assert_eq!(make_tau(200, 1, 1.0 / 200.0).unwrap().taus(), &[0, 1]);
        assert!(make_tau(10, 6, 0.5).is_err());
        assert!(make_tau(10, 1, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bars_strictly_decrease(betas in proptest::collection::vec(1e-6f64..0.999, 1..200)) {
            let s = NoiseSchedule::from_betas(betas.clone()).unwrap();
            let ab = s.alpha_bars();
            prop_assert_eq!(ab[0], 1.0);
            for t in 1..ab.len() {
                prop_assert!(ab[t] < ab[t - 1]);
                prop_assert!((ab[t] - ab[t - 1] * (1.0 - betas[t - 1])).abs() <= 1e-12);
            }
        }

        #[test]
        fn tau_boundaries(t in 1usize..2000, lam_milli in 1u32..=1000, n_seed in 0usize..10_000) {
            let lambda = lam_milli as f64 / 1000.0;
            let top = (lam_milli as usize * t) / 1000;
            prop_assume!(top >= 1);
            let n = 1 + n_seed % top;
            let g = make_tau(t, n, lambda).unwrap();
            prop_assert_eq!(g.taus()[0], 0);
            prop_assert_eq!(g.last(), top);
            prop_assert!(g.taus().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
