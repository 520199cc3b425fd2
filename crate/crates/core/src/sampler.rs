//! Guided DDIM sampling from a partially noised reference image.
//!
//! A reference is encoded to step `⌊λT⌋` with one draw of Gaussian noise and
//! then denoised down a [`TimeGrid`] with classifier-free guidance. With
//! `λ = 1` the encode step leaves almost nothing of the reference and the
//! sample is effectively drawn from noise.

use serde::{Deserialize, Serialize};

use crate::denoiser::{CondInput, Denoiser};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::rng::{derive_seed, fill_normal, keyed_rng, lambda_key};
use crate::schedule::{forward_diffuse, make_tau, NoiseSchedule};
use crate::shapesworld::Condition;

/// Conditioning of the unconditional guidance branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncondForm {
    /// Null scribble embedding, class set kept.
    #[default]
    KeepClassSet,
    /// Null scribble embedding and an empty class set.
    DropClassSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Guidance scale, `w ≥ −1`.
    pub w: f64,
    /// Encode ratio in `(0, 1]`.
    pub lambda: f64,
    /// Reverse steps `N ≤ ⌊λT⌋`.
    pub steps: usize,
    /// Stochasticity in `[0, 1]`; `0` gives deterministic DDIM.
    pub eta: f64,
    pub seed: u64,
    pub uncond: UncondForm,
    /// Clamp the final sample to `[-1, 1]`.
    pub clamp_output: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            w: 2.0,
            lambda: 1.0,
            steps: 50,
            eta: 0.0,
            seed: 0,
            uncond: UncondForm::KeepClassSet,
            clamp_output: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if !(self.w >= -1.0) || !self.w.is_finite() {
            return Err(Error::InvalidConfig(format!("guidance scale {} must be finite and >= -1", self.w)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(format!("eta {} outside [0, 1]", self.eta)));
        }
        make_tau(timesteps, self.steps, self.lambda).map(|_| ())
    }
}

/// `(1+w)·eps_cond − w·eps_uncond`, elementwise.
pub fn guided_noise(eps_cond: &ImageGrid, eps_uncond: &ImageGrid, w: f64) -> Result<ImageGrid> {
    eps_cond.ensure_same_shape(eps_uncond)?;
    if w == 0.0 {
        return Ok(eps_cond.clone());
    }
    eps_cond.affine(1.0 + w, eps_uncond, -w)
}

/// `(x_t − √(1−ᾱ_t)·eps)/√ᾱ_t`.
pub fn reconstruct_x0(x_t: &ImageGrid, eps: &ImageGrid, alpha_bar_t: f64) -> Result<ImageGrid> {
    if !(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha_bar {alpha_bar_t} outside (0, 1]")));
    }
    let inv = 1.0 / alpha_bar_t.sqrt();
    x_t.affine(inv, eps, -(1.0 - alpha_bar_t).sqrt() * inv)
}

/// DDIM's η-parameterised `σ = η·√((1−ᾱ_prev)/(1−ᾱ_cur))·√(1−ᾱ_cur/ᾱ_prev)`.
pub fn sigma_for(s: &NoiseSchedule, tau_prev: usize, tau_cur: usize, eta: f64) -> Result<f64> {
    if tau_prev >= tau_cur {
        return Err(Error::InvalidArgument(format!(
            "timesteps out of order: tau_prev={tau_prev} tau_cur={tau_cur}"
        )));
    }
    let ap = s.alpha_bar(tau_prev)?;
    let ac = s.alpha_bar(tau_cur)?;
    if eta == 0.0 {
        return Ok(0.0);
    }
    Ok(eta * ((1.0 - ap) / (1.0 - ac)).sqrt() * (1.0 - ac / ap).max(0.0).sqrt())
}

/// One reverse step from `tau_cur` to `tau_prev`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    x_cur: &ImageGrid,
    x0_hat: &ImageGrid,
    s: &NoiseSchedule,
    tau_prev: usize,
    tau_cur: usize,
    sigma: f64,
    noise: &ImageGrid,
) -> Result<ImageGrid> {
    x_cur.ensure_same_shape(x0_hat)?;
    x_cur.ensure_same_shape(noise)?;
    if tau_prev >= tau_cur {
        return Err(Error::InvalidArgument(format!(
            "timesteps out of order: tau_prev={tau_prev} tau_cur={tau_cur}"
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be >= 0")));
    }
    if tau_prev == 0 {
        return x0_hat.affine(1.0, noise, sigma);
    }
    let ap = s.alpha_bar(tau_prev)?;
    let ac = s.alpha_bar(tau_cur)?;
    let mut rest = 1.0 - ap - sigma * sigma;
    if rest < 0.0 {
        // Tolerate rounding at the maximal σ.
        if rest > -1e-12 {
            rest = 0.0;
        } else {
            return Err(Error::Numerical(format!(
                "sigma {sigma} too large for step {tau_cur}->{tau_prev} (1-ab_prev-sigma^2 = {rest})"
            )));
        }
    }
    let dir = rest.sqrt() / (1.0 - ac).sqrt();
    let (a, b, c) = (ap.sqrt() - dir * ac.sqrt(), dir, sigma);
    let mut out = x0_hat.clone();
    for (((o, &x0), &x), &z) in out
        .data_mut()
        .iter_mut()
        .zip(x0_hat.data())
        .zip(x_cur.data())
        .zip(noise.data())
    {
        *o = a * x0 + b * x + c * z;
    }
    Ok(out)
}

/// One image to synthesise in a batch, with its own noise streams.
#[derive(Debug, Clone, Copy)]
pub struct SampleRequest<'a> {
    pub x_ref: &'a ImageGrid,
    pub cond: &'a Condition,
    /// Seed of the encode-noise stream.
    pub encode_seed: u64,
    /// Seed of the per-step noise stream (unused when `eta = 0`).
    pub loop_seed: u64,
}

/// Seeds of the two noise streams for a sample keyed by `(seed, λ)`.
pub fn sample_seeds(seed: u64, lambda: f64) -> (u64, u64) {
    let key = lambda_key(lambda);
    (derive_seed(seed, "sample-encode", key), derive_seed(seed, "sample-loop", key))
}

/// Guided DDIM for a batch sharing one configuration. Each output depends
/// only on its own request, so batching does not change results.
pub fn sample_batch(d: &Denoiser, s: &NoiseSchedule, reqs: &[SampleRequest<'_>], cfg: &SamplerConfig) -> Result<Vec<ImageGrid>> {
    cfg.validate(s.timesteps())?;
    if d.config().timesteps != s.timesteps() {
        return Err(Error::InvalidArgument(format!(
            "schedule has T={} but denoiser was built for T={}",
            s.timesteps(),
            d.config().timesteps
        )));
    }
    let grid = make_tau(s.timesteps(), cfg.steps, cfg.lambda)?;
    let taus = grid.taus();
    let n = taus.len() - 1;
    let mut loop_rngs: Vec<_> = reqs.iter().map(|r| keyed_rng(r.loop_seed, "loop", &[])).collect();
    let mut xs: Vec<ImageGrid> = reqs
        .iter()
        .map(|r| {
            let mut eps = ImageGrid::zeros(r.x_ref.channels(), r.x_ref.height(), r.x_ref.width());
            fill_normal(&mut keyed_rng(r.encode_seed, "encode", &[]), eps.data_mut());
            forward_diffuse(s, r.x_ref, taus[n], &eps)
        })
        .collect::<Result<_>>()?;
    let uncond: Vec<CondInput<'_>> = reqs
        .iter()
        .map(|r| match cfg.uncond {
            UncondForm::KeepClassSet => CondInput::NullScribble(&r.cond.class_set_vector),
            UncondForm::DropClassSet => CondInput::Null,
        })
        .collect();
    let full: Vec<CondInput<'_>> = reqs.iter().map(|r| CondInput::Full(r.cond)).collect();
    for i in (1..=n).rev() {
        let (cur, prev) = (taus[i], taus[i - 1]);
        let refs: Vec<&ImageGrid> = xs.iter().collect();
        let eps: Vec<ImageGrid> = if cfg.w == 0.0 {
            d.predict_noise_batch(&refs, &vec![cur; refs.len()], &full)?
        } else {
            let mut both_x = refs.clone();
            both_x.extend(refs.iter().copied());
            let mut conds = full.clone();
            conds.extend(uncond.iter().copied());
            let mut preds = d.predict_noise_batch(&both_x, &vec![cur; both_x.len()], &conds)?;
            let un = preds.split_off(refs.len());
            preds
                .iter()
                .zip(&un)
                .map(|(c, u)| guided_noise(c, u, cfg.w))
                .collect::<Result<_>>()?
        };
        let ac = s.alpha_bar(cur)?;
        let sigma = sigma_for(s, prev, cur, cfg.eta)?;
        for ((x, e), rng) in xs.iter_mut().zip(&eps).zip(loop_rngs.iter_mut()) {
            let x0 = reconstruct_x0(x, e, ac)?;
            let mut noise = ImageGrid::zeros(x.channels(), x.height(), x.width());
            if sigma > 0.0 {
                fill_normal(rng, noise.data_mut());
            }
            *x = ddim_step(x, &x0, s, prev, cur, sigma, &noise)?;
        }
    }
    for x in &mut xs {
        if !x.is_finite() {
            return Err(Error::Numerical("sample produced non-finite values".into()));
        }
        if cfg.clamp_output {
            x.clamp(-1.0, 1.0);
        }
        x.round_to_f32();
    }
    Ok(xs)
}

/// Algorithm-level entry point: noise streams keyed by `(cfg.seed, λ)`.
pub fn sample(d: &Denoiser, s: &NoiseSchedule, x_ref: &ImageGrid, cond: &Condition, cfg: &SamplerConfig) -> Result<ImageGrid> {
    let (encode_seed, loop_seed) = sample_seeds(cfg.seed, cfg.lambda);
    let req = SampleRequest {
        x_ref,
        cond,
        encode_seed,
        loop_seed,
    };
    Ok(sample_batch(d, s, &[req], cfg)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_denoiser, DenoiserConfig};
    use crate::schedule::make_linear_schedule;
    use crate::shapesworld::{build_dataset, WorldConfig};

    fn setup() -> (Denoiser, NoiseSchedule, crate::shapesworld::Dataset) {
        let world = WorldConfig {
            height: 8,
            width: 8,
            min_visible_fraction: 0.05,
            ..WorldConfig::default()
        };
        let dcfg = DenoiserConfig {
            height: 8,
            width: 8,
            base_width: 4,
            depth: 2,
            time_embed_dim: 8,
            timesteps: 40,
            ..DenoiserConfig::default()
        };
        let s = make_linear_schedule(40, 2.5e-3, 0.5).unwrap();
        (init_denoiser(&dcfg, 3).unwrap(), s, build_dataset(4, &world, 5).unwrap())
    }

    #[test]
    fn guidance_examples() {
        let a = ImageGrid::filled(3, 2, 2, 1.0);
        let b = ImageGrid::zeros(3, 2, 2);
        assert_eq!(guided_noise(&a, &b, 0.0).unwrap(), a);
        assert!(guided_noise(&a, &b, 1.0).unwrap().data().iter().all(|&v| v == 2.0));
        for w in [-1.0, 0.5, 3.0, 9.0] {
            assert_eq!(guided_noise(&a, &a, w).unwrap(), a);
        }
        assert!(guided_noise(&a, &ImageGrid::zeros(3, 2, 1), 1.0).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let x = ImageGrid::filled(3, 2, 2, 0.3);
        let z = ImageGrid::zeros(3, 2, 2);
        let r = reconstruct_x0(&x, &z, 0.25).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        assert_eq!(reconstruct_x0(&x, &ImageGrid::filled(3, 2, 2, 5.0), 1.0).unwrap(), x);
        assert!(reconstruct_x0(&x, &z, 0.0).is_err());
    }

    #[test]
    fn sigma_examples() {
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        assert_eq!(sigma_for(&s, 1, 2, 0.0).unwrap(), 0.0);
        let one = sigma_for(&s, 1, 2, 1.0).unwrap();
        let want = (0.1f64 / 0.28).sqrt() * 0.2f64.sqrt();
        assert!((one - want).abs() < 1e-12 && (one - 0.2673).abs() < 1e-4);
        assert!((sigma_for(&s, 1, 2, 0.5).unwrap() - 0.5 * one).abs() < 1e-15);
        assert!(sigma_for(&s, 2, 1, 1.0).is_err());
        assert_eq!(sigma_for(&s, 0, 2, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn ddim_step_examples() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let x0 = ImageGrid::filled(1, 2, 2, 0.7);
        let xc = ImageGrid::filled(1, 2, 2, -0.2);
        let z = ImageGrid::filled(1, 2, 2, 1.3);
        assert_eq!(ddim_step(&xc, &x0, &s, 0, 4, 0.0, &z).unwrap(), x0);
        let ap = s.alpha_bar(3).unwrap();
        let smax = (1.0 - ap).sqrt();
        let zero = ImageGrid::zeros(1, 2, 2);
        let a = ddim_step(&xc, &x0, &s, 3, 6, smax, &zero).unwrap();
        let b = ddim_step(&z, &x0, &s, 3, 6, smax, &zero).unwrap();
        assert_eq!(a, b);
        assert!((a.data()[0] - ap.sqrt() * 0.7).abs() < 1e-12);
        assert!(ddim_step(&xc, &x0, &s, 3, 6, smax * 1.01, &zero).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_batch_invariant() {
        let (d, s, ds) = setup();
        let cfg = SamplerConfig {
            lambda: 0.5,
            steps: 5,
            eta: 0.5,
            seed: 9,
            ..SamplerConfig::default()
        };
        let it = &ds.items[0];
        let a = sample(&d, &s, &it.scene.image, &it.condition, &cfg).unwrap();
        let b = sample(&d, &s, &it.scene.image, &it.condition, &cfg).unwrap();
        assert_eq!(a, b);
        let reqs: Vec<SampleRequest<'_>> = ds
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let (e, l) = sample_seeds(100 + i as u64, cfg.lambda);
                SampleRequest {
                    x_ref: &it.scene.image,
                    cond: &it.condition,
                    encode_seed: e,
                    loop_seed: l,
                }
            })
            .collect();
        let all = sample_batch(&d, &s, &reqs, &cfg).unwrap();
        for (i, r) in reqs.iter().enumerate() {
            assert_eq!(sample_batch(&d, &s, &[*r], &cfg).unwrap()[0], all[i]);
        }
    }

    #[test]
    fn eta_zero_ignores_loop_noise() {
        let (d, s, ds) = setup();
        let cfg = SamplerConfig {
            lambda: 0.8,
            steps: 8,
            ..SamplerConfig::default()
        };
        let it = &ds.items[1];
        let mk = |loop_seed| SampleRequest {
            x_ref: &it.scene.image,
            cond: &it.condition,
            encode_seed: 1,
            loop_seed,
        };
        let a = sample_batch(&d, &s, &[mk(1)], &cfg).unwrap();
        let b = sample_batch(&d, &s, &[mk(2)], &cfg).unwrap();
        assert_eq!(a, b);
        let stochastic = SamplerConfig { eta: 1.0, ..cfg };
        let a = sample_batch(&d, &s, &[mk(1)], &stochastic).unwrap();
        let b = sample_batch(&d, &s, &[mk(2)], &stochastic).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_guidance_equals_conditional_loop() {
        let (d, s, ds) = setup();
        let it = &ds.items[2];
        let cfg = SamplerConfig {
            w: 0.0,
            lambda: 0.5,
            steps: 4,
            clamp_output: false,
            seed: 4,
            ..SamplerConfig::default()
        };
        let got = sample(&d, &s, &it.scene.image, &it.condition, &cfg).unwrap();
        let (e, _) = sample_seeds(4, 0.5);
        let mut eps = ImageGrid::zeros(3, 8, 8);
        fill_normal(&mut keyed_rng(e, "encode", &[]), eps.data_mut());
        let taus = make_tau(40, 4, 0.5).unwrap().taus().to_vec();
        let mut x = forward_diffuse(&s, &it.scene.image, taus[4], &eps).unwrap();
        for i in (1..=4).rev() {
            let ec = d.predict_noise(&x, taus[i], CondInput::Full(&it.condition)).unwrap();
            let x0 = reconstruct_x0(&x, &ec, s.alpha_bar(taus[i]).unwrap()).unwrap();
            x = ddim_step(&x, &x0, &s, taus[i - 1], taus[i], 0.0, &ImageGrid::zeros(3, 8, 8)).unwrap();
        }
        x.round_to_f32();
        assert_eq!(got, x);
    }

    #[test]
    fn tiny_encode_ratio_stays_near_reference() {
        let (d, s, ds) = setup();
        let mut near = 0.0;
        let mut far = 0.0;
        for (i, it) in ds.items.iter().enumerate() {
            let base = SamplerConfig {
                seed: i as u64,
                ..SamplerConfig::default()
            };
            let small = SamplerConfig {
                lambda: 1.0 / 40.0,
                steps: 1,
                ..base.clone()
            };
            let full = SamplerConfig {
                lambda: 1.0,
                steps: 10,
                ..base
            };
            near += sample(&d, &s, &it.scene.image, &it.condition, &small).unwrap().mse(&it.scene.image).unwrap();
            far += sample(&d, &s, &it.scene.image, &it.condition, &full).unwrap().mse(&it.scene.image).unwrap();
        }
        assert!(near < far, "{near} vs {far}");
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig {
            steps: 60,
            lambda: 0.25,
            ..SamplerConfig::default()
        };
        assert!(c.validate(200).is_err());
        c.steps = 50;
        assert!(c.validate(200).is_ok());
        c.eta = 1.5;
        assert!(c.validate(200).is_err());
        c.eta = 0.0;
        c.w = -2.0;
        assert!(c.validate(200).is_err());
    }
}
