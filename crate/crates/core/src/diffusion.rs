//! Noise schedule, closed-form forward noising and deterministic DDIM.
//!
//! Steps are 1-based: `t ∈ [1, T]`, with `ᾱ_0 = 1` for the clean latent.
//! The denoiser convention is ε-prediction throughout.

use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Per-step `β_t`, `α_t = 1 − β_t` and `ᾱ_t = ∏ α_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<Real>,
    alphas: Vec<Real>,
    alpha_bars: Vec<Real>,
}

/// The noise drawn for one forward-noising step, kept as the
/// discriminator's real sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRecord {
    pub t: usize,
    pub noise: Tensor,
    pub noisy: Tensor,
}

impl NoiseSchedule {
    /// Linear `β` from `beta_min` to `beta_max` over `steps` steps.
    pub fn linear(steps: usize, beta_min: Real, beta_max: Real) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as Real / (steps - 1) as Real
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<Real>) -> Self {
        let alphas: Vec<Real> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        }
    }

    /// Schedule given directly by its cumulative products, which must lie in
    /// `(0, 1]` and be non-increasing.
    pub fn from_alpha_bars(alpha_bars: Vec<Real>) -> Result<Self> {
        if alpha_bars.is_empty() {
            return Err(Error::Config("empty schedule".into()));
        }
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(alpha_bars.len());
        for &ab in &alpha_bars {
            if !(ab > 0.0 && ab <= prev) {
                return Err(Error::Config(format!("alpha_bar sequence must be non-increasing in (0, 1], got {ab}")));
            }
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let alphas = betas.iter().map(|b| 1.0 - b).collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!("step {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<Real> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<Real> {
        self.check_step(t)?;
        Ok(self.alphas[t - 1])
    }

    /// `ᾱ_t` for `t ∈ [0, T]`.
    pub fn alpha_bar(&self, t: usize) -> Result<Real> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    pub fn alpha_bars(&self) -> &[Real] {
        &self.alpha_bars
    }

    /// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, z0: &Tensor, t: usize, noise: &Tensor) -> Result<(Tensor, NoiseRecord)> {
        let ab = self.alpha_bar(t)?;
        if t == 0 {
            return Err(Error::Contract("q_sample needs t >= 1".into()));
        }
        let noisy = mix(z0, ab.sqrt(), noise, (1.0 - ab).sqrt())?;
        Ok((
            noisy.clone(),
            NoiseRecord {
                t,
                noise: noise.clone(),
                noisy,
            },
        ))
    }

    /// One deterministic (η = 0) DDIM update from step `t` to `t − 1`.
    pub fn ddim_step(&self, z_t: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        let (ab_t, ab_prev) = (self.alpha_bar(t)?, self.alpha_bar(t - 1)?);
        let x0 = mix(z_t, 1.0 / ab_t.sqrt(), eps, -(1.0 - ab_t).sqrt() / ab_t.sqrt())?;
        mix(&x0, ab_prev.sqrt(), eps, (1.0 - ab_prev).sqrt())
    }

    /// The DDIM update run forward in time, from step `t − 1` to `t`.
    pub fn ddim_inverse_step(&self, z_prev: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        let (ab_t, ab_prev) = (self.alpha_bar(t)?, self.alpha_bar(t - 1)?);
        let x0 = mix(z_prev, 1.0 / ab_prev.sqrt(), eps, -(1.0 - ab_prev).sqrt() / ab_prev.sqrt())?;
        mix(&x0, ab_t.sqrt(), eps, (1.0 - ab_t).sqrt())
    }

    /// DDIM inversion of a clean latent to `z_T`, evaluating the noise
    /// predictor at the current latent with the target step.
    pub fn ddim_inversion(&self, z0: &Tensor, mut eps_fn: impl FnMut(&Tensor, usize) -> Result<Tensor>) -> Result<Tensor> {
        let mut z = z0.clone();
        for t in 1..=self.steps() {
            let eps = eps_fn(&z, t)?;
            z = self.ddim_inverse_step(&z, &eps, t)?;
        }
        Ok(z)
    }

    /// Reverse DDIM chain from `z_T` down to the clean latent.
    pub fn ddim_sample(&self, z_t: &Tensor, mut eps_fn: impl FnMut(&Tensor, usize) -> Result<Tensor>) -> Result<Tensor> {
        let mut z = z_t.clone();
        for t in (1..=self.steps()).rev() {
            let eps = eps_fn(&z, t)?;
            z = self.ddim_step(&z, &eps, t)?;
        }
        Ok(z)
    }
}

fn mix(a: &Tensor, wa: Real, b: &Tensor, wb: Real) -> Result<Tensor> {
    a.zip_map(b, |x, y| wa * x + wb * y)
}
