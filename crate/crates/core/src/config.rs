//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys and malformed
//! values are errors. [`TrainConfig::to_text`] writes every key in a fixed
//! order, and its SHA-256 prefix is the config hash stored in checkpoints.
//!
//! Desk defaults are 8 frames at 32×32; the reference setting is 24 frames
//! at 512×512 with learning rate 3e-5.

use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::objectives::LossWeights;
use crate::tensor::Real;
use crate::vgt::{VgtConfig, VgtVariant};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: Real,
    pub weights: LossWeights,
    pub diffusion_steps: usize,
    pub beta_min: Real,
    pub beta_max: Real,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Codec patch factor: latent extents are the pixel extents divided by it.
    pub codec_factor: usize,
    pub codec_seed: u64,
    pub seed: u64,
    pub variant: VgtVariant,
    pub masked: bool,
    pub vgt_spatial_layers: usize,
    pub vgt_temporal_layers: usize,
    pub vgt_heads: usize,
    pub vgt_width: usize,
    pub vgt_patch: usize,
    pub unet_base: usize,
    pub unet_mid: usize,
    pub prompts: usize,
    pub prompt: usize,
    pub guidance: Real,
    pub disable_vgt: bool,
    pub disable_gan: bool,
    /// Plain MSE objective with no adversarial term.
    pub mse_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 750,
            lr: 1e-3,
            weights: LossWeights::default(),
            diffusion_steps: 50,
            beta_min: 1e-4,
            beta_max: 0.02,
            frames: 8,
            height: 32,
            width: 32,
            channels: 1,
            codec_factor: 2,
            codec_seed: 7,
            seed: 0,
            variant: VgtVariant::Pure,
            masked: true,
            vgt_spatial_layers: 2,
            vgt_temporal_layers: 2,
            vgt_heads: 4,
            vgt_width: 32,
            vgt_patch: 4,
            unet_base: 16,
            unet_mid: 32,
            prompts: 4,
            prompt: 1,
            guidance: 1.0,
            disable_vgt: false,
            disable_gan: false,
            mse_only: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true/false, got `{v}`"))),
    }
}

impl TrainConfig {
    pub fn latent_channels(&self) -> usize {
        self.channels * self.codec_factor * self.codec_factor
    }

    pub fn latent_extent(&self) -> (usize, usize) {
        (self.height / self.codec_factor, self.width / self.codec_factor)
    }

    /// Reports the first violated invariant.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.frames == 0 || self.channels == 0 || self.codec_factor == 0 {
            return fail("frames, channels and codec_factor must be positive".into());
        }
        if self.height % self.codec_factor != 0 || self.width % self.codec_factor != 0 {
            return fail(format!(
                "{}×{} frames are not divisible by codec_factor {}",
                self.height, self.width, self.codec_factor
            ));
        }
        let (h, w) = self.latent_extent();
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return fail(format!("latent extent {h}×{w} must be a positive multiple of 4"));
        }
        if self.prompt == 0 || self.prompt >= self.prompts {
            return fail(format!("prompt must be in [1, {}), got {}", self.prompts, self.prompt));
        }
        if !(self.guidance >= 0.0) {
            return fail(format!("guidance must be >= 0, got {}", self.guidance));
        }
        if self.diffusion_steps == 0 {
            return fail("diffusion_steps must be positive".into());
        }
        self.vgt_config().validate()?;
        Ok(())
    }

    pub fn vgt_config(&self) -> VgtConfig {
        let (h, w) = self.latent_extent();
        VgtConfig {
            variant: self.variant,
            spatial_layers: self.vgt_spatial_layers,
            temporal_layers: self.vgt_temporal_layers,
            heads: self.vgt_heads,
            width: self.vgt_width,
            patch: self.vgt_patch,
            masked: self.masked,
            latent_channels: self.latent_channels(),
            latent_height: h,
            latent_width: w,
            max_frames: self.frames,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: self.latent_channels(),
            base_channels: self.unet_base,
            mid_channels: self.unet_mid,
            steps: self.diffusion_steps,
            prompts: self.prompts,
        }
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "alpha" => self.weights.alpha = parse_num(key, v)?,
            "beta" => self.weights.beta = parse_num(key, v)?,
            "gamma" => self.weights.gamma = parse_num(key, v)?,
            "lambda" => self.weights.lambda = parse_num(key, v)?,
            "diffusion_steps" => self.diffusion_steps = parse_num(key, v)?,
            "beta_min" => self.beta_min = parse_num(key, v)?,
            "beta_max" => self.beta_max = parse_num(key, v)?,
            "frames" => self.frames = parse_num(key, v)?,
            "height" => self.height = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "codec_factor" => self.codec_factor = parse_num(key, v)?,
            "codec_seed" => self.codec_seed = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "variant" => self.variant = v.parse()?,
            "masked" => self.masked = parse_bool(key, v)?,
            "vgt_spatial_layers" => self.vgt_spatial_layers = parse_num(key, v)?,
            "vgt_temporal_layers" => self.vgt_temporal_layers = parse_num(key, v)?,
            "vgt_heads" => self.vgt_heads = parse_num(key, v)?,
            "vgt_width" => self.vgt_width = parse_num(key, v)?,
            "vgt_patch" => self.vgt_patch = parse_num(key, v)?,
            "unet_base" => self.unet_base = parse_num(key, v)?,
            "unet_mid" => self.unet_mid = parse_num(key, v)?,
            "prompts" => self.prompts = parse_num(key, v)?,
            "prompt" => self.prompt = parse_num(key, v)?,
            "guidance" => self.guidance = parse_num(key, v)?,
            "disable_vgt" => self.disable_vgt = parse_bool(key, v)?,
            "disable_gan" => self.disable_gan = parse_bool(key, v)?,
            "mse_only" => self.mse_only = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form, every key in a fixed order.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let pairs: Vec<(&str, String)> = vec![
            ("steps", self.steps.to_string()),
            ("lr", self.lr.to_string()),
            ("alpha", w.alpha.to_string()),
            ("beta", w.beta.to_string()),
            ("gamma", w.gamma.to_string()),
            ("lambda", w.lambda.to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("beta_min", self.beta_min.to_string()),
            ("beta_max", self.beta_max.to_string()),
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("channels", self.channels.to_string()),
            ("codec_factor", self.codec_factor.to_string()),
            ("codec_seed", self.codec_seed.to_string()),
            ("seed", self.seed.to_string()),
            ("variant", self.variant.to_string()),
            ("masked", self.masked.to_string()),
            ("vgt_spatial_layers", self.vgt_spatial_layers.to_string()),
            ("vgt_temporal_layers", self.vgt_temporal_layers.to_string()),
            ("vgt_heads", self.vgt_heads.to_string()),
            ("vgt_width", self.vgt_width.to_string()),
            ("vgt_patch", self.vgt_patch.to_string()),
            ("unet_base", self.unet_base.to_string()),
            ("unet_mid", self.unet_mid.to_string()),
            ("prompts", self.prompts.to_string()),
            ("prompt", self.prompt.to_string()),
            ("guidance", self.guidance.to_string()),
            ("disable_vgt", self.disable_vgt.to_string()),
            ("disable_gan", self.disable_gan.to_string()),
            ("mse_only", self.mse_only.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 8 bytes (little-endian) of the SHA-256 of [`TrainConfig::to_text`].
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}
