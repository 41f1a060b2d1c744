//! The small convolutional noise predictor, prompt conditioning,
//! classifier-free guidance and the additive perturbation sum.

use crate::nn::{self, Bound, ParamStore};
use crate::tensor::{sinusoidal_embedding, Graph, Real, Tensor, Var};
use crate::vgt::Vgt;
use crate::{Error, Result, Rng};

/// Prompt id reserved for the unconditional (null) prompt.
pub const NULL_PROMPT: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Channels at full latent resolution.
    pub base_channels: usize,
    /// Channels at the two downsampled resolutions.
    pub mid_channels: usize,
    /// Number of diffusion steps (rows of the time table are `0..=steps`).
    pub steps: usize,
    /// Prompt table size, including the null prompt.
    pub prompts: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            base_channels: 16,
            mid_channels: 32,
            steps: 50,
            prompts: 4,
        }
    }
}

/// Two stride-2 down blocks, a bottleneck conditioned on time and prompt,
/// two nearest-upsample blocks with skip connections and a zero-initialised
/// output convolution. Frames are processed independently.
#[derive(Clone, Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
}

const P: &str = "unet";

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        if cfg.latent_channels == 0 || cfg.base_channels == 0 || cfg.mid_channels == 0 {
            return Err(Error::Config("denoiser channel counts must be positive".into()));
        }
        if cfg.prompts < 1 || cfg.steps < 1 {
            return Err(Error::Config("denoiser needs >= 1 prompt and >= 1 step".into()));
        }
        Ok(Denoiser { cfg })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let c = &self.cfg;
        let (c0, c1, c2) = (c.latent_channels, c.base_channels, c.mid_channels);
        nn::add_conv2d(store, &format!("{P}.conv_in"), c0, c1, 3, false, rng)?;
        nn::add_conv2d(store, &format!("{P}.down1"), c1, c2, 3, false, rng)?;
        nn::add_conv2d(store, &format!("{P}.down2"), c2, c2, 3, false, rng)?;
        nn::add_conv2d(store, &format!("{P}.mid"), c2, c2, 3, false, rng)?;
        nn::add_conv2d(store, &format!("{P}.up1"), 2 * c2, c2, 3, false, rng)?;
        nn::add_conv2d(store, &format!("{P}.up2"), c2 + c1, c1, 3, false, rng)?;
        nn::add_conv2d(store, &format!("{P}.conv_out"), c1, c0, 3, true, rng)?;
        let time = Tensor::from_fn(&[c.steps + 1, c2], |i| sinusoidal_embedding(i / c2, c2)[i % c2]);
        store.insert(format!("{P}.time"), time)?;
        store.insert(format!("{P}.prompt"), Tensor::randn(&[c.prompts, c2], 0.1, rng))?;
        Ok(())
    }

    /// Predicted noise for `z[B, F, c, h, w]` at step `t` under `prompt`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, t: usize, prompt: usize) -> Result<Var> {
        let c = &self.cfg;
        if t == 0 || t > c.steps {
            return Err(Error::Contract(format!("step {t} outside [1, {}]", c.steps)));
        }
        if prompt >= c.prompts {
            return Err(Error::Contract(format!("prompt id {prompt} >= {} prompts", c.prompts)));
        }
        let s = g.shape(z).to_vec();
        if s.len() != 5 || s[2] != c.latent_channels || s[3] % 4 != 0 || s[4] % 4 != 0 {
            return Err(Error::dim(format!(
                "denoiser expects [B, F, {}, h, w] with h, w divisible by 4, got {:?}",
                c.latent_channels, s
            )));
        }
        let x = g.reshape(z, &[s[0] * s[1], s[2], s[3], s[4]])?;

        let h0 = nn::conv2d(g, p, &format!("{P}.conv_in"), x, 1, 1)?;
        let h0 = g.silu(h0)?;
        let d1 = nn::conv2d(g, p, &format!("{P}.down1"), h0, 2, 1)?;
        let d1 = g.silu(d1)?;
        let d2 = nn::conv2d(g, p, &format!("{P}.down2"), d1, 2, 1)?;
        let d2 = g.silu(d2)?;

        let temb = g.select_row(p.get(&format!("{P}.time"))?, t)?;
        let pemb = g.select_row(p.get(&format!("{P}.prompt"))?, prompt)?;
        let cond = g.add(temb, pemb)?;
        let b = g.add_channel(d2, cond)?;
        let m = nn::conv2d(g, p, &format!("{P}.mid"), b, 1, 1)?;
        let m = g.silu(m)?;

        let u1 = g.upsample2d(m, 2)?;
        let u1 = g.concat(&[u1, d1], 1)?;
        let u1 = nn::conv2d(g, p, &format!("{P}.up1"), u1, 1, 1)?;
        let u1 = g.silu(u1)?;
        let u2 = g.upsample2d(u1, 2)?;
        let u2 = g.concat(&[u2, h0], 1)?;
        let u2 = nn::conv2d(g, p, &format!("{P}.up2"), u2, 1, 1)?;
        let u2 = g.silu(u2)?;
        let out = nn::conv2d(g, p, &format!("{P}.conv_out"), u2, 1, 1)?;
        g.reshape(out, &s)
    }

    /// Inference-only forward on plain tensors.
    pub fn predict(&self, params: &ParamStore, z: &Tensor, t: usize, prompt: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false)?;
        let zv = g.constant(z.clone())?;
        let out = self.forward(&mut g, &p, zv, t, prompt)?;
        Ok(g.value(out).clone())
    }

    /// Classifier-free guidance: `ε_null + w·(ε_prompt − ε_null)`.
    /// `w = 1` returns the prompt prediction and `w = 0` the null one.
    pub fn guided_epsilon(&self, params: &ParamStore, z: &Tensor, t: usize, prompt: usize, w: Real) -> Result<Tensor> {
        if !(w >= 0.0) {
            return Err(Error::Config(format!("guidance weight must be >= 0, got {w}")));
        }
        if w == 1.0 {
            return self.predict(params, z, t, prompt);
        }
        let null = self.predict(params, z, t, NULL_PROMPT)?;
        if w == 0.0 {
            return Ok(null);
        }
        let cond = self.predict(params, z, t, prompt)?;
        guidance_mix(&null, &cond, w)
    }
}

/// `null + w·(cond − null)`.
pub fn guidance_mix(null: &Tensor, cond: &Tensor, w: Real) -> Result<Tensor> {
    null.zip_map(cond, |a, b| a + w * (b - a))
}

/// Denoiser output, transformer perturbation and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedPrediction {
    pub unet_out: Tensor,
    pub vgt_out: Tensor,
    pub combined: Tensor,
    /// `‖vgt_out‖₂ / ‖unet_out‖₂`, denominator guarded at 1e-12.
    pub norm_ratio: Real,
}

pub const RATIO_GUARD: Real = 1e-12;

/// `‖v‖₂ / max(‖u‖₂, 1e-12)`.
pub fn norm_ratio(unet_out: &Tensor, vgt_out: &Tensor) -> Real {
    vgt_out.l2_norm() / unet_out.l2_norm().max(RATIO_GUARD)
}

impl CombinedPrediction {
    pub fn from_parts(unet_out: Tensor, vgt_out: Tensor) -> Result<Self> {
        let combined = unet_out.add(&vgt_out)?;
        let norm_ratio = norm_ratio(&unet_out, &vgt_out);
        Ok(CombinedPrediction {
            unet_out,
            vgt_out,
            combined,
            norm_ratio,
        })
    }
}

/// Denoiser prediction at `z_hat` plus the transformer perturbation at `z_t`.
pub fn combine(
    denoiser: &Denoiser,
    vgt: Option<&Vgt>,
    params: &ParamStore,
    z_hat: &Tensor,
    z_t: &Tensor,
    t: usize,
    prompt: usize,
) -> Result<CombinedPrediction> {
    if z_hat.shape() != z_t.shape() {
        return Err(Error::dim(format!("combine: {:?} vs {:?}", z_hat.shape(), z_t.shape())));
    }
    let unet_out = denoiser.predict(params, z_hat, t, prompt)?;
    let vgt_out = match vgt {
        Some(v) => v.predict(params, z_t, t)?,
        None => Tensor::zeros(z_t.shape()),
    };
    CombinedPrediction::from_parts(unet_out, vgt_out)
}
