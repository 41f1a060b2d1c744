//! Latent video diffusion fine-tuning with an additive transformer
//! perturbation branch.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode autodiff tape.
//! - [`codec`]: the fixed orthogonal pixel/latent codec and patch tokenisation.
//! - [`diffusion`]: noise schedule, closed-form noising, DDIM sampling and inversion.
//! - [`denoiser`]: the small convolutional noise predictor and the perturbation sum.
//! - [`vgt`]: the video generation transformer producing the perturbation.
//! - [`objectives`]: reconstruction losses and the noise discriminator.
//! - [`trainer`]: single-video fine-tuning, checkpoints and sampling.
//! - [`metrics`]: Horn–Schunck flow, flow consistency index, PSNR.
//! - [`data`], [`config`]: synthetic scenes, file formats, flat configs.

pub mod codec;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod trainer;
pub mod vgt;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};

/// Deterministic RNG used everywhere a seed is accepted.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
