//! Single-video fine-tuning of the denoiser and perturbation transformer
//! against the noise discriminator, DDIM sampling and the ablation harness.

mod checkpoint;

pub use checkpoint::{AdamState, Checkpoint, RngState, CHECKPOINT_VERSION};

use rand::{Rng as _, SeedableRng};

use crate::codec::{Codec, LatentTensor, VideoTensor};
use crate::config::TrainConfig;
use crate::denoiser::{norm_ratio, CombinedPrediction, Denoiser};
use crate::diffusion::NoiseSchedule;
use crate::metrics;
use crate::nn::ParamStore;
use crate::objectives::{hyper_loss, total_objective, Discriminator, PerceptualNet, PERCEPTUAL_SEED};
use crate::optim::Adam;
use crate::tensor::{Graph, Real, Tensor};
use crate::vgt::Vgt;
use crate::{Error, Result, Rng};

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub t: usize,
    pub mse: Real,
    pub l1: Real,
    pub per: Real,
    /// Generator adversarial term; 0 when the discriminator is off.
    pub lg: Real,
    pub d_loss: Real,
    pub total: Real,
    pub norm_ratio: Real,
    /// Largest gradient that reached a discriminator parameter through the
    /// generator objective.
    pub cross_grad: Real,
}

pub const LOG_HEADER: &str = "step,mse,l1,per,lg,total,norm_ratio";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.mse, self.l1, self.per, self.lg, self.total, self.norm_ratio
        )
    }
}

/// Training log as CSV with [`LOG_HEADER`].
pub fn log_csv(records: &[StepRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// How the starting latent of the reverse loop is obtained.
#[derive(Clone, Copy, Debug)]
pub enum SampleMode<'a> {
    /// DDIM inversion of a reference video.
    Reconstruct(&'a VideoTensor),
    /// Seeded Gaussian latent.
    Generate { seed: u64 },
}

/// Generator, discriminator, their optimisers and the training RNG.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    codec: Codec,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    vgt: Option<Vgt>,
    disc: Discriminator,
    perceptual: PerceptualNet,
    gen: ParamStore,
    disc_params: ParamStore,
    gen_opt: Adam,
    disc_opt: Adam,
    rng: Rng,
    step: u64,
    d_updates: u64,
    g_updates: u64,
}

impl Trainer {
    /// Fresh models initialised from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let codec = Codec::new(cfg.channels, cfg.codec_factor, cfg.codec_seed)?;
        let schedule = NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)?;
        let denoiser = Denoiser::new(cfg.denoiser_config())?;
        let vgt = if cfg.disable_vgt { None } else { Some(Vgt::new(cfg.vgt_config())?) };
        let disc = Discriminator::new(cfg.latent_channels())?;
        let perceptual = PerceptualNet::new(cfg.latent_channels(), PERCEPTUAL_SEED);

        let mut init = crate::rng_from_seed(cfg.seed);
        let mut gen = ParamStore::new();
        denoiser.init(&mut gen, &mut init)?;
        if let Some(v) = &vgt {
            v.init(&mut gen, &mut init)?;
        }
        let mut disc_params = ParamStore::new();
        disc.init(&mut disc_params, &mut init)?;

        let mut rng = Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            gen_opt: Adam::new(&gen, cfg.lr),
            disc_opt: Adam::new(&disc_params, cfg.lr),
            cfg,
            codec,
            schedule,
            denoiser,
            vgt,
            disc,
            perceptual,
            gen,
            disc_params,
            rng,
            step: 0,
            d_updates: 0,
            g_updates: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn vgt(&self) -> Option<&Vgt> {
        self.vgt.as_ref()
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    /// Denoiser and transformer parameters.
    pub fn generator_params(&self) -> &ParamStore {
        &self.gen
    }

    pub fn discriminator_params(&self) -> &ParamStore {
        &self.disc_params
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// `(discriminator, generator)` update counts.
    pub fn update_counts(&self) -> (u64, u64) {
        (self.d_updates, self.g_updates)
    }

    fn gan_enabled(&self) -> bool {
        !self.cfg.disable_gan && !self.cfg.mse_only
    }

    /// Encodes a video after checking it against the configured extents.
    pub fn encode(&self, video: &VideoTensor) -> Result<LatentTensor> {
        let c = &self.cfg;
        if video.dims() != [1, c.frames, c.channels, c.height, c.width] {
            return Err(Error::dim(format!(
                "video {:?} does not match configured [1, {}, {}, {}, {}]",
                video.shape(),
                c.frames,
                c.channels,
                c.height,
                c.width
            )));
        }
        self.codec.encode(video)
    }

    /// The `(t, ε)` the next training step will draw, without consuming it.
    pub fn peek_draw(&self, shape: &[usize]) -> (usize, Tensor) {
        let mut rng = self.rng.clone();
        draw(&mut rng, self.cfg.diffusion_steps, shape)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, z0: &LatentTensor) -> Result<StepRecord> {
        let step = self.step;
        let (t, eps) = draw(&mut self.rng, self.cfg.diffusion_steps, z0.shape());
        let record = self.step_inner(z0.tensor(), t, eps).map_err(|e| match e {
            Error::NonFinite(op) => Error::Numerical {
                step,
                detail: format!("t = {t}: non-finite value from `{op}`"),
            },
            other => other,
        })?;
        self.step += 1;
        Ok(record)
    }

    fn step_inner(&mut self, z0: &Tensor, t: usize, eps: Tensor) -> Result<StepRecord> {
        let (z_t, _) = self.schedule.q_sample(z0, t, &eps)?;
        let prompt = self.cfg.prompt;

        let mut g = Graph::new();
        let gp = self.gen.bind(&mut g, true)?;
        let zt = g.constant(z_t)?;
        let u = self.denoiser.forward(&mut g, &gp, zt, t, prompt)?;
        let (fake, ratio) = match &self.vgt {
            Some(vgt) => {
                let v = vgt.forward(&mut g, &gp, zt, t)?;
                let ratio = norm_ratio(g.value(u), g.value(v));
                (g.add(u, v)?, ratio)
            }
            None => (u, 0.0),
        };

        let gan = self.gan_enabled();
        let d_loss = if gan { self.update_discriminator(&eps, g.value(fake))? } else { 0.0 };

        let eps_v = g.constant(eps)?;
        let w = self.cfg.weights;
        let h = hyper_loss(&mut g, &self.perceptual, eps_v, fake, &w)?;
        let mut disc_vars = None;
        let (lg, total) = if gan {
            let dp = self.disc_params.bind(&mut g, false)?;
            let lg = self.disc.g_loss(&mut g, &dp, fake)?;
            disc_vars = Some(dp);
            (Some(lg), total_objective(&mut g, h.total, lg, &w)?)
        } else if self.cfg.mse_only {
            (None, h.mse)
        } else {
            (None, h.total)
        };
        g.backward(total)?;

        let mut cross_grad: Real = 0.0;
        if let Some(dp) = &disc_vars {
            for (name, _) in self.disc_params.iter() {
                if let Some(gr) = g.grad(dp.get(name)?) {
                    cross_grad = cross_grad.max(gr.max_abs());
                }
            }
        }
        let grads = self.gen.collect_grads(&g, &gp)?;
        self.gen_opt.update(&mut self.gen, &grads)?;
        self.g_updates += 1;

        let val = |v| g.value(v).item();
        Ok(StepRecord {
            step: self.step,
            t,
            mse: val(h.mse)?,
            l1: val(h.l1)?,
            per: val(h.per)?,
            lg: lg.map(val).transpose()?.unwrap_or(0.0),
            d_loss,
            total: val(total)?,
            norm_ratio: ratio,
            cross_grad,
        })
    }

    /// Discriminator update on the true noise against a detached copy of
    /// the generator prediction; returns the loss before the update.
    fn update_discriminator(&mut self, real: &Tensor, fake: &Tensor) -> Result<Real> {
        let mut g = Graph::new();
        let dp = self.disc_params.bind(&mut g, true)?;
        let r = g.constant(real.clone())?;
        let f = g.constant(fake.clone())?;
        let loss = self.disc.d_loss(&mut g, &dp, r, f)?;
        g.backward(loss)?;
        let grads = self.disc_params.collect_grads(&g, &dp)?;
        self.disc_opt.update(&mut self.disc_params, &grads)?;
        self.d_updates += 1;
        g.value(loss).item()
    }

    /// Runs `steps` training steps on `video`, calling `on_step` after each.
    pub fn train(&mut self, video: &VideoTensor, steps: u64, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let z0 = self.encode(video)?;
        let mut log = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let r = self.train_step(&z0)?;
            on_step(&r);
            log.push(r);
        }
        Ok(log)
    }

    /// Denoiser prediction at `z_hat` plus the perturbation at `z_t`.
    pub fn combine(&self, z_hat: &Tensor, z_t: &Tensor, t: usize) -> Result<CombinedPrediction> {
        crate::denoiser::combine(&self.denoiser, self.vgt.as_ref(), &self.gen, z_hat, z_t, t, self.cfg.prompt)
    }

    /// Guided denoiser prediction plus the perturbation, as used by sampling.
    pub fn sampling_epsilon(&self, z: &Tensor, t: usize, prompt: usize, guidance: Real) -> Result<Tensor> {
        let eps = self.denoiser.guided_epsilon(&self.gen, z, t, prompt, guidance)?;
        match &self.vgt {
            Some(v) => eps.add(&v.predict(&self.gen, z, t)?),
            None => Ok(eps),
        }
    }

    /// Mean ε-prediction MSE over `draws` seeded `(t, ε)` draws.
    pub fn evaluate_mse(&self, z0: &LatentTensor, draws: usize, seed: u64) -> Result<Real> {
        let mut rng = crate::rng_from_seed(seed);
        let mut total = 0.0;
        for _ in 0..draws {
            let (t, eps) = draw(&mut rng, self.cfg.diffusion_steps, z0.shape());
            let (z_t, _) = self.schedule.q_sample(z0.tensor(), t, &eps)?;
            let pred = self.combine(&z_t, &z_t, t)?;
            let d = pred.combined.sub(&eps)?;
            total += d.data().iter().map(|x| x * x).sum::<Real>() / d.numel() as Real;
        }
        Ok(total / draws.max(1) as Real)
    }

    /// DDIM sampling with the guided prediction plus the perturbation at
    /// every step, decoded to pixels.
    pub fn sample(&self, mode: SampleMode<'_>, prompt: usize, guidance: Real) -> Result<VideoTensor> {
        let eps_fn = |z: &Tensor, t: usize| self.sampling_epsilon(z, t, prompt, guidance);
        let z_t = match mode {
            SampleMode::Reconstruct(video) => {
                let z0 = self.encode(video)?;
                self.schedule.ddim_inversion(z0.tensor(), eps_fn)?
            }
            SampleMode::Generate { seed } => {
                let c = &self.cfg;
                let (h, w) = c.latent_extent();
                Tensor::randn(&[1, c.frames, c.latent_channels(), h, w], 1.0, &mut crate::rng_from_seed(seed))
            }
        };
        let z0 = self.schedule.ddim_sample(&z_t, eps_fn)?;
        self.codec.decode(&LatentTensor::new(z0)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (gm, gv) = self.gen_opt.moments();
        let (dm, dv) = self.disc_opt.moments();
        Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            d_updates: self.d_updates,
            g_updates: self.g_updates,
            rng: RngState::capture(&self.rng),
            gen: self.gen.clone(),
            gen_adam: AdamState {
                step: self.gen_opt.steps(),
                m: gm.to_vec(),
                v: gv.to_vec(),
            },
            disc: self.disc_params.clone(),
            disc_adam: AdamState {
                step: self.disc_opt.steps(),
                m: dm.to_vec(),
                v: dv.to_vec(),
            },
        }
    }

    /// Rebuilds a trainer from a checkpoint, checking every buffer against
    /// the layout its config implies.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut tr = Trainer::new(ck.config.clone())?;
        fn fill(dst: &mut ParamStore, src: &ParamStore, what: &str) -> Result<()> {
            if dst.len() != src.len() {
                return Err(Error::Format(format!("{what}: {} buffers, expected {}", src.len(), dst.len())));
            }
            for ((dn, dt), (sn, st)) in dst.iter_mut().zip(src.iter()) {
                if dn != sn || dt.shape() != st.shape() {
                    return Err(Error::Format(format!("{what}: buffer `{sn}` {:?} where `{dn}` {:?} expected", st.shape(), dt.shape())));
                }
                *dt = st.clone();
            }
            Ok(())
        }
        fill(&mut tr.gen, &ck.gen, "generator")?;
        fill(&mut tr.disc_params, &ck.disc, "discriminator")?;
        tr.gen_opt.restore(ck.gen_adam.step, ck.gen_adam.m.clone(), ck.gen_adam.v.clone())?;
        tr.disc_opt.restore(ck.disc_adam.step, ck.disc_adam.m.clone(), ck.disc_adam.v.clone())?;
        tr.rng = ck.rng.restore();
        tr.step = ck.step;
        tr.d_updates = ck.d_updates;
        tr.g_updates = ck.g_updates;
        Ok(tr)
    }
}

fn draw(rng: &mut Rng, steps: usize, shape: &[usize]) -> (usize, Tensor) {
    let t = rng.random_range(1..=steps);
    let eps = Tensor::randn(shape, 1.0, rng);
    (t, eps)
}

/// Fine-tunes fresh models on `video` under `prompt` for `cfg.steps` steps.
pub fn fine_tune(video: &VideoTensor, prompt: usize, cfg: &TrainConfig) -> Result<(Trainer, Vec<StepRecord>)> {
    let mut cfg = cfg.clone();
    cfg.prompt = prompt;
    let mut tr = Trainer::new(cfg)?;
    let steps = tr.cfg.steps;
    let log = tr.train(video, steps, |_| {})?;
    Ok((tr, log))
}

/// Draws used by [`AblationRow::mse`].
pub const EVAL_DRAWS: usize = 100;
pub const EVAL_SEED: u64 = 0xe7a1;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// Post-training ε-prediction MSE over the fixed evaluation draws.
    pub mse: Real,
    /// Reconstruction PSNR against the training video.
    pub psnr: Real,
    pub fci: Real,
    /// Mean logged norm ratio over the run.
    pub norm_ratio: Real,
    pub vgt_calls: usize,
}

pub const ABLATION_HEADER: &str = "variant,mse,psnr,fci,norm_ratio";

/// The ablation rows: the full model and its reduced variants.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        c.disable_vgt = false;
        c.disable_gan = false;
        c.mse_only = false;
        f(&mut c);
        c
    };
    vec![
        ("full", with(&|_| {})),
        ("no_discriminator", with(&|c| c.disable_gan = true)),
        ("no_vgt", with(&|c| c.disable_vgt = true)),
        ("no_hyper_loss", with(&|c| c.mse_only = true)),
        ("no_vgt_discriminator", with(&|c| {
            c.disable_vgt = true;
            c.disable_gan = true;
        })),
    ]
}

/// Trains, samples and scores one variant.
pub fn run_variant(name: &str, video: &VideoTensor, cfg: &TrainConfig) -> Result<AblationRow> {
    let (tr, log) = fine_tune(video, cfg.prompt, cfg)?;
    let z0 = tr.encode(video)?;
    let recon = tr.sample(SampleMode::Reconstruct(video), cfg.prompt, cfg.guidance)?;
    let mean_ratio = if log.is_empty() {
        0.0
    } else {
        log.iter().map(|r| r.norm_ratio).sum::<Real>() / log.len() as Real
    };
    Ok(AblationRow {
        variant: name.to_string(),
        mse: tr.evaluate_mse(&z0, EVAL_DRAWS, EVAL_SEED)?,
        psnr: metrics::psnr(&recon, video)?,
        fci: metrics::fci(&recon)?,
        norm_ratio: mean_ratio,
        vgt_calls: tr.vgt().map_or(0, Vgt::calls),
    })
}

/// Runs every variant of [`ablation_variants`].
pub fn ablate(video: &VideoTensor, base: &TrainConfig) -> Result<Vec<AblationRow>> {
    ablation_variants(base)
        .into_iter()
        .map(|(name, cfg)| run_variant(name, video, &cfg))
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.variant, r.mse, r.psnr, r.fci, r.norm_ratio));
    }
    out
}
