use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pertdiff::config::TrainConfig;
use pertdiff::data::{export_frames, gen_video, read_video, write_vten, SceneKind, SceneSpec};
use pertdiff::metrics::{fci, mse, psnr, ratio_csv, ratio_trajectory};
use pertdiff::trainer::{ablate, ablation_csv, log_csv, Checkpoint, SampleMode, Trainer, LOG_HEADER};
use pertdiff::{gradcheck, Error, Real};

/// Single-video latent diffusion fine-tuning with a transformer
/// perturbation branch.
#[derive(Parser)]
#[command(name = "pertdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene to a .vten file.
    GenData(GenData),
    /// Fine-tune on one video; writes a checkpoint, the step log and the config.
    Train(Train),
    /// Sample a video from a checkpoint.
    Sample(Sample),
    /// FCI of a video, plus PSNR/MSE against a reference or the ratio series of a log.
    Metrics(Metrics),
    /// Run every ablation variant and write the comparison table.
    Ablate(Ablate),
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value = "moving_square")]
    kind: SceneKind,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
    vx: i64,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    vy: i64,
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also export PPM frames into this directory.
    #[arg(long)]
    frames_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the config's step count.
    #[arg(long)]
    steps: Option<u64>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint instead of fresh weights.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print progress to stderr every this many steps (0 disables).
    #[arg(long, default_value_t = 50)]
    progress: u64,
}

#[derive(Args)]
struct Sample {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Invert this video (reconstruction mode).
    #[arg(long, conflicts_with = "seed")]
    reference: Option<PathBuf>,
    /// Start from seeded Gaussian latents (generation mode).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prompt: Option<usize>,
    #[arg(long)]
    guidance: Option<Real>,
    #[arg(long)]
    frames_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Metrics {
    #[arg(long)]
    video: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Training log whose norm-ratio column is extracted.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Where to write the ratio series CSV (stdout when omitted).
    #[arg(long, requires = "log")]
    ratio_out: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
}

enum Failure {
    Usage(String),
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = Result<(), Failure>;

fn write(path: &Path, text: &str) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::Usage(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig, Failure> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(a: GenData) -> Outcome {
    let spec = SceneSpec {
        kind: a.kind,
        frames: a.frames,
        height: a.height,
        width: a.width,
        channels: a.channels,
        velocity: (a.vx, a.vy),
        size: a.size,
        seed: a.seed,
    };
    let video = gen_video(&spec)?;
    write_vten(&a.out, video.tensor())?;
    if let Some(dir) = a.frames_dir {
        export_frames(&video, &dir)?;
    }
    Ok(())
}

fn train(a: Train) -> Outcome {
    let video = read_video(&a.video)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.config.is_some() || !a.overrides.is_empty() {
                return Err(Failure::Usage("--resume uses the checkpoint's config; drop --config/--set".into()));
            }
            Trainer::from_checkpoint(&Checkpoint::load(path)?)?
        }
        None => Trainer::new(load_config(a.config.as_deref(), &a.overrides)?)?,
    };
    let steps = a.steps.unwrap_or(trainer.config().steps);
    fs::create_dir_all(&a.out_dir).map_err(|e| Failure::Usage(format!("{}: {e}", a.out_dir.display())))?;
    write(&a.out_dir.join("config.txt"), &trainer.config().to_text())?;

    let end = trainer.steps_done() + steps;
    let every = a.progress;
    let log = trainer.train(&video, steps, |r| {
        if every > 0 && (r.step + 1) % every == 0 {
            eprintln!("step {}/{end} mse {:.5} total {:.5} ratio {:.4}", r.step + 1, r.mse, r.total, r.norm_ratio);
        }
    })?;

    let log_path = a.out_dir.join("train_log.csv");
    let text = match (&a.resume, fs::read_to_string(&log_path)) {
        (Some(_), Ok(prev)) if prev.starts_with(LOG_HEADER) => {
            let rows = log_csv(&log);
            prev + rows.split_once('\n').map_or("", |(_, body)| body)
        }
        _ => log_csv(&log),
    };
    write(&log_path, &text)?;
    let ck = trainer.checkpoint();
    ck.save(&a.out_dir.join("checkpoint.apla"))?;
    println!("checkpoint {} step {} sha256 {}", a.out_dir.join("checkpoint.apla").display(), ck.step, ck.digest());
    Ok(())
}

fn sample(a: Sample) -> Outcome {
    let trainer = Trainer::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let prompt = a.prompt.unwrap_or(trainer.config().prompt);
    let guidance = a.guidance.unwrap_or(trainer.config().guidance);
    let reference = a.reference.as_deref().map(read_video).transpose()?;
    let mode = match (&reference, a.seed) {
        (Some(v), _) => SampleMode::Reconstruct(v),
        (None, Some(seed)) => SampleMode::Generate { seed },
        (None, None) => return Err(Failure::Usage("sample needs --reference (reconstruction) or --seed (generation)".into())),
    };
    let video = trainer.sample(mode, prompt, guidance)?;
    write_vten(&a.out, video.tensor())?;
    if let Some(dir) = a.frames_dir {
        export_frames(&video, &dir)?;
    }
    Ok(())
}

fn metrics(a: Metrics) -> Outcome {
    if a.video.is_none() && a.log.is_none() {
        return Err(Failure::Usage("metrics needs --video and/or --log".into()));
    }
    if let Some(path) = &a.video {
        let video = read_video(path)?;
        let mut out = format!("metric,value\nfci,{}\n", fci(&video)?);
        if let Some(r) = &a.reference {
            let reference = read_video(r)?;
            out.push_str(&format!("psnr,{}\nmse,{}\n", psnr(&video, &reference)?, mse(&video, &reference)?));
        }
        print!("{out}");
    } else if a.reference.is_some() {
        return Err(Failure::Usage("--reference needs --video".into()));
    }
    if let Some(path) = &a.log {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let csv = ratio_csv(&ratio_trajectory(&text)?);
        match &a.ratio_out {
            Some(out) => write(out, &csv)?,
            None => print!("{csv}"),
        }
    }
    Ok(())
}

fn run_ablation(a: Ablate) -> Outcome {
    let mut cfg = load_config(a.config.as_deref(), &[])?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let video = read_video(&a.video)?;
    let rows = ablate(&video, &cfg)?;
    let csv = ablation_csv(&rows);
    write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn run_gradcheck() -> Outcome {
    if std::mem::size_of::<Real>() != 8 {
        return Err(Failure::Usage("gradient checks need the default 64-bit build".into()));
    }
    let report = gradcheck::run_suite()?;
    println!("check,inputs,max_rel_err,tolerance,status");
    for r in &report {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!("{},{},{:.3e},{:.0e},{status}", r.name, r.checked, r.max_rel_err, r.tolerance);
    }
    let failed = report.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} of {} gradient checks failed", report.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Metrics(a) => metrics(a),
        Command::Ablate(a) => run_ablation(a),
        Command::Gradcheck => run_gradcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (msg, code) = match failure {
                Failure::Usage(m) => (m, 2),
                Failure::Check(m) => (m, 1),
                Failure::Lib(e) => {
                    let code = if e.is_numerical() {
                        3
                    } else if matches!(e, Error::Config(_)) {
                        2
                    } else {
                        1
                    };
                    (e.to_string(), code)
                }
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
