use std::path::Path;
use std::process::{Command, Output};

fn pertdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pertdiff")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pertdiff(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "frames = 2\nheight = 8\nwidth = 8\nvgt_width = 8\nvgt_heads = 2\nvgt_patch = 2\n\
vgt_spatial_layers = 1\nvgt_temporal_layers = 1\nunet_base = 4\nunet_mid = 4\ndiffusion_steps = 5\nsteps = 2\n";

fn small_setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("small.cfg");
    std::fs::write(&cfg, format!("# tiny run\n{SMALL}")).unwrap();
    let video = dir.join("v.vten");
    ok(&["gen-data", "--frames", "2", "--height", "8", "--width", "8", "--size", "3", "--out", p(&video)]);
    (p(&cfg).to_string(), p(&video).to_string())
}

#[test]
fn static_video_metrics_print_zero_fci() {
    let dir = tempfile::tempdir().unwrap();
    let v = dir.path().join("static.vten");
    let frames = dir.path().join("frames");
    ok(&["gen-data", "--kind", "static", "--out", p(&v), "--frames-dir", p(&frames)]);
    assert_eq!(std::fs::read_dir(&frames).unwrap().count(), 8);
    let out = ok(&["metrics", "--video", p(&v), "--reference", p(&v)]);
    let fci: f64 = out.lines().find_map(|l| l.strip_prefix("fci,")).unwrap().parse().unwrap();
    assert!(fci.abs() < 1e-6);
    assert!(out.contains("psnr,100"));
}

#[test]
fn train_zero_steps_writes_an_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, video) = small_setup(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--video", &video, "--out-dir", p(&run), "--steps", "0"]);
    let ck = pertdiff::trainer::Checkpoint::load(&run.join("checkpoint.apla")).unwrap();
    assert_eq!(ck.step, 0);
    let echoed = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert_eq!(pertdiff::config::TrainConfig::parse(&echoed).unwrap(), ck.config);
    assert_eq!(std::fs::read_to_string(run.join("train_log.csv")).unwrap(), "step,mse,l1,per,lg,total,norm_ratio\n");
}

#[test]
fn train_sample_and_ratio_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, video) = small_setup(dir.path());
    let run = dir.path().join("run");
    let first = ok(&["train", "--config", &cfg, "--video", &video, "--out-dir", p(&run), "--set", "seed=3"]);
    let again = dir.path().join("again");
    let second = ok(&["train", "--config", &cfg, "--video", &video, "--out-dir", p(&again), "--set", "seed=3"]);
    let digest = |s: &str| s.split_whitespace().last().unwrap().to_string();
    assert_eq!(digest(&first), digest(&second));

    let ck = run.join("checkpoint.apla");
    ok(&["train", "--resume", p(&ck), "--video", &video, "--out-dir", p(&run), "--steps", "1"]);
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let out = dir.path().join("out.vten");
    let frames = dir.path().join("frames");
    ok(&["sample", "--checkpoint", p(&ck), "--reference", &video, "--out", p(&out), "--frames-dir", p(&frames)]);
    assert_eq!(std::fs::read_dir(&frames).unwrap().count(), 2);
    let gen = dir.path().join("gen.vten");
    ok(&["sample", "--checkpoint", p(&ck), "--seed", "4", "--guidance", "2", "--out", p(&gen)]);

    let ratio = ok(&["metrics", "--log", p(&run.join("train_log.csv"))]);
    assert_eq!(ratio.lines().count(), 4);
    assert!(ratio.lines().nth(1).unwrap().starts_with("0,0"));
}

#[test]
fn ablate_writes_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, video) = small_setup(dir.path());
    let table = dir.path().join("ablation.csv");
    ok(&["ablate", "--config", &cfg, "--video", &video, "--out", p(&table), "--steps", "1"]);
    let csv = std::fs::read_to_string(&table).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "no_discriminator", "no_vgt", "no_hyper_loss", "no_vgt_discriminator"]);
}

#[test]
fn gradcheck_exits_zero() {
    let out = ok(&["gradcheck"]);
    assert!(out.lines().skip(1).all(|l| l.ends_with(",pass")));
}

#[test]
fn usage_and_config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let (_, video) = small_setup(dir.path());
    assert_eq!(pertdiff(&["train", "--bogus"]).status.code(), Some(2));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    let out = pertdiff(&["train", "--config", p(&bad), "--video", &video, "--out-dir", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    let malformed = dir.path().join("malformed.cfg");
    std::fs::write(&malformed, "steps 3\n").unwrap();
    let out = pertdiff(&["train", "--config", p(&malformed), "--video", &video, "--out-dir", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, video) = small_setup(dir.path());
    let out = pertdiff(&["train", "--config", &cfg, "--video", &video, "--out-dir", p(&dir.path().join("r")), "--set", "lr=1e300", "--steps", "5"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
