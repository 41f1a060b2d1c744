use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pertdiff::config::TrainConfig;
use pertdiff::data::{gen_video, SceneSpec};
use pertdiff::metrics::{fci, optical_flow};
use pertdiff::nn::ParamStore;
use pertdiff::tensor::causal_pattern;
use pertdiff::trainer::Trainer;
use pertdiff::vgt::{mmsa, Vgt, VgtConfig};
use pertdiff::{rng_from_seed, Graph, Tensor};

fn conv3d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d");
    for channels in [4, 16] {
        let mut rng = rng_from_seed(1);
        let x = Tensor::randn(&[1, channels, 8, 16, 16], 1.0, &mut rng);
        let w = Tensor::randn(&[channels, channels, 3, 3, 3], 0.1, &mut rng);
        group.bench_with_input(BenchmarkId::new("forward_backward", channels), &channels, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.param(x.clone()).unwrap();
                let wv = g.param(w.clone()).unwrap();
                let y = g.conv3d(xv, wv, None, [1, 1, 1], [1, 1, 1]).unwrap();
                let s = g.sum(y).unwrap();
                g.backward(s).unwrap();
                black_box(g.grad(wv).map(|t| t.numel()));
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let cfg = VgtConfig::default();
    let vgt = Vgt::new(cfg.clone()).unwrap();
    let mut store = ParamStore::new();
    vgt.init(&mut store, &mut rng_from_seed(2)).unwrap();
    let tokens = vgt.grid().tokens() + 1;
    let x = Tensor::randn(&[8, tokens, cfg.width], 1.0, &mut rng_from_seed(3));
    let mask = causal_pattern(tokens);
    c.bench_function("mmsa_masked_forward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false).unwrap();
            let xv = g.constant(x.clone()).unwrap();
            black_box(mmsa(&mut g, &p, "vgt.spatial.0", xv, Some(&mask), cfg.heads).unwrap());
        })
    });
}

fn train_step(c: &mut Criterion) {
    let video = gen_video(&SceneSpec::default()).unwrap();
    let mut trainer = Trainer::new(TrainConfig::default()).unwrap();
    let z0 = trainer.encode(&video).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(20);
    group.bench_function("desk_step", |b| b.iter(|| black_box(trainer.train_step(&z0).unwrap())));
    group.finish();
}

fn flow(c: &mut Criterion) {
    let video = gen_video(&SceneSpec { velocity: (2, 1), ..SceneSpec::default() }).unwrap();
    let (a, b2) = (video.gray_frame(0, 0), video.gray_frame(0, 1));
    c.bench_function("horn_schunck_32x32", |b| b.iter(|| black_box(optical_flow(&a, &b2, 32, 32).unwrap())));
    c.bench_function("fci_8x32x32", |b| b.iter(|| black_box(fci(&video).unwrap())));
}

criterion_group!(benches, conv3d, attention, train_step, flow);
criterion_main!(benches);
