use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use csunfold::autograd::Tape;
use csunfold::imaging::{synthetic_images, Image};
use csunfold::linalg::XSolver;
use csunfold::metrics::ssim;
use csunfold::nn::conv3x3;
use csunfold::sampling::{init_whitened, sample_patches};
use csunfold::training::TrainConfig;
use csunfold::unfolding::{x_update, Pipeline};
use csunfold::wavelet::haar_dwt;
use csunfold_bench::{pixels, uniform, uniform2};

fn conv(c: &mut Criterion) {
    let x = uniform(&[4, 32, 33, 33], 1);
    let w = uniform(&[32, 32, 3, 3], 2);
    let b = uniform(&[32], 3);
    c.bench_function("conv3x3 forward 4x32x33x33", |bench| {
        bench.iter(|| {
            let tape = Tape::no_grad();
            let out = conv3x3(&tape.constant(x.clone()), &tape.constant(w.clone()), &tape.constant(b.clone()));
            black_box(out.value().len())
        })
    });
    c.bench_function("conv3x3 forward+backward 4x32x33x33", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let (xv, wv, bv) = (tape.param(x.clone()), tape.param(w.clone()), tape.param(b.clone()));
            let loss = conv3x3(&xv, &wv, &bv).square().sum();
            black_box(tape.backward(&loss).wrt(&wv))
        })
    });
}

fn x_step(c: &mut Criterion) {
    let op = init_whitened(272, 1089, 4).unwrap();
    c.bench_function("x-update factorization n=1089 m=272", |bench| {
        bench.iter(|| XSolver::new(op.matrix.view(), 0.1).unwrap())
    });
    let solver = XSolver::new(op.matrix.view(), 0.1).unwrap();
    let y = uniform2(9, 272, 5);
    let z = uniform2(9, 1089, 6);
    let lambda = uniform2(1, 1089, 7).row(0).to_owned();
    c.bench_function("x-update solve 9 patches n=1089 m=272", |bench| {
        bench.iter(|| x_update(&solver, y.view(), z.view(), lambda.view()).unwrap())
    });
}

fn mss(c: &mut Criterion) {
    let op = init_whitened(272, 1089, 8).unwrap();
    let patches = pixels(64, 1089, 9);
    c.bench_function("MSS sampling 64 patches n=1089 m=272", |bench| {
        bench.iter(|| sample_patches(&op, patches.view(), true).unwrap())
    });
}

fn haar(c: &mut Criterion) {
    let img = pixels(256, 256, 10);
    c.bench_function("Haar DWT 256x256", |bench| bench.iter(|| haar_dwt(img.view()).unwrap()));
}

fn quality(c: &mut Criterion) {
    let a = Image::new("a", pixels(256, 256, 11));
    let b = Image::new("b", pixels(256, 256, 12));
    c.bench_function("SSIM 256x256", |bench| bench.iter(|| ssim(&a, &b).unwrap()));
}

fn reconstruct(c: &mut Criterion) {
    let cfg = TrainConfig {
        modules: 3,
        channels: 16,
        ..TrainConfig::default()
    };
    let p = Pipeline::new(cfg.model_config(), 13).unwrap();
    let img = synthetic_images(1, 99, 99, 14).remove(0);
    p.solvers().unwrap();
    c.bench_function("reconstruct 99x99 K=3 C=16", |bench| bench.iter(|| p.reconstruct(&img).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, x_step, mss, haar, quality, reconstruct
}
criterion_main!(benches);
