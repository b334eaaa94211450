use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};
use std::hint::black_box;

use fvib_bench::{blobs, quick_config, trained};
use fvib_core::calibration::optimize_beta;
use fvib_core::fvib::{fvib_loss, train, BalancePolicy};
use fvib_core::objectives::{expected_taylor, Classifier, GaussianEncoding};
use fvib_core::sweep::{default_beta_grid, run_sweep, SweepSetup};
use fvib_core::{instantiate, ConfidenceTuning, DenseNet, TargetMatrix};

fn target_matrix(c: &mut Criterion) {
    let mut g = c.benchmark_group("target_matrix");
    for d in [10usize, 100, 1000] {
        g.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, &d| {
            b.iter(|| TargetMatrix::new(black_box(d)).unwrap())
        });
    }
    g.finish();
}

fn expectation(c: &mut Criterion) {
    let mut g = c.benchmark_group("expected_taylor");
    for (d, kappa) in [(10usize, 9usize), (100, 99)] {
        let w = DMatrix::from_fn(d, kappa, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
        let classifier = Classifier::new(w).unwrap();
        let enc = GaussianEncoding::isotropic(DVector::from_element(kappa, 0.1), 0.3).unwrap();
        g.bench_function(BenchmarkId::from_parameter(format!("d{d}_k{kappa}")), |b| {
            b.iter(|| expected_taylor(&classifier, black_box(&enc), 1).unwrap())
        });
    }
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let splits = blobs(200).unwrap();
    let targets = TargetMatrix::new(3).unwrap();
    let net = DenseNet::new(&[4, 128, 128, 2], 0).unwrap();
    let x = splits.train.features().rows(0, 100).into_owned();
    let labels = &splits.train.labels()[..100];
    c.bench_function("fvib_loss_batch100_hidden128x2", |b| {
        b.iter(|| fvib_loss(&net, black_box(&x), labels, &targets).unwrap())
    });
    c.bench_function("train_10_epochs_360_examples", |b| {
        b.iter(|| train(&splits.train, &[32, 32], &quick_config(10), BalancePolicy::Strict).unwrap())
    });
}

fn post_training(c: &mut Criterion) {
    let splits = blobs(200).unwrap();
    let model = trained(&splits).unwrap();
    let ct = ConfidenceTuning::default();
    c.bench_function("predict_test_set_s30", |b| {
        let m = instantiate(&model.net, &model.targets, 0.1, ct, 30).unwrap();
        b.iter(|| m.predict_batch(splits.test.features(), 0).unwrap())
    });
    let mut g = c.benchmark_group("sweep_default_grid");
    g.sample_size(10);
    for parallel in [false, true] {
        g.bench_with_input(BenchmarkId::from_parameter(if parallel { "parallel" } else { "serial" }), &parallel, |b, &p| {
            let setup = SweepSetup {
                net: &model.net,
                targets: &model.targets,
                ct,
                train: &splits.train,
                test: &splits.test,
                samples: 30,
                seed: 0,
                bins: 15,
                model_id: "bench".into(),
            };
            b.iter(|| run_sweep(&setup, &default_beta_grid(), p).unwrap())
        });
    }
    g.finish();
    let mut g = c.benchmark_group("optimize_beta");
    g.sample_size(10);
    g.bench_function("val120_s30", |b| {
        b.iter(|| optimize_beta(&model.net, &model.targets, ct, &splits.val, 30, 0, 15).unwrap())
    });
    g.finish();
}

criterion_group!(benches, target_matrix, expectation, training_step, post_training);
criterion_main!(benches);
