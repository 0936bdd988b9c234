//! Sequential against data-parallel execution of one training batch and of
//! a batch of evaluation forwards.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tcpa::backbone::{BackboneParams, ModelConfig};
use tcpa::data::{gen_synthetic, SyntheticSpec};
use tcpa::model::{Model, Phi, PromptMode};
use tcpa::numerics::kernels::matmul;
use tcpa::objective::{batch_gradient, LossWeights};
use tcpa::par::{map_indexed, Execution};
use tcpa::rng::Rng;
use tcpa::tcpa::TcpaConfig;

const BATCH: usize = 32;

fn batch(c: &mut Criterion) {
    let config = ModelConfig::default();
    let data = gen_synthetic(&SyntheticSpec::default()).unwrap();
    let indices: Vec<usize> = (0..BATCH).map(|i| i * data.len() / BATCH).collect();
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for mode in [PromptMode::Tcpa, PromptMode::None] {
        let model = Model::new(
            config.clone(),
            TcpaConfig::default(),
            mode,
            BackboneParams::init(&config, 0),
        )
        .unwrap();
        let phi = Phi::init(&model, data.num_classes, 0);
        for exec in [Execution::Sequential, Execution::Parallel] {
            group.bench_with_input(
                BenchmarkId::new(mode.as_str(), exec.as_str()),
                &exec,
                |b, &exec| {
                    b.iter(|| {
                        batch_gradient(
                            &model,
                            &phi,
                            &data,
                            &indices,
                            LossWeights::default(),
                            exec,
                            None,
                        )
                        .unwrap()
                    })
                },
            );
        }
    }
    group.finish();

    let model = Model::new(
        config.clone(),
        TcpaConfig::default(),
        PromptMode::Tcpa,
        BackboneParams::init(&config, 0),
    )
    .unwrap();
    let phi = Phi::init(&model, data.num_classes, 0);
    let mut group = c.benchmark_group("features");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(exec.as_str(), |b| {
            b.iter(|| {
                map_indexed(BATCH, exec, |i| {
                    model.features(&phi, &data.image(indices[i])).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn kernel(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let (m, k, n) = (95, 64, 256);
    let a: Vec<f64> = (0..m * k).map(|_| rng.standard_normal()).collect();
    let b: Vec<f64> = (0..k * n).map(|_| rng.standard_normal()).collect();
    c.bench_function("matmul_95x64x256", |bench| {
        bench.iter(|| matmul(black_box(&a), black_box(&b), m, k, n))
    });
}

criterion_group!(benches, batch, kernel);
criterion_main!(benches);
