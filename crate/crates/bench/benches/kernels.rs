use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use malab_core::activations::MaProfile;
use malab_core::diffusion::Denoiser;
use malab_core::diffusion::{draw_examples, GmmSpec, NoiseSchedule, TrainConfig, Trainer};
use malab_core::dit::{DitConfig, DitWeights};
use malab_core::guidance::{build_guided_denoiser, GuidanceMode, GuidanceSpec};
use malab_core::intervention::InterventionSpec;
use malab_core::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // One training batch worth of token rows through a hidden-width projection.
    let a = Tensor::randn(&[512, 64], &mut rng);
    let b = Tensor::randn(&[64, 256], &mut rng);
    c.bench_function("matmul 512x64x256", |bench| {
        bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [32, 16, 64];
    let (q, k, v) = (
        Tensor::randn(&shape, &mut rng),
        Tensor::randn(&shape, &mut rng),
        Tensor::randn(&shape, &mut rng),
    );
    c.bench_function("attention fwd+bwd 32x16x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (q, k, v) = (g.param(q.clone()), g.param(k.clone()), g.param(v.clone()));
            let o = g.attention(q, k, v, 4).unwrap();
            let s = g.sum(o).unwrap();
            black_box(g.grad_of(s, &[q, k, v]).unwrap());
        })
    });
}

fn training_step(c: &mut Criterion) {
    malab_core::numerics::retain_freed_memory();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = DitConfig::default();
    let w = DitWeights::init(cfg.clone(), &mut rng).unwrap();
    let gmm = GmmSpec::default_ring();
    let tc = TrainConfig {
        batch: 32,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(w, NoiseSchedule::default(), &tc);
    let examples = draw_examples(&gmm, &cfg, tc.batch, &mut rng).unwrap();
    c.bench_function("training step batch 32", |bench| {
        bench.iter(|| black_box(trainer.training_step(&examples, &mut rng).unwrap()))
    });
}

fn sampler_step(c: &mut Criterion) {
    malab_core::numerics::retain_freed_memory();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = DitConfig::default();
    let w = DitWeights::init(cfg.clone(), &mut rng).unwrap();
    let profile = MaProfile::uniform(cfg.num_blocks, [0].into());
    let z = Tensor::randn(&[64, cfg.tokens(), cfg.data_dim], &mut rng);
    let mut group = c.benchmark_group("guided denoiser, 64 samples");
    for mode in GuidanceMode::ALL {
        let spec = GuidanceSpec::new(
            mode,
            3.0,
            1.0,
            mode.uses_dg().then(|| InterventionSpec::ma_detected(3)),
        );
        let g = build_guided_denoiser(&w, &spec, &profile).unwrap();
        group.bench_function(mode.to_string(), |bench| {
            bench.iter(|| black_box(g.predict_noise(&z, 1.5, 0).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, attention, training_step, sampler_step);
criterion_main!(benches);
