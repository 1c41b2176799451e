use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use balvae::data::make_synthetic;
use balvae::diagnostics::encode_all;
use balvae::loss::BalancingState;
use balvae::models::{ModelConfig, Vae, Variant};
use balvae::train::{train_first_stage, RunOptions, TrainSchedule};
use balvae::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn resnet() -> ModelConfig {
    ModelConfig {
        input_shape: (28, 28, 1),
        latent_dim: 32,
        scale_blocks: 2,
        base_channels: 8,
        blocks_per_scale: 1,
        dense_width: 128,
        variant: Variant::ResNet,
    }
}

fn batch(rows: usize, cols: usize) -> Array2<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    Array2::from_shape_fn((rows, cols), |_| r.random_range(0.0..1.0))
}

fn conv_passes(c: &mut Criterion) {
    let mut vae = Vae::new(resnet(), 0).unwrap();
    let x = batch(64, 28 * 28);
    let mut group = c.benchmark_group("resnet_encoder_batch64");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            b.iter(|| {
                let (post, cache) = vae.encoder.forward(x.view(), exec).unwrap();
                let ones = Array2::<f64>::ones(post.mu.dim());
                vae.encoder.backward(cache, ones.view(), ones.view(), exec);
            })
        });
    }
    group.finish();

    let z = Array2::<f64>::zeros((64, 32));
    let mut group = c.benchmark_group("resnet_decoder_batch64");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new("forward", name), |b| b.iter(|| vae.decoder.forward(z.view(), exec).unwrap()));
    }
    group.finish();
}

fn training_epoch(c: &mut Criterion) {
    let data = make_synthetic("low-rank-images", 400, 0).unwrap();
    let config = ModelConfig {
        input_shape: (16, 16, 1),
        latent_dim: 8,
        scale_blocks: 2,
        base_channels: 4,
        dense_width: 64,
        variant: Variant::ResNet,
        ..ModelConfig::default()
    };
    let schedule = TrainSchedule {
        epochs: 1,
        batch_size: 50,
        checkpoint_every: 0,
        diagnostics_every: 0,
        ..TrainSchedule::default()
    };
    let mut group = c.benchmark_group("train_epoch_400");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                train_first_stage(config.clone(), schedule.clone(), BalancingState::computed(), &data, &RunOptions::in_memory(exec)).unwrap()
            })
        });
    }
    group.finish();
}

fn encoding_pass(c: &mut Criterion) {
    let vae = Vae::new(resnet(), 1).unwrap();
    let x = batch(1000, 28 * 28);
    let mut group = c.benchmark_group("encode_all_1000");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| encode_all(&vae.encoder, x.view(), 100, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, conv_passes, training_epoch, encoding_pass);
criterion_main!(benches);
