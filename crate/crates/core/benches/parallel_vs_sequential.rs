//! Parallel vs sequential backend comparison on the data-parallel hot
//! paths: network forward, one training batch, phantom generation, and
//! tiled inference. With the `parallel` feature enabled (default) both
//! backends are measured via the runtime switch; without it, only the
//! sequential path exists.

use criterion::{criterion_group, criterion_main, Criterion};

use hetseg_core::exec;
use hetseg_core::labels::LabelAvailability;
use hetseg_core::manifest::{DatasetFormat, DatasetManifest, RecordEntry, Split};
use hetseg_core::model::{build_network, forward, sliding_inference, ModelConfig};
use hetseg_core::phantom::{generate_subject, PhantomConfig};
use hetseg_core::trainer::augment::AugmentConfig;
use hetseg_core::trainer::{draw_sample, train_one_batch, SubjectRef, TrainConfig, TrainSample};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn phantom_cfg() -> PhantomConfig {
    PhantomConfig {
        shape: [48, 48, 48],
        noise_sigma: 0.01,
        lesion_radius_mm: 2.0..=3.5,
        ..Default::default()
    }
}

fn model_cfg() -> ModelConfig {
    ModelConfig {
        depth: 3,
        base_width: 8,
        patch_size: [32, 32, 32],
    }
}

struct Fixture {
    manifest: DatasetManifest,
    sample: TrainSample,
    net: hetseg_core::model::Network,
    train_cfg: TrainConfig,
}

fn fixture() -> Fixture {
    let ph = phantom_cfg();
    let record = generate_subject(&ph, 0).expect("phantom");
    let manifest = DatasetManifest {
        name: "bench".into(),
        format: DatasetFormat::Longitudinal,
        availability: LabelAvailability::all(),
        records: vec![RecordEntry {
            record,
            split: Split::Train,
        }],
    };
    let train_cfg = TrainConfig {
        batch_size: 1,
        folds: 1,
        augment: AugmentConfig::disabled(),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let subjects = [SubjectRef {
        dataset: 0,
        record: 0,
    }];
    let sample = draw_sample(
        std::slice::from_ref(&manifest),
        &subjects,
        &mut rng,
        [32, 32, 32],
        &train_cfg,
    )
    .expect("sample");
    let net = build_network(&model_cfg(), 0).expect("network");
    Fixture {
        manifest,
        sample,
        net,
        train_cfg,
    }
}

fn modes() -> Vec<(&'static str, bool)> {
    if cfg!(feature = "parallel") {
        vec![("parallel", false), ("sequential", true)]
    } else {
        vec![("sequential", true)]
    }
}

fn bench_forward(c: &mut Criterion) {
    let fx = fixture();
    let mut group = c.benchmark_group("network_forward_32c");
    group.sample_size(10);
    for (name, force_seq) in modes() {
        group.bench_function(name, |b| {
            exec::set_sequential(force_seq);
            b.iter(|| forward(&fx.net, &fx.sample.bundle).unwrap());
            exec::set_sequential(false);
        });
    }
    group.finish();
}

fn bench_train_batch(c: &mut Criterion) {
    let fx = fixture();
    let samples = vec![fx.sample.clone(), fx.sample.clone()];
    let mut group = c.benchmark_group("train_batch_of_2");
    group.sample_size(10);
    for (name, force_seq) in modes() {
        group.bench_function(name, |b| {
            exec::set_sequential(force_seq);
            b.iter(|| train_one_batch(&fx.net, &samples, &fx.train_cfg, 0).unwrap());
            exec::set_sequential(false);
        });
    }
    group.finish();
}

fn bench_phantom(c: &mut Criterion) {
    let ph = phantom_cfg();
    let mut group = c.benchmark_group("phantom_subject_48c");
    group.sample_size(10);
    for (name, force_seq) in modes() {
        group.bench_function(name, |b| {
            exec::set_sequential(force_seq);
            let mut seed = 0u64;
            b.iter(|| {
                seed += 1;
                generate_subject(&ph, seed).unwrap()
            });
            exec::set_sequential(false);
        });
    }
    group.finish();
}

fn bench_tiled_inference(c: &mut Criterion) {
    let fx = fixture();
    let record = &fx.manifest.records[0].record;
    let bundle = hetseg_core::assembly::pack_inputs(record, (0, 1), fx.manifest.availability)
        .expect("bundle");
    let mut group = c.benchmark_group("tiled_inference_48c");
    group.sample_size(10);
    for (name, force_seq) in modes() {
        group.bench_function(name, |b| {
            exec::set_sequential(force_seq);
            b.iter(|| sliding_inference(&fx.net, &bundle, 0.25).unwrap());
            exec::set_sequential(false);
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_forward,
    bench_train_batch,
    bench_phantom,
    bench_tiled_inference
);
criterion_main!(benches);
