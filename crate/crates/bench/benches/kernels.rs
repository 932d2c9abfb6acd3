use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use vlora_core::autograd::{Binding, Graph};
use vlora_core::geometry::synthesize_view;
use vlora_core::losses::{ms_ssim, MsSsimConfig};
use vlora_core::model::normalize_input;
use vlora_core::synth::render_scene;
use vlora_core::trainer::Trainer;
use vlora_core::{ExperimentConfig, Image, Model, ModelConfig, SceneConfig};

fn textured(w: usize, h: usize, c: usize, phase: f64) -> Image {
    let data = (0..w * h * c).map(|i| 0.5 + 0.4 * ((i as f64) * 0.37 + phase).sin()).collect();
    Image::new(w, h, c, data).unwrap()
}

fn losses(c: &mut Criterion) {
    let (x, y) = (textured(176, 176, 1, 0.0), textured(176, 176, 1, 0.3));
    let cfg = MsSsimConfig::default();
    c.bench_function("ms_ssim_176", |b| b.iter(|| ms_ssim(black_box(&x), black_box(&y), &cfg).unwrap()));
}

fn geometry(c: &mut Criterion) {
    let scene = render_scene(&SceneConfig { n_frames: 2, ..SceneConfig::terrain(64, 64, 2, 0) }).unwrap();
    let rel = scene.relative_pose(1, 0);
    c.bench_function("synthesize_view_64", |b| {
        b.iter(|| synthesize_view(black_box(&scene.frames[0]), &scene.depths[1], &scene.intrinsics, &rel).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let m = Model::new(&ModelConfig::default(), ExperimentConfig::default().lora.as_ref(), 0).unwrap();
    let img = textured(64, 64, 3, 0.0);
    c.bench_function("encoder_forward_64", |b| {
        b.iter(|| {
            let g = Graph::new();
            let bind = Binding::new(&g, &m.store);
            m.encoder.forward(&bind, normalize_input(g.constant(img.to_tensor()))).unwrap().len()
        })
    });
    c.bench_function("depth_predict_64", |b| b.iter(|| m.predict(black_box(&img)).unwrap()));
}

fn training(c: &mut Criterion) {
    let cfg = ExperimentConfig {
        scene: SceneConfig { brightness_jitter: 0.0, ..SceneConfig::terrain(64, 64, 12, 0) },
        ..ExperimentConfig::default()
    };
    let scene = render_scene(&cfg.scene).unwrap();
    let trainer = Trainer::new(&cfg, scene).unwrap();
    let batch = trainer.epoch_batches(0)[0].clone();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train_step_batch4_64", |b| {
        b.iter_batched(|| trainer.clone(), |mut t| t.train_step(&batch, 1e-4).unwrap(), BatchSize::LargeInput)
    });
    group.finish();
}

criterion_group!(benches, losses, geometry, model, training);
criterion_main!(benches);
