use vlora_core::model::{DecoderConfig, EncoderConfig, PoseNetConfig};
use vlora_core::synth::render_scene;
use vlora_core::trainer::Trainer;
use vlora_core::{ExperimentConfig, LoraInjectionSpec, ModelConfig, RankVector, SceneConfig, TrainConfig};

fn small(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        scene: SceneConfig { brightness_jitter: 0.0, ..SceneConfig::terrain(32, 32, 12, 1) },
        model: ModelConfig {
            encoder: EncoderConfig { blocks: 4, embed_dim: 16, heads: 2, patch_size: 4, mlp_ratio: 2.0 },
            decoder: DecoderConfig { channels: [8, 8, 8, 8] },
            pose: PoseNetConfig { channels: [8, 8, 8, 8] },
            ..ModelConfig::default()
        },
        lora: Some(LoraInjectionSpec::new(RankVector(vec![4, 4, 2, 2]))),
        train: TrainConfig { seed, ..TrainConfig::default() },
        ..ExperimentConfig::default()
    }
}

#[test]
fn one_step_lowers_the_batch_loss_for_most_seeds() {
    let scene = render_scene(&small(0).scene).unwrap();
    let mut decreased = 0;
    for seed in 0..100 {
        let cfg = small(seed);
        let mut t = Trainer::new(&cfg, scene.clone()).unwrap();
        let batch = t.epoch_batches(0)[0].clone();
        let before = t.batch_loss(&batch).unwrap().total;
        t.train_step(&batch, cfg.train.lr).unwrap();
        let after = t.batch_loss(&batch).unwrap().total;
        decreased += (after < before) as usize;
    }
    assert!(decreased >= 95, "loss decreased for {decreased}/100 seeds");
}

#[test]
fn lora_off_trains_only_decoder_and_pose() {
    let mut cfg = small(3);
    cfg.lora = None;
    let scene = render_scene(&cfg.scene).unwrap();
    let mut t = Trainer::new(&cfg, scene).unwrap();
    let encoder_ids = t.model.encoder.param_ids();
    assert!(encoder_ids.iter().all(|&id| !t.model.store.get(id).trainable));
    let before: Vec<_> = encoder_ids.iter().map(|&id| t.model.store.value(id).clone()).collect();
    let batch = t.epoch_batches(0)[0].clone();
    t.train_step(&batch, 1e-3).unwrap();
    assert!(encoder_ids.iter().zip(&before).all(|(&id, v)| t.model.store.value(id) == v));
}
