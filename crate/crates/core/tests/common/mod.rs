#![allow(dead_code)]

pub mod fusion_block;
pub mod gradients;

use maskadapt::config::RunConfig;
use maskadapt::masking::MaskMode;
use maskadapt::synthdata::{generate, DomainSpec, SceneSample};
use maskadapt::uda::{DomainBatch, InputPair, StepSettings};

/// 16×16 scenes, C=4, a handful of frames: fast enough for per-step tests.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    let spec = |name: &str, hue: f64| DomainSpec {
        name: name.into(),
        height: 16,
        width: 16,
        row_spacing_px: 8.0,
        plant_radius_px: 2.0,
        hue_shift_deg: hue,
        ..DomainSpec::default()
    };
    cfg.data.source = Some(spec("source", 0.0));
    cfg.data.target = Some(spec("target", 30.0));
    cfg.data.source_train = 4;
    cfg.data.target_train = 4;
    cfg.data.target_val = 2;
    cfg.model.channels = 4;
    cfg.model.attention_dim = 4;
    cfg.masking.block_size = 4;
    cfg.train.iterations = 12;
    cfg.train.warmup_iters = 3;
    cfg.train.pretrain_iterations = 4;
    cfg.train.eval_every = 4;
    cfg.train.checkpoint_every = 4;
    cfg.train.confidence_every = 5;
    cfg.train.unmasked_every = 3;
    cfg
}

pub fn scenes(n: usize, seed: u64) -> Vec<SceneSample> {
    let cfg = tiny_config();
    generate(cfg.data.source.as_ref().unwrap(), n, seed).unwrap()
}

pub fn inputs(s: &[SceneSample]) -> Vec<InputPair<f64>> {
    s.iter().map(|x| InputPair::from_sample(x, false).unwrap()).collect()
}

pub fn batch(source: &[SceneSample], target: &[SceneSample]) -> DomainBatch<f64> {
    DomainBatch {
        source: inputs(source),
        source_labels: source.iter().map(|s| s.labels.clone()).collect(),
        target: inputs(target),
    }
}

/// Single-stage supervised settings without augmentation or masking.
pub fn plain_settings(cfg: &RunConfig) -> StepSettings {
    let mut s = cfg.adapt_settings();
    s.adaptation = false;
    s.mask_mode = MaskMode::None;
    s.brightness = (1.0, 1.0);
    s.noise_std = 0.0;
    s.rates.rgb = s.rates.head;
    s.rates.depth = s.rates.head;
    s
}
