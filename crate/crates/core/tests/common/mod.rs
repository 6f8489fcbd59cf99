#![allow(dead_code)]

use adclr::datasets::{generate, SyntheticSpec};
use adclr::encoder::EncoderConfig;
use adclr::objective::HeadConfig;
use adclr::patchify::{Image, ViewConfig};
use adclr::trainer::TrainConfig;

/// A model and view setup small enough for many optimisation steps in a test.
pub fn tiny_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.encoder = EncoderConfig {
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_hidden: 16,
        channels: 3,
        patch: 4,
        base_res: 16,
        init_std: 0.02,
    };
    cfg.head = HeadConfig {
        hidden: 16,
        bottleneck: 8,
        prototypes: 16,
        init_std: 0.02,
    };
    cfg.views = ViewConfig {
        global_res: 16,
        local_count: 1,
        local_res: 8,
        query_count: 3,
        patch: 4,
        ..ViewConfig::default()
    };
    cfg.optim.batch_size = 4;
    cfg.optim.epochs = 3;
    cfg.optim.base_lr = 0.05;
    cfg
}

pub fn tiny_images(n: usize) -> Vec<Image> {
    let spec = SyntheticSpec {
        size: 32,
        ..SyntheticSpec::default()
    };
    generate(&spec, n).unwrap().images()
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
