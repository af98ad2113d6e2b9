#![allow(dead_code)]

use cnsnet_core::config::Config;

/// A model and dataset small enough to train in well under a second per step.
pub fn tiny_config() -> Config {
    Config {
        base_width: 8,
        max_width: 16,
        scales: 3,
        predictor_width: 4,
        predictor_depth: 2,
        token_grid: 4,
        saat_heads: 2,
        saat_layers: 1,
        synth_size: 24,
        patch_size: 16,
        batch_size: 2,
        train_count: 5,
        val_count: 2,
        steps: 3,
        log_every: 0,
        ..Config::default()
    }
}
