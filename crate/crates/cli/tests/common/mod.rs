// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use moe_route::config::ExperimentConfig;
use moe_route::model::ModelConfig;
use moe_route::routing::RouterConfig;

/// A model small enough that a 50-step run takes well under a second.
pub fn tiny(steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model = ModelConfig {
        width: 8,
        depth: 2,
        heads: 2,
        mlp_hidden: 16,
        moe_layers: vec![1, 2],
        router: RouterConfig::joint(4, 1),
        output_dim: 8,
        vocab_size: 8,
        image_token_dim: 4,
        seq_len_image: 4,
        seq_len_text: 2,
        ..Default::default()
    };
    cfg.aux.tau_image = 4f64.ln() - 0.2;
    cfg.aux.tau_text = 2f64.ln();
    cfg.data.num_classes = 16;
    cfg.train.steps = steps;
    cfg.train.batch_size = 8;
    cfg.train.analytics_every = 10;
    cfg.train.eval_batches = 2;
    cfg.train.eval_batch_size = 16;
    cfg.train.optimizer.lr = 5e-3;
    cfg
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let p = dir.join("cfg.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moe-route"))
}

pub fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}
