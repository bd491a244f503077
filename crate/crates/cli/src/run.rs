// SPDX-License-Identifier: Apache-2.0

//! `train`: one run directory per seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use moe_route::config::ExperimentConfig;
use moe_route::routing::Modality;
use moe_route::training::eval::{evaluate, EvalOptions, EvalReport};
use moe_route::training::{DirSink, StepRecord, Trainer};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";

/// Final numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub final_contrastive: f64,
    /// Mean success over the final 20% of steps and all MoE layers.
    pub tail_success: BTreeMap<Modality, f64>,
    pub eval: EvalReport,
}

/// Mean per-modality success over the last `frac` of `steps`.
pub fn tail_success(steps: &[StepRecord], frac: f64) -> BTreeMap<Modality, f64> {
    let start = steps.len() - ((steps.len() as f64 * frac).ceil() as usize).min(steps.len());
    let mut acc: BTreeMap<Modality, (f64, usize)> = BTreeMap::new();
    for r in &steps[start..] {
        for l in &r.layers {
            for m in Modality::ALL {
                if let Some(s) = l.get(m) {
                    let e = acc.entry(m).or_default();
                    e.0 += s.success;
                    e.1 += 1;
                }
            }
        }
    }
    acc.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect()
}

pub fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub fn held_out_eval(trainer: &Trainer, params: &moe_route::tensor::ParamStore, opts: &EvalOptions, seed: u64) -> Result<EvalReport> {
    let t = &trainer.cfg.train;
    let batches: Vec<_> = (0..t.eval_batches.max(1) as u64).map(|i| trainer.task.eval_batch(i, t.eval_batch_size)).collect();
    Ok(evaluate(&trainer.model, params, &batches, opts, seed)?)
}

/// Trains `cfg` with `seed` into `dir`, overwriting previous output.
pub fn train_one(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunSummary> {
    let trainer = Trainer::new(cfg.clone())?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)? + "\n")?;
    let mut sink = DirSink::create(dir)?;
    let state = trainer.train(seed, &mut sink)?;
    drop(sink);
    let steps: Vec<StepRecord> = moe_route::training::sink::read_jsonl(&dir.join(moe_route::training::sink::METRICS_FILE))?;
    let last = steps.last().ok_or_else(|| CliError::Config("train.steps must be positive".into()))?;
    let summary = RunSummary {
        seed,
        steps: steps.len(),
        final_loss: last.loss,
        final_contrastive: last.contrastive,
        tail_success: tail_success(&steps, 0.2),
        eval: held_out_eval(&trainer, &state.params, &EvalOptions::default(), seed)?,
    };
    std::fs::write(dir.join(SUMMARY_JSON), serde_json::to_string_pretty(&summary)? + "\n")?;
    write_summary_csv(&dir.join(SUMMARY_CSV), std::slice::from_ref(&summary))?;
    Ok(summary)
}

pub const SUMMARY_COLUMNS: [&str; 12] = [
    "seed",
    "steps",
    "final_loss",
    "final_contrastive",
    "tail_success_image",
    "tail_success_text",
    "eval_accuracy",
    "eval_i2t_recall",
    "eval_t2i_recall",
    "eval_contrastive_loss",
    "eval_success_image",
    "eval_success_text",
];

fn opt(x: Option<&f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn summary_row(s: &RunSummary) -> Vec<String> {
    vec![
        s.seed.to_string(),
        s.steps.to_string(),
        s.final_loss.to_string(),
        s.final_contrastive.to_string(),
        opt(s.tail_success.get(&Modality::Image)),
        opt(s.tail_success.get(&Modality::Text)),
        s.eval.accuracy.to_string(),
        s.eval.i2t_recall.to_string(),
        s.eval.t2i_recall.to_string(),
        s.eval.contrastive_loss.to_string(),
        opt(s.eval.success.get(&Modality::Image)),
        opt(s.eval.success.get(&Modality::Text)),
    ]
}

pub fn write_summary_csv(path: &Path, rows: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        w.write_record(summary_row(r))?;
    }
    w.flush()?;
    Ok(())
}

/// `train`: one sibling directory per seed under `out`.
pub fn cmd_train(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    seeds.iter().map(|&s| train_one(cfg, s, &run_dir(out, s))).collect()
}
