// SPDX-License-Identifier: Apache-2.0

//! `soup`: greedy multiset average of several runs' final checkpoints.

use std::path::{Path, PathBuf};

use moe_route::tensor::ParamStore;
use moe_route::training::eval::{EvalOptions, EvalReport};
use moe_route::training::sink::FINAL_CHECKPOINT;
use moe_route::training::soup::{greedy_soup, SoupResult};
use moe_route::training::TrainState;
use serde::{Deserialize, Serialize};

use crate::eval::load_checkpoint;
use crate::run::held_out_eval;
use crate::{CliError, Result};

pub const SOUP_CHECKPOINT: &str = "soup.ckpt";
pub const SOUP_REPORT: &str = "soup.json";

/// Soup members are picked on these eval batches, disjoint from the ones
/// used for the reported metrics.
const SELECTION_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoupReport {
    pub runs: Vec<PathBuf>,
    pub result: SoupResult,
    pub eval: EvalReport,
}

pub fn cmd_soup(runs: &[PathBuf], max_size: usize, out: &Path) -> Result<SoupReport> {
    let first = runs.first().ok_or_else(|| CliError::Config("soup needs at least one run".into()))?;
    let (trainer, _, seed) = load_checkpoint(&first.join(FINAL_CHECKPOINT), None)?;
    let mut stores: Vec<ParamStore> = Vec::with_capacity(runs.len());
    for r in runs {
        let (state, _, _) = TrainState::load(&r.join(FINAL_CHECKPOINT))?;
        stores.push(state.params);
    }
    let t = &trainer.cfg.train;
    let selection: Vec<_> =
        (0..t.eval_batches.max(1) as u64).map(|i| trainer.task.eval_batch(SELECTION_OFFSET + i, t.eval_batch_size)).collect();
    let mut failure = None;
    let (params, result) = greedy_soup(&stores, max_size, |p| {
        match moe_route::training::eval::evaluate(&trainer.model, p, &selection, &EvalOptions::default(), seed) {
            Ok(r) => r.accuracy,
            Err(e) => {
                failure.get_or_insert(e.to_string());
                f64::NEG_INFINITY
            }
        }
    })
    .map_err(CliError::Config)?;
    if let Some(e) = failure {
        return Err(CliError::Other(e));
    }
    let eval = held_out_eval(&trainer, &params, &EvalOptions::default(), seed)?;
    std::fs::create_dir_all(out)?;
    let state = TrainState { step: 0, adam: moe_route::training::optim::AdamState::zeros_like(&params), params };
    state.save(&out.join(SOUP_CHECKPOINT), seed, Some(&trainer.cfg))?;
    let report = SoupReport { runs: runs.to_vec(), result, eval };
    std::fs::write(out.join(SOUP_REPORT), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
