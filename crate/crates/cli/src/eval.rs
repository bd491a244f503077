// SPDX-License-Identifier: Apache-2.0

//! `eval`: held-out retrieval metrics for a checkpoint.

use std::path::Path;

use moe_route::config::ExperimentConfig;
use moe_route::pruning::PruneSet;
use moe_route::training::eval::{EvalOptions, EvalReport};
use moe_route::training::{TrainState, Trainer};

use crate::run::held_out_eval;
use crate::{CliError, Result};

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub unimodal: bool,
    pub slack: Option<f64>,
    pub prune: Option<PruneSet>,
    pub groups: Option<usize>,
    /// Overrides `train.eval_batches`.
    pub batches: Option<usize>,
}

/// Loads a checkpoint with the config recorded in it, or `config` if given.
pub fn load_checkpoint(path: &Path, config: Option<&ExperimentConfig>) -> Result<(Trainer, TrainState, u64)> {
    let (state, seed, stored) = TrainState::load(path)?;
    let cfg = match (config, stored) {
        (Some(c), _) => c.clone(),
        (None, Some(c)) => c,
        (None, None) => return Err(CliError::Config(format!("{} records no config; pass --config", path.display()))),
    };
    let trainer = Trainer::new(cfg)?;
    let want = trainer.model.init_params(0);
    if !want.same_layout(&state.params) {
        return Err(CliError::Config("checkpoint parameters do not match the model config".into()));
    }
    Ok((trainer, state, seed))
}

pub fn cmd_eval(checkpoint: &Path, config: Option<&ExperimentConfig>, args: &EvalArgs) -> Result<EvalReport> {
    let (mut trainer, state, seed) = load_checkpoint(checkpoint, config)?;
    if let Some(b) = args.batches {
        trainer.cfg.train.eval_batches = b;
    }
    if let Some(s) = args.slack {
        if !(s > 0.0 && s.is_finite()) {
            return Err(CliError::Config(format!("slack must be positive, got {s}")));
        }
    }
    if let Some(p) = &args.prune {
        p.validate(trainer.cfg.model.num_experts(), trainer.cfg.model.top_k())?;
    }
    let opts = EvalOptions { unimodal: args.unimodal, slack: args.slack, prune: args.prune.clone(), groups: args.groups };
    held_out_eval(&trainer, &state.params, &opts, seed)
}
