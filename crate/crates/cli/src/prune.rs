// SPDX-License-Identifier: Apache-2.0

//! `prune`: derive a prune set from a run's analytics and score it.

use std::path::Path;

use moe_route::pruning::{build_profile, select_prune, ExpertUsageProfile, PruneMode, PruneSet, PruneTarget, UsageBasis};
use moe_route::routing::Modality;
use moe_route::training::eval::{EvalOptions, EvalReport};
use moe_route::training::sink::{read_jsonl, ANALYTICS_FILE, FINAL_CHECKPOINT};
use moe_route::training::AnalyticsRecord;
use serde::{Deserialize, Serialize};

use crate::eval::load_checkpoint;
use crate::run::held_out_eval;
use crate::{CliError, Result};

#[derive(Debug, Clone)]
pub struct PruneArgs {
    pub modality: Modality,
    pub target: PruneTarget,
    pub mode: PruneMode,
    pub window: f64,
    pub basis: UsageBasis,
    /// Score both the pruned and the unpruned model on held-out batches.
    pub evaluate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub prune: PruneSet,
    pub profile: ExpertUsageProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unpruned: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned: Option<EvalReport>,
}

pub fn cmd_prune(run: &Path, args: &PruneArgs, out: &Path) -> Result<PruneReport> {
    let path = run.join(ANALYTICS_FILE);
    if !path.exists() {
        return Err(CliError::Other(format!("{} not found", path.display())));
    }
    let records: Vec<AnalyticsRecord> = read_jsonl(&path)?;
    let profile = build_profile(&records, args.window, args.basis)?;
    let prune = select_prune(&profile, args.modality, args.target, args.mode)?;
    let (mut unpruned, mut pruned) = (None, None);
    if args.evaluate {
        let (trainer, state, seed) = load_checkpoint(&run.join(FINAL_CHECKPOINT), None)?;
        let base = EvalOptions { unimodal: true, ..Default::default() };
        unpruned = Some(held_out_eval(&trainer, &state.params, &base, seed)?);
        let opts = EvalOptions { prune: Some(prune.clone()), ..base };
        pruned = Some(held_out_eval(&trainer, &state.params, &opts, seed)?);
    }
    std::fs::create_dir_all(out)?;
    let name = format!("prune_{}_{}.json", args.modality, args.mode);
    prune.save(&out.join(&name))?;
    let report = PruneReport { prune, profile, unpruned, pruned };
    std::fs::write(out.join(format!("prune_report_{}_{}.json", args.modality, args.mode)), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
