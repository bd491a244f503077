// SPDX-License-Identifier: Apache-2.0

//! Expert usage profiles and pruned single-modality inference.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::routing::Modality;
use crate::training::AnalyticsRecord;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("prune config: {0}")]
    Config(String),
    #[error("usage profile: {0}")]
    Profile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How pruned experts are hidden from the router at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Pruned logits are removed before the softmax; survivors renormalize.
    RouterDrop,
    /// The softmax covers all experts; pruned ones are only skipped by top-K.
    RouterPred,
}

impl PruneMode {
    pub fn name(self) -> &'static str {
        match self {
            PruneMode::RouterDrop => "router_drop",
            PruneMode::RouterPred => "router_pred",
        }
    }
}

impl fmt::Display for PruneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PruneMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "router_drop" => Ok(PruneMode::RouterDrop),
            "router_pred" => Ok(PruneMode::RouterPred),
            _ => Err(format!("unknown prune mode {s:?}")),
        }
    }
}

/// Experts removed per MoE layer for one modality's inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSet {
    pub modality: Modality,
    pub mode: PruneMode,
    /// Keyed by 1-based block index of the MoE layer.
    pub layers: BTreeMap<usize, BTreeSet<usize>>,
}

impl PruneSet {
    pub fn empty(modality: Modality, mode: PruneMode) -> Self {
        Self { modality, mode, layers: BTreeMap::new() }
    }

    pub fn pruned(&self, layer: usize) -> Option<&BTreeSet<usize>> {
        self.layers.get(&layer).filter(|s| !s.is_empty())
    }

    pub fn with_mode(&self, mode: PruneMode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn validate(&self, num_experts: usize, top_k: usize) -> Result<(), PruneError> {
        for (layer, set) in &self.layers {
            if let Some(&e) = set.iter().find(|&&e| e >= num_experts) {
                return Err(PruneError::Config(format!("layer {layer}: expert {e} out of range")));
            }
            if num_experts - set.len() < top_k {
                return Err(PruneError::Config(format!(
                    "layer {layer}: {} survivors, need at least K = {top_k}",
                    num_experts - set.len()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), PruneError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PruneError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Which per-expert counter a usage profile ranks by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageBasis {
    /// `(token, choice)` pairs actually processed by the expert.
    #[default]
    Served,
    /// Pairs routed to the expert, dropped or not.
    Attempted,
}

/// Per-layer, per-modality share of tokens each expert handled, averaged
/// over a trailing window of the analytics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertUsageProfile {
    pub basis: UsageBasis,
    pub num_experts: usize,
    pub top_k: usize,
    /// Analytics steps the averages cover.
    pub steps: Vec<u64>,
    /// `layers[l][m][e]`; each vector sums to 1.
    pub layers: BTreeMap<usize, BTreeMap<Modality, Vec<f64>>>,
}

impl ExpertUsageProfile {
    pub fn fractions(&self, layer: usize, m: Modality) -> Option<&[f64]> {
        self.layers.get(&layer)?.get(&m).map(Vec::as_slice)
    }
}

/// Averages per-step expert shares over the records whose step falls in the
/// last `window_frac` of the run (at least the final record).
///
/// A layer/modality whose counters are all zero in a record (the modality
/// was absent) contributes nothing for that record.
pub fn build_profile(
    records: &[AnalyticsRecord],
    window_frac: f64,
    basis: UsageBasis,
) -> Result<ExpertUsageProfile, PruneError> {
    let last = records.iter().map(|r| r.step).max().ok_or_else(|| PruneError::Profile("empty analytics stream".into()))?;
    if !(window_frac > 0.0 && window_frac <= 1.0) {
        return Err(PruneError::Config(format!("window fraction must lie in (0, 1], got {window_frac}")));
    }
    let total = last + 1;
    let window = ((total as f64 * window_frac).ceil() as u64).max(1);
    let start = total - window.min(total);
    let picked: Vec<&AnalyticsRecord> = records.iter().filter(|r| r.step >= start).collect();
    let first = picked
        .iter()
        .flat_map(|r| r.layers.first())
        .next()
        .ok_or_else(|| PruneError::Profile("no MoE layers in the analytics window".into()))?;
    let (e, k) = (first.num_experts, first.top_k);
    let mut sums: BTreeMap<usize, BTreeMap<Modality, (Vec<f64>, usize)>> = BTreeMap::new();
    for r in &picked {
        for layer in &r.layers {
            for m in Modality::ALL {
                let Some(c) = layer.get(m) else { continue };
                let counts = match basis {
                    UsageBasis::Served => &c.served,
                    UsageBasis::Attempted => &c.attempted,
                };
                let n: usize = counts.iter().sum();
                if n == 0 {
                    continue;
                }
                let slot = sums.entry(layer.layer).or_default().entry(m).or_insert_with(|| (vec![0.0; e], 0));
                for (acc, &x) in slot.0.iter_mut().zip(counts) {
                    *acc += x as f64 / n as f64;
                }
                slot.1 += 1;
            }
        }
    }
    let layers = sums
        .into_iter()
        .map(|(l, per)| (l, per.into_iter().map(|(m, (v, c))| (m, v.into_iter().map(|x| x / c as f64).collect())).collect()))
        .collect();
    Ok(ExpertUsageProfile { basis, num_experts: e, top_k: k, steps: picked.iter().map(|r| r.step).collect(), layers })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneTarget {
    /// Keep this many experts per layer.
    Keep(usize),
    /// Keep the fewest top experts whose shares add up to at least this.
    Coverage(f64),
}

/// Experts to remove per layer so that `target` survivors remain, pruning the
/// least used first. Equal shares prune the higher index first.
pub fn select_prune(
    profile: &ExpertUsageProfile,
    modality: Modality,
    target: PruneTarget,
    mode: PruneMode,
) -> Result<PruneSet, PruneError> {
    let (e, k) = (profile.num_experts, profile.top_k);
    match target {
        PruneTarget::Keep(n) if n < k || n > e => {
            return Err(PruneError::Config(format!("keep count {n} must lie in [K = {k}, E = {e}]")))
        }
        PruneTarget::Coverage(c) if !(c > 0.0 && c <= 1.0) => {
            return Err(PruneError::Config(format!("coverage target must lie in (0, 1], got {c}")))
        }
        _ => {}
    }
    let mut set = PruneSet::empty(modality, mode);
    for (&layer, per) in &profile.layers {
        let Some(frac) = per.get(&modality) else { continue };
        // Most used first; the stable sort keeps lower indices ahead on ties.
        let mut order: Vec<usize> = (0..e).collect();
        order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]));
        let keep = match target {
            PruneTarget::Keep(n) => n,
            PruneTarget::Coverage(c) => {
                let mut acc = 0.0;
                let mut n = 0;
                // Small tolerance so shares that sum to exactly the target count.
                while n < e && acc < c - 1e-12 {
                    acc += frac[order[n]];
                    n += 1;
                }
                n.max(k)
            }
        };
        set.layers.insert(layer, order[keep..].iter().copied().collect());
    }
    Ok(set)
}

impl PruneSet {
    pub fn survivors(&self, layer: usize, num_experts: usize) -> usize {
        num_experts - self.layers.get(&layer).map_or(0, BTreeSet::len)
    }
}
