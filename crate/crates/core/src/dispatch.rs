// SPDX-License-Identifier: Apache-2.0

//! Capacity-constrained expert assignment.
//!
//! Tokens of each group are ranked by a [`PriorityOrder`] and claim expert
//! slots in rounds: every token's first choice is placed before any second
//! choice. A `(token, rank)` pair whose expert is already full is dropped and
//! contributes nothing to the combined output.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::routing::{Modality, TokenInfo};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityConfig {
    /// Slack factor `C_R >= 1`.
    #[serde(default = "default_slack")]
    pub slack: f64,
    /// Number of dispatch groups per batch.
    #[serde(default = "default_groups")]
    pub groups: usize,
    /// Fixed per-expert capacity, bypassing the slack formula. Analysis knob;
    /// zero forces every token to be dropped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_override: Option<usize>,
}

fn default_slack() -> f64 {
    1.0
}

fn default_groups() -> usize {
    1
}

impl Default for CapacityConfig {
    fn default() -> Self {
        Self { slack: 1.0, groups: 1, capacity_override: None }
    }
}

impl CapacityConfig {
    pub fn with_slack(slack: f64) -> Self {
        Self { slack, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.slack >= 1.0 && self.slack.is_finite()) {
            return Err(format!("slack factor must be >= 1, got {}", self.slack));
        }
        if self.groups == 0 {
            return Err("groups must be >= 1".into());
        }
        Ok(())
    }
}

/// `ceil(C_R · n · K / E)`, at least 1.
pub fn compute_capacity(n_group: usize, num_experts: usize, top_k: usize, slack: f64) -> usize {
    let c = (slack * (n_group * top_k) as f64 / num_experts as f64).ceil();
    (c as usize).max(1)
}

/// A token as seen by a priority ordering.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub row: usize,
    pub modality: Modality,
    pub choices: &'a [(usize, f64)],
}

/// Decides the order in which the tokens of one group claim expert slots.
pub trait PriorityOrder: Send + Sync {
    fn name(&self) -> &str;

    /// Permutation of `0..candidates.len()`, highest priority first.
    /// Candidates arrive in ascending batch-row order.
    fn order(&self, candidates: &[Candidate<'_>], rng: &mut dyn RngCore) -> Vec<usize>;
}

fn by_descending_score(candidates: &[Candidate<'_>], score: impl Fn(&Candidate<'_>) -> f64) -> Vec<usize> {
    let scores: Vec<f64> = candidates.iter().map(score).collect();
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    // Stable: ties keep ascending batch order.
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Highest top-1 gate value first.
#[derive(Debug, Default)]
pub struct MaxScorePriority;

impl PriorityOrder for MaxScorePriority {
    fn name(&self) -> &str {
        "bpr_max"
    }

    fn order(&self, candidates: &[Candidate<'_>], _rng: &mut dyn RngCore) -> Vec<usize> {
        by_descending_score(candidates, |c| c.choices.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Highest sum of the top-K gate values first.
#[derive(Debug, Default)]
pub struct SumTopKPriority;

impl PriorityOrder for SumTopKPriority {
    fn name(&self) -> &str {
        "bpr_sum_topk"
    }

    fn order(&self, candidates: &[Candidate<'_>], _rng: &mut dyn RngCore) -> Vec<usize> {
        by_descending_score(candidates, |c| c.choices.iter().map(|x| x.1).sum())
    }
}

/// Batch order, with one modality's block moved to the front.
#[derive(Debug)]
pub struct ModalityFirstPriority {
    first: Modality,
    name: &'static str,
}

impl ModalityFirstPriority {
    pub fn new(first: Modality) -> Self {
        let name = match first {
            Modality::Image => "fifo_image_first",
            Modality::Text => "fifo_text_first",
        };
        Self { first, name }
    }
}

impl PriorityOrder for ModalityFirstPriority {
    fn name(&self) -> &str {
        self.name
    }

    fn order(&self, candidates: &[Candidate<'_>], _rng: &mut dyn RngCore) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        idx.sort_by_key(|&i| candidates[i].modality != self.first);
        idx
    }
}

/// Uniformly random order, one permutation per group.
#[derive(Debug, Default)]
pub struct RandomPriority;

impl PriorityOrder for RandomPriority {
    fn name(&self) -> &str {
        "random_shuffle"
    }

    fn order(&self, candidates: &[Candidate<'_>], rng: &mut dyn RngCore) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        idx.shuffle(rng);
        idx
    }
}

/// Priority orderings by name.
#[derive(Clone, Default)]
pub struct PriorityRegistry {
    entries: BTreeMap<String, Arc<dyn PriorityOrder>>,
}

impl fmt::Debug for PriorityRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

impl PriorityRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(MaxScorePriority));
        r.register(Arc::new(SumTopKPriority));
        r.register(Arc::new(ModalityFirstPriority::new(Modality::Image)));
        r.register(Arc::new(ModalityFirstPriority::new(Modality::Text)));
        r.register(Arc::new(RandomPriority));
        r
    }

    /// Registers `order` under its own name, replacing any previous entry.
    pub fn register(&mut self, order: Arc<dyn PriorityOrder>) {
        self.entries.insert(order.name().to_string(), order);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn PriorityOrder>> {
        self.entries.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

pub fn builtin_priorities() -> &'static PriorityRegistry {
    static REGISTRY: OnceLock<PriorityRegistry> = OnceLock::new();
    REGISTRY.get_or_init(PriorityRegistry::with_builtin)
}

/// Built-in orderings, as named in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BprMode {
    BprMax,
    BprSumTopk,
    FifoImageFirst,
    FifoTextFirst,
    RandomShuffle,
}

impl BprMode {
    pub const ALL: [BprMode; 5] =
        [BprMode::BprMax, BprMode::BprSumTopk, BprMode::FifoImageFirst, BprMode::FifoTextFirst, BprMode::RandomShuffle];

    pub fn name(self) -> &'static str {
        match self {
            BprMode::BprMax => "bpr_max",
            BprMode::BprSumTopk => "bpr_sum_topk",
            BprMode::FifoImageFirst => "fifo_image_first",
            BprMode::FifoTextFirst => "fifo_text_first",
            BprMode::RandomShuffle => "random_shuffle",
        }
    }

    pub fn strategy(self) -> Arc<dyn PriorityOrder> {
        builtin_priorities().get(self.name()).expect("built-in ordering registered")
    }
}

impl fmt::Display for BprMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BprMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BprMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown BPR mode {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub expert: usize,
    /// Buffer slot within the token's group.
    pub slot: usize,
    pub weight: f64,
    /// Choice rank, 0 for the top choice.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPlan {
    pub num_experts: usize,
    pub top_k: usize,
    pub modality: Vec<Modality>,
    pub group_of: Vec<usize>,
    /// Served choices per batch row.
    pub assignments: Vec<Vec<Assignment>>,
    /// Unserved choice ranks per batch row.
    pub drops: Vec<Vec<usize>>,
    /// Capacity per group.
    pub capacity: Vec<usize>,
    /// `fill[group][expert]`.
    pub fill: Vec<Vec<usize>>,
    /// Batch rows processed by each expert, in (group, slot) order.
    pub expert_rows: Vec<Vec<usize>>,
    /// Batch rows in the order they claimed slots, group by group.
    pub priority_order: Vec<usize>,
}

impl DispatchPlan {
    pub fn served_pairs(&self, m: Option<Modality>) -> usize {
        self.assignments
            .iter()
            .zip(&self.modality)
            .filter(|(_, &tm)| m.is_none_or(|m| m == tm))
            .map(|(a, _)| a.len())
            .sum()
    }

    pub fn dropped_pairs(&self, m: Option<Modality>) -> usize {
        self.drops
            .iter()
            .zip(&self.modality)
            .filter(|(_, &tm)| m.is_none_or(|m| m == tm))
            .map(|(d, _)| d.len())
            .sum()
    }

    /// Served pairs / (K · n_m); `None` when the modality is absent.
    pub fn success_rate(&self, m: Modality) -> Option<f64> {
        let n = self.modality.iter().filter(|&&x| x == m).count();
        (n > 0).then(|| self.served_pairs(Some(m)) as f64 / (self.top_k * n) as f64)
    }
}

/// Assigns every `(token, choice)` pair to an expert slot or drops it.
///
/// `selections[row]` lists the row's ranked top-K choices. Groups come from
/// `info[row].group_id`; each group has its own capacity and fill state.
pub fn dispatch(
    info: &[TokenInfo],
    selections: &[Vec<(usize, f64)>],
    num_experts: usize,
    top_k: usize,
    cap: &CapacityConfig,
    priority: &dyn PriorityOrder,
    rng: &mut dyn RngCore,
) -> DispatchPlan {
    let n = info.len();
    assert_eq!(selections.len(), n, "one selection list per token");
    let num_groups = info.iter().map(|t| t.group_id + 1).max().unwrap_or(0);
    let mut plan = DispatchPlan {
        num_experts,
        top_k,
        modality: info.iter().map(|t| t.modality).collect(),
        group_of: info.iter().map(|t| t.group_id).collect(),
        assignments: vec![Vec::new(); n],
        drops: vec![Vec::new(); n],
        capacity: Vec::with_capacity(num_groups),
        fill: Vec::with_capacity(num_groups),
        expert_rows: vec![Vec::new(); num_experts],
        priority_order: Vec::with_capacity(n),
    };
    for g in 0..num_groups {
        let rows: Vec<usize> = (0..n).filter(|&r| info[r].group_id == g).collect();
        let capacity = cap
            .capacity_override
            .unwrap_or_else(|| compute_capacity(rows.len(), num_experts, top_k, cap.slack));
        let candidates: Vec<Candidate<'_>> = rows
            .iter()
            .map(|&r| Candidate { row: r, modality: info[r].modality, choices: &selections[r] })
            .collect();
        let order = priority.order(&candidates, rng);
        debug_assert_eq!(order.len(), rows.len());
        let ordered: Vec<usize> = order.iter().map(|&i| rows[i]).collect();
        let mut fill = vec![0usize; num_experts];
        let mut group_slots: Vec<Vec<usize>> = vec![Vec::new(); num_experts];
        for rank in 0..top_k {
            for &r in &ordered {
                let Some(&(expert, weight)) = selections[r].get(rank) else { continue };
                if fill[expert] < capacity {
                    plan.assignments[r].push(Assignment { expert, slot: fill[expert], weight, rank });
                    group_slots[expert].push(r);
                    fill[expert] += 1;
                } else {
                    plan.drops[r].push(rank);
                }
            }
        }
        debug_assert!(fill.iter().all(|&f| f <= capacity), "expert capacity exceeded");
        for (e, slots) in group_slots.into_iter().enumerate() {
            plan.expert_rows[e].extend(slots);
        }
        plan.capacity.push(capacity);
        plan.fill.push(fill);
        plan.priority_order.extend(ordered);
    }
    plan
}

/// Per-row sum of served `combine weight · expert output`.
///
/// `gates` is the `n×E` gate variable in batch order; `expert_outputs[e]`
/// holds one row per entry of `plan.expert_rows[e]` (or `None` when the
/// expert received no tokens). Fully dropped rows come out as zeros.
pub fn combine(
    tape: &Tape,
    plan: &DispatchPlan,
    gates: Var,
    expert_outputs: &[Option<Var>],
    width: usize,
) -> Result<Var, TensorError> {
    let n = plan.modality.len();
    let mut acc: Option<Var> = None;
    for (e, rows) in plan.expert_rows.iter().enumerate() {
        let Some(out) = expert_outputs.get(e).copied().flatten() else { continue };
        if rows.is_empty() {
            continue;
        }
        let pairs: Vec<(usize, usize)> = rows.iter().map(|&r| (r, e)).collect();
        let w = tape.pick(gates, &pairs)?;
        let scaled = tape.scale_rows(out, w)?;
        let placed = tape.scatter_add_rows(scaled, rows, n)?;
        acc = Some(match acc {
            None => placed,
            Some(a) => tape.add(a, placed)?,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::zeros(&[n, width]))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn info(mods: &[Modality]) -> Vec<TokenInfo> {
        mods.iter()
            .enumerate()
            .map(|(i, &m)| TokenInfo { modality: m, example_id: i, position: 0, group_id: 0 })
            .collect()
    }

    #[test]
    fn capacity_examples() {
        assert_eq!(compute_capacity(64, 8, 1, 1.0), 8);
        assert_eq!(compute_capacity(100, 8, 1, 1.0), 13);
        assert_eq!(compute_capacity(64, 8, 1, 16.0), 128);
        assert_eq!(compute_capacity(1, 64, 1, 1.0), 1);
        assert_eq!(compute_capacity(16, 4, 2, 1.0), 8);
    }

    #[test]
    fn bpr_max_keeps_confident_tokens() {
        let sel = vec![vec![(0, 0.9)], vec![(0, 0.5)], vec![(0, 0.7)]];
        let inf = info(&[Modality::Image; 3]);
        let cap = CapacityConfig { capacity_override: Some(2), ..Default::default() };
        let mut rng = stream_rng(0, Stream::Shuffle, 0);
        let plan = dispatch(&inf, &sel, 1, 1, &cap, &MaxScorePriority, &mut rng);
        assert_eq!(plan.assignments[0].len(), 1);
        assert_eq!(plan.assignments[2].len(), 1);
        assert_eq!(plan.drops[1], vec![0]);
        assert!((plan.success_rate(Modality::Image).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(plan.priority_order, vec![0, 2, 1]);
    }

    #[test]
    fn balanced_bijection_serves_everything() {
        let sel: Vec<_> = (0..8).map(|e| vec![(e, 0.6)]).collect();
        let inf = info(&[Modality::Text; 8]);
        let mut rng = stream_rng(0, Stream::Shuffle, 0);
        let plan = dispatch(&inf, &sel, 8, 1, &CapacityConfig::default(), &MaxScorePriority, &mut rng);
        assert_eq!(plan.success_rate(Modality::Text), Some(1.0));
        assert_eq!(plan.fill[0], vec![1; 8]);
        assert_eq!(plan.capacity, vec![1]);
    }

    #[test]
    fn fifo_orders_put_the_named_block_first() {
        let mods = [Modality::Image, Modality::Text, Modality::Image, Modality::Text];
        let sel = vec![vec![(0, 0.5)]; 4];
        let inf = info(&mods);
        let mut rng = stream_rng(0, Stream::Shuffle, 0);
        let img = dispatch(&inf, &sel, 1, 1, &CapacityConfig::default(), &ModalityFirstPriority::new(Modality::Image), &mut rng);
        assert_eq!(img.priority_order, vec![0, 2, 1, 3]);
        let txt = dispatch(&inf, &sel, 1, 1, &CapacityConfig::default(), &ModalityFirstPriority::new(Modality::Text), &mut rng);
        assert_eq!(txt.priority_order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn registry_resolves_every_mode() {
        for m in BprMode::ALL {
            assert_eq!(m.strategy().name(), m.name());
            assert_eq!(m.name().parse::<BprMode>().unwrap(), m);
        }
        assert!("lifo".parse::<BprMode>().is_err());
        assert_eq!(builtin_priorities().names().count(), 5);
    }

    #[test]
    fn custom_orderings_can_be_registered() {
        struct Reverse;
        impl PriorityOrder for Reverse {
            fn name(&self) -> &str {
                "reverse"
            }
            fn order(&self, c: &[Candidate<'_>], _: &mut dyn RngCore) -> Vec<usize> {
                (0..c.len()).rev().collect()
            }
        }
        let mut reg = PriorityRegistry::with_builtin();
        reg.register(Arc::new(Reverse));
        let sel = vec![vec![(0, 0.5)]; 3];
        let mut rng = stream_rng(0, Stream::Shuffle, 0);
        let plan = dispatch(&info(&[Modality::Text; 3]), &sel, 1, 1, &CapacityConfig::default(), &*reg.get("reverse").unwrap(), &mut rng);
        assert_eq!(plan.priority_order, vec![2, 1, 0]);
    }

    #[test]
    fn combine_weights_are_unnormalized() {
        let tape = Tape::new();
        let gates = tape.constant(Tensor::from_rows(&[vec![0.6, 0.3, 0.1]]).unwrap());
        let inf = info(&[Modality::Text]);
        let sel = vec![vec![(0, 0.6), (1, 0.3)]];
        let cap = CapacityConfig { slack: 4.0, ..Default::default() };
        let mut rng = stream_rng(0, Stream::Shuffle, 0);
        let plan = dispatch(&inf, &sel, 3, 2, &cap, &MaxScorePriority, &mut rng);
        let u = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![-3.0, 5.0]]).unwrap());
        let out = combine(&tape, &plan, gates, &[Some(u), Some(v), None], 2).unwrap();
        let got = tape.value(out);
        assert!((got.data()[0] - (0.6 - 0.9)).abs() < 1e-15);
        assert!((got.data()[1] - (1.2 + 1.5)).abs() < 1e-15);
    }

    #[test]
    fn fully_dropped_token_combines_to_zero() {
        let tape = Tape::new();
        let gates = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let sel = vec![vec![(0, 1.0)], vec![(0, 1.0)]];
        let cap = CapacityConfig { capacity_override: Some(1), ..Default::default() };
        let mut rng = stream_rng(0, Stream::Shuffle, 0);
        let plan = dispatch(&info(&[Modality::Image; 2]), &sel, 1, 1, &cap, &MaxScorePriority, &mut rng);
        let out0 = tape.constant(Tensor::from_rows(&[vec![7.0, 8.0]]).unwrap());
        let out = combine(&tape, &plan, gates, &[Some(out0)], 2).unwrap();
        assert_eq!(tape.value(out).data(), &[7.0, 8.0, 0.0, 0.0]);
    }

    #[test]
    fn single_served_choice_is_identity() {
        let tape = Tape::new();
        let gates = tape.constant(Tensor::from_rows(&[vec![1.0]]).unwrap());
        let sel = vec![vec![(0, 1.0)]];
        let mut rng = stream_rng(0, Stream::Shuffle, 0);
        let plan = dispatch(&info(&[Modality::Image]), &sel, 1, 1, &CapacityConfig::default(), &MaxScorePriority, &mut rng);
        let y = Tensor::from_rows(&[vec![0.1, -0.2, 0.3]]).unwrap();
        let yv = tape.constant(y.clone());
        let out = combine(&tape, &plan, gates, &[Some(yv)], 3).unwrap();
        assert_eq!(*tape.value(out), y);
    }
}
