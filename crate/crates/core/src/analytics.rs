// SPDX-License-Identifier: Apache-2.0

//! Routing statistics extracted from forward-pass traces.
//!
//! Two record kinds are produced: a compact per-step summary that goes into
//! the metrics stream, and a detailed per-layer breakdown logged every few
//! steps into the analytics stream. Both are plain serde structs so reports
//! can be rebuilt from the JSONL files alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::LayerTrace;
use crate::routing::Modality;

/// Bins of the priority-position histogram.
pub const PRIORITY_BINS: usize = 10;

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Per-modality routing summary of one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySummary {
    pub tokens: usize,
    /// Served pairs / (K · tokens).
    pub success: f64,
    /// Entropy of the token-averaged gate distribution.
    pub global_entropy: f64,
    /// Mean per-token gate entropy.
    pub local_entropy: f64,
    pub p_max_mean: f64,
    pub p_max_std: f64,
    /// Token-averaged gate distribution.
    pub marginal: Vec<f64>,
    /// Share of top-1 choices per expert.
    pub top1_share: Vec<f64>,
    /// Mean gate value of the rank-r choice, r < K.
    pub rank_weight_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tower: Option<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ModalitySummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<ModalitySummary>,
}

impl LayerSummary {
    pub fn get(&self, m: Modality) -> Option<&ModalitySummary> {
        match m {
            Modality::Image => self.image.as_ref(),
            Modality::Text => self.text.as_ref(),
        }
    }

    pub fn from_trace(trace: &LayerTrace) -> Self {
        let e = trace.gates.cols();
        let k = trace.plan.top_k;
        let mut out = LayerSummary { layer: trace.layer, tower: trace.tower, image: None, text: None };
        for m in Modality::ALL {
            let rows: Vec<usize> = (0..trace.info.len()).filter(|&r| trace.info[r].modality == m).collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let mut marginal = vec![0.0; e];
            let mut top1 = vec![0.0; e];
            let mut local = 0.0;
            let mut pmax = Vec::with_capacity(rows.len());
            let mut ranks = vec![0.0; k];
            for &r in &rows {
                for (acc, &(_, w)) in ranks.iter_mut().zip(&trace.selections[r]) {
                    *acc += w / n;
                }
                let g = trace.gates.row(r);
                for (acc, x) in marginal.iter_mut().zip(g) {
                    *acc += x / n;
                }
                local += entropy(g) / n;
                pmax.push(g.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                if let Some(&(j, _)) = trace.selections[r].first() {
                    top1[j] += 1.0 / n;
                }
            }
            let p_max_mean = pmax.iter().sum::<f64>() / n;
            let p_max_std = (pmax.iter().map(|x| (x - p_max_mean).powi(2)).sum::<f64>() / n).sqrt();
            let summary = ModalitySummary {
                tokens: rows.len(),
                success: trace.plan.success_rate(m).unwrap_or(0.0),
                global_entropy: entropy(&marginal),
                local_entropy: local,
                p_max_mean,
                p_max_std,
                marginal,
                top1_share: top1,
                rank_weight_mean: ranks,
            };
            match m {
                Modality::Image => out.image = Some(summary),
                Modality::Text => out.text = Some(summary),
            }
        }
        out
    }
}

/// Per-expert counts for one modality of one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertCounts {
    /// Pairs routed to each expert, served or not.
    pub attempted: Vec<usize>,
    pub served: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Histogram of normalized dispatch-order position (0 = first).
    pub priority_hist: Vec<usize>,
    /// Histogram of normalized dispatch-order position of fully dropped tokens.
    pub dropped_priority_hist: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAnalytics {
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tower: Option<Modality>,
    pub num_experts: usize,
    pub top_k: usize,
    /// Capacity per dispatch group.
    pub capacity: Vec<usize>,
    pub groups: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ExpertCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<ExpertCounts>,
    /// `flows[m][a][b]`: tokens of modality `m` whose top-1 expert was `a`
    /// at the previous MoE layer and `b` here. Absent for the first layer.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub flows: BTreeMap<Modality, Vec<Vec<usize>>>,
}

impl LayerAnalytics {
    pub fn get(&self, m: Modality) -> Option<&ExpertCounts> {
        match m {
            Modality::Image => self.image.as_ref(),
            Modality::Text => self.text.as_ref(),
        }
    }

    pub fn from_trace(trace: &LayerTrace, previous: Option<&LayerTrace>) -> Self {
        let e = trace.plan.num_experts;
        let n = trace.info.len();
        let mut position = vec![0usize; n];
        let mut group_size = vec![0usize; trace.plan.capacity.len()];
        for t in trace.info.iter() {
            group_size[t.group_id] += 1;
        }
        // Position within the token's own group.
        let mut seen = vec![0usize; group_size.len()];
        for &r in &trace.plan.priority_order {
            let g = trace.info[r].group_id;
            position[r] = seen[g];
            seen[g] += 1;
        }
        let mut out = LayerAnalytics {
            layer: trace.layer,
            tower: trace.tower,
            num_experts: e,
            top_k: trace.plan.top_k,
            capacity: trace.plan.capacity.clone(),
            groups: group_size.len(),
            image: None,
            text: None,
            flows: BTreeMap::new(),
        };
        for m in Modality::ALL {
            let rows: Vec<usize> = (0..n).filter(|&r| trace.info[r].modality == m).collect();
            if rows.is_empty() {
                continue;
            }
            let mut c = ExpertCounts {
                attempted: vec![0; e],
                served: vec![0; e],
                dropped: vec![0; e],
                priority_hist: vec![0; PRIORITY_BINS],
                dropped_priority_hist: vec![0; PRIORITY_BINS],
            };
            for &r in &rows {
                for &(j, _) in &trace.selections[r] {
                    c.attempted[j] += 1;
                }
                for a in &trace.plan.assignments[r] {
                    c.served[a.expert] += 1;
                }
                for &rank in &trace.plan.drops[r] {
                    c.dropped[trace.selections[r][rank].0] += 1;
                }
                let size = group_size[trace.info[r].group_id];
                let bin = (position[r] * PRIORITY_BINS / size).min(PRIORITY_BINS - 1);
                c.priority_hist[bin] += 1;
                if trace.plan.assignments[r].is_empty() {
                    c.dropped_priority_hist[bin] += 1;
                }
            }
            if let Some(prev) = previous {
                let mut flow = vec![vec![0usize; e]; e];
                for &r in &rows {
                    if let (Some(&(a, _)), Some(&(b, _))) = (prev.selections[r].first(), trace.selections[r].first()) {
                        flow[a][b] += 1;
                    }
                }
                out.flows.insert(m, flow);
            }
            match m {
                Modality::Image => out.image = Some(c),
                Modality::Text => out.text = Some(c),
            }
        }
        out
    }
}

/// Summaries for every trace of one pass, in trace order.
pub fn layer_summaries(traces: &[LayerTrace]) -> Vec<LayerSummary> {
    traces.iter().map(LayerSummary::from_trace).collect()
}

/// Detailed records for every trace, linking consecutive MoE layers of the
/// same tower for trajectory flows.
pub fn routing_stats(traces: &[LayerTrace]) -> Vec<LayerAnalytics> {
    traces
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let prev = traces[..i].iter().rev().find(|p| p.tower == t.tower);
            LayerAnalytics::from_trace(t, prev)
        })
        .collect()
}
