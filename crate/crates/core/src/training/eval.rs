// SPDX-License-Identifier: Apache-2.0

//! In-batch retrieval evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dispatch::CapacityConfig;
use crate::model::{ForwardOptions, LayerTrace, Model, ModelError, PairBatch};
use crate::pruning::PruneSet;
use crate::routing::Modality;
use crate::tensor::{ParamStore, Tape, Tensor};

/// Recall@1 in both directions of an `images × texts` similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub i2t_recall: f64,
    pub t2i_recall: f64,
    /// Mean of the two directions.
    pub accuracy: f64,
}

fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Ties go to the lower index.
pub fn retrieval_scores(sim: &Tensor) -> RetrievalScores {
    let n = sim.rows();
    assert_eq!(n, sim.cols(), "similarity matrix must be square");
    let i2t = (0..n).filter(|&i| argmax(sim.row(i).iter().copied()) == i).count();
    let t2i = (0..n).filter(|&j| argmax((0..n).map(|i| sim.at(i, j))) == j).count();
    let (i2t, t2i) = (i2t as f64 / n as f64, t2i as f64 / n as f64);
    RetrievalScores { i2t_recall: i2t, t2i_recall: t2i, accuracy: 0.5 * (i2t + t2i) }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    /// Encode each modality in its own forward pass, with its own capacity.
    pub unimodal: bool,
    /// Capacity slack factor replacing the configured one.
    pub slack: Option<f64>,
    pub prune: Option<PruneSet>,
    pub groups: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub batches: usize,
    pub i2t_recall: f64,
    pub t2i_recall: f64,
    pub accuracy: f64,
    pub contrastive_loss: f64,
    /// Served fraction of `(token, choice)` pairs over all MoE layers.
    pub success: BTreeMap<Modality, f64>,
    /// Per MoE block.
    pub layer_success: BTreeMap<usize, BTreeMap<Modality, f64>>,
    /// Mean gate value of the rank-r choice.
    pub rank_weight_mean: BTreeMap<Modality, Vec<f64>>,
}

#[derive(Default)]
struct Tally {
    served: BTreeMap<(usize, Modality), (usize, usize)>,
    ranks: BTreeMap<Modality, (Vec<f64>, usize)>,
}

impl Tally {
    fn add(&mut self, traces: &[LayerTrace]) {
        for t in traces {
            for m in Modality::ALL {
                let n = t.plan.modality.iter().filter(|&&x| x == m).count();
                if n == 0 {
                    continue;
                }
                let e = self.served.entry((t.layer, m)).or_default();
                e.0 += t.plan.served_pairs(Some(m));
                e.1 += n * t.plan.top_k;
                let r = self.ranks.entry(m).or_insert_with(|| (vec![0.0; t.plan.top_k], 0));
                for (row, sel) in t.selections.iter().enumerate() {
                    if t.info[row].modality == m {
                        for (acc, &(_, w)) in r.0.iter_mut().zip(sel) {
                            *acc += w;
                        }
                        r.1 += 1;
                    }
                }
            }
        }
    }
}

/// Averages retrieval metrics over `batches`; each batch is scored on its
/// own in-batch similarity matrix.
pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    batches: &[PairBatch],
    opts: &EvalOptions,
    seed: u64,
) -> Result<EvalReport, ModelError> {
    if batches.is_empty() {
        return Err(ModelError::Input("no evaluation batches".into()));
    }
    let mut sums = [0.0; 4];
    let mut tally = Tally::default();
    for (i, batch) in batches.iter().enumerate() {
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let fresh = || {
            let mut f = ForwardOptions::eval(seed.wrapping_add(i as u64));
            f.capacity = opts.slack.map(|s| CapacityConfig { slack: s, ..model.cfg.capacity.clone() });
            f.prune = opts.prune.clone();
            f.groups = opts.groups;
            f
        };
        let (zi, zt) = if opts.unimodal {
            let img = model.encode(&tape, &p, &batch.only(Modality::Image), &mut fresh())?;
            let txt = model.encode(&tape, &p, &batch.only(Modality::Text), &mut fresh())?;
            tally.add(&img.traces);
            tally.add(&txt.traces);
            (img.image, txt.text)
        } else {
            let enc = model.encode(&tape, &p, batch, &mut fresh())?;
            tally.add(&enc.traces);
            (enc.image, enc.text)
        };
        let (Some(zi), Some(zt)) = (zi, zt) else {
            return Err(ModelError::Input("evaluation needs both modalities".into()));
        };
        let scale = p.get("head/log_scale").ok_or_else(|| ModelError::MissingParam("head/log_scale".into()))?;
        let logits = crate::model::similarity_logits(&tape, zi, zt, scale)?;
        let loss = crate::model::contrastive_loss(&tape, zi, zt, scale)?;
        let s = retrieval_scores(&tape.value(logits));
        sums[0] += s.i2t_recall;
        sums[1] += s.t2i_recall;
        sums[2] += s.accuracy;
        sums[3] += tape.item(loss);
    }
    let n = batches.len() as f64;
    let mut success = BTreeMap::new();
    let mut layer_success: BTreeMap<usize, BTreeMap<Modality, f64>> = BTreeMap::new();
    let mut totals: BTreeMap<Modality, (usize, usize)> = BTreeMap::new();
    for (&(layer, m), &(served, all)) in &tally.served {
        layer_success.entry(layer).or_default().insert(m, served as f64 / all as f64);
        let t = totals.entry(m).or_default();
        t.0 += served;
        t.1 += all;
    }
    for (m, (served, all)) in totals {
        success.insert(m, served as f64 / all as f64);
    }
    let rank_weight_mean =
        tally.ranks.into_iter().map(|(m, (w, c))| (m, w.into_iter().map(|x| x / c.max(1) as f64).collect())).collect();
    Ok(EvalReport {
        batches: batches.len(),
        i2t_recall: sums[0] / n,
        t2i_recall: sums[1] / n,
        accuracy: sums[2] / n,
        contrastive_loss: sums[3] / n,
        success,
        layer_success,
        rank_weight_mean,
    })
}
