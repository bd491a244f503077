// SPDX-License-Identifier: Apache-2.0

//! Greedy checkpoint soups.
//!
//! Members form a multiset: a checkpoint may be added more than once, and the
//! soup is the average weighted by multiplicity.

use serde::{Deserialize, Serialize};

use super::average_params;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoupResult {
    /// Multiplicity of each candidate.
    pub counts: Vec<usize>,
    /// Candidate index added at each greedy step, starting with the seed.
    pub order: Vec<usize>,
    pub score: f64,
}

/// Greedy search over multisets of candidate indices.
///
/// Starts from the best single candidate and keeps adding the candidate
/// whose inclusion raises `score` the most, stopping when nothing improves or
/// `max_size` members are reached. Ties go to the lower index.
pub fn greedy_multiset(
    candidates: usize,
    max_size: usize,
    mut score: impl FnMut(&[usize]) -> f64,
) -> Option<SoupResult> {
    if candidates == 0 || max_size == 0 {
        return None;
    }
    let mut counts = vec![0; candidates];
    let mut best: Option<(usize, f64)> = None;
    for i in 0..candidates {
        counts[i] = 1;
        let s = score(&counts);
        counts[i] = 0;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let (first, mut current) = best.expect("at least one candidate");
    counts[first] = 1;
    let mut order = vec![first];
    while order.len() < max_size {
        let mut step: Option<(usize, f64)> = None;
        for i in 0..candidates {
            counts[i] += 1;
            let s = score(&counts);
            counts[i] -= 1;
            if s > current && step.is_none_or(|(_, b)| s > b) {
                step = Some((i, s));
            }
        }
        let Some((i, s)) = step else { break };
        counts[i] += 1;
        order.push(i);
        current = s;
    }
    Some(SoupResult { counts, order, score: current })
}

/// Greedy soup of parameter stores under `eval` (higher is better).
pub fn greedy_soup(
    checkpoints: &[ParamStore],
    max_size: usize,
    mut eval: impl FnMut(&ParamStore) -> f64,
) -> Result<(ParamStore, SoupResult), String> {
    let first = checkpoints.first().ok_or("soup needs at least one checkpoint")?;
    if let Some(i) = checkpoints.iter().position(|c| !c.same_layout(first)) {
        return Err(format!("checkpoint {i} has a different architecture"));
    }
    let refs: Vec<&ParamStore> = checkpoints.iter().collect();
    let result = greedy_multiset(checkpoints.len(), max_size, |counts| {
        eval(&average_params(&refs, counts).expect("layouts checked"))
    })
    .ok_or("max_size must be positive")?;
    let params = average_params(&refs, &result.counts)?;
    Ok((params, result))
}

/// Every multiset of `candidates` indices with 1..=`max_size` members, as
/// multiplicity vectors.
pub fn multisets(candidates: usize, max_size: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == cur.len() {
            if cur.iter().sum::<usize>() > 0 {
                out.push(cur.clone());
            }
            return;
        }
        for c in 0..=left {
            cur[i] = c;
            rec(i + 1, left - c, cur, out);
        }
        cur[i] = 0;
    }
    let mut out = Vec::new();
    rec(0, max_size, &mut vec![0; candidates], &mut out);
    out
}
