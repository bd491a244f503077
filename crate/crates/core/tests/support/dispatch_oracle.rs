// SPDX-License-Identifier: Apache-2.0

//! Brute-force dispatcher written without the library's orderings.

use std::collections::BTreeMap;

use moe_route::dispatch::{compute_capacity, BprMode, DispatchPlan};
use moe_route::routing::{Modality, TokenInfo};

#[derive(Debug, Clone)]
pub struct Case {
    pub info: Vec<TokenInfo>,
    /// Per row, `(expert, weight)` choices ranked by descending weight.
    pub selections: Vec<Vec<(usize, f64)>>,
    pub experts: usize,
    pub k: usize,
    pub slack: f64,
}

/// Reference priority position for each row of a group, built without the
/// library's orderings. Random mode reuses the permutation the plan recorded.
pub fn oracle_order(mode: BprMode, case: &Case, rows: &[usize], plan: &DispatchPlan) -> Vec<usize> {
    let mut rows = rows.to_vec();
    match mode {
        BprMode::BprMax | BprMode::BprSumTopk => {
            let score = |r: usize| -> f64 {
                let ws = case.selections[r].iter().map(|x| x.1);
                if mode == BprMode::BprMax {
                    ws.fold(f64::MIN, f64::max)
                } else {
                    ws.sum()
                }
            };
            // Selection sort: strictly larger score wins, ties keep batch order.
            let mut out = Vec::new();
            while !rows.is_empty() {
                let mut best = 0;
                for i in 1..rows.len() {
                    if score(rows[i]) > score(rows[best]) {
                        best = i;
                    }
                }
                out.push(rows.remove(best));
            }
            out
        }
        BprMode::FifoImageFirst | BprMode::FifoTextFirst => {
            let first = if mode == BprMode::FifoImageFirst { Modality::Image } else { Modality::Text };
            let mut out: Vec<usize> = rows.iter().copied().filter(|&r| case.info[r].modality == first).collect();
            out.extend(rows.iter().copied().filter(|&r| case.info[r].modality != first));
            out
        }
        BprMode::RandomShuffle => {
            let recorded: Vec<usize> = plan.priority_order.iter().copied().filter(|r| rows.contains(r)).collect();
            let mut sorted = recorded.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, rows, "recorded order is a permutation of the group");
            recorded
        }
    }
}

/// Brute-force assignment: list every (row, rank) pair, sort by (rank,
/// priority position) and admit while the expert has room.
pub fn oracle(mode: BprMode, case: &Case, plan: &DispatchPlan) -> (BTreeMap<(usize, usize), usize>, Vec<(usize, usize)>) {
    let groups = case.info.iter().map(|t| t.group_id).max().unwrap() + 1;
    let mut served = BTreeMap::new();
    let mut dropped = Vec::new();
    for g in 0..groups {
        let rows: Vec<usize> = (0..case.info.len()).filter(|&r| case.info[r].group_id == g).collect();
        let cap = compute_capacity(rows.len(), case.experts, case.k, case.slack);
        let order = oracle_order(mode, case, &rows, plan);
        let pos = |r: usize| order.iter().position(|&x| x == r).unwrap();
        let mut pairs: Vec<(usize, usize)> = rows.iter().flat_map(|&r| (0..case.k).map(move |j| (r, j))).collect();
        pairs.sort_by_key(|&(r, j)| (j, pos(r)));
        let mut load = vec![0usize; case.experts];
        for (r, j) in pairs {
            let e = case.selections[r][j].0;
            if load[e] < cap {
                served.insert((r, j), e);
                load[e] += 1;
            } else {
                dropped.push((r, j));
            }
        }
    }
    dropped.sort_unstable();
    (served, dropped)
}
