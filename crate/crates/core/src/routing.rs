// SPDX-License-Identifier: Apache-2.0

//! Token batches, router designs and gating.

use std::collections::BTreeSet;
use std::fmt;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Additive logit mask for experts a token may not use.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoutingError {
    #[error("invalid router config: {0}")]
    Config(String),
    #[error("no router weights bound for {0} tokens")]
    MissingWeights(Modality),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Image, Modality::Text];

    pub fn index(self) -> usize {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image" => Some(Modality::Image),
            "text" => Some(Modality::Text),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenInfo {
    pub modality: Modality,
    pub example_id: usize,
    pub position: usize,
    pub group_id: usize,
}

/// Token rows on a tape plus per-token tags.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Var,
    pub info: Vec<TokenInfo>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.info.len()
    }

    pub fn is_empty(&self) -> bool {
        self.info.is_empty()
    }

    /// Batch rows holding tokens of `m`, ascending.
    pub fn rows_of(&self, m: Modality) -> Vec<usize> {
        self.info.iter().enumerate().filter(|(_, t)| t.modality == m).map(|(i, _)| i).collect()
    }

    pub fn count(&self, m: Modality) -> usize {
        self.info.iter().filter(|t| t.modality == m).count()
    }

    pub fn num_groups(&self) -> usize {
        self.info.iter().map(|t| t.group_id + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RouterDesign {
    Joint,
    PerModality,
    Disjoint { image: Vec<usize>, text: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterConfig {
    pub design: RouterDesign,
    pub num_experts: usize,
    pub top_k: usize,
    /// Standard deviation of the load-estimate noise; `None` means `1/E`.
    #[serde(default)]
    pub noise_sigma: Option<f64>,
}

impl RouterConfig {
    pub fn joint(num_experts: usize, top_k: usize) -> Self {
        Self { design: RouterDesign::Joint, num_experts, top_k, noise_sigma: None }
    }

    pub fn sigma(&self) -> f64 {
        self.noise_sigma.unwrap_or(1.0 / self.num_experts as f64)
    }

    pub fn validate(&self) -> Result<(), RoutingError> {
        let e = self.num_experts;
        if e == 0 || self.top_k == 0 || self.top_k > e {
            return Err(RoutingError::Config(format!("need 1 <= K <= E, got K={} E={e}", self.top_k)));
        }
        if let Some(s) = self.noise_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(RoutingError::Config(format!("noise_sigma must be positive, got {s}")));
            }
        }
        if let RouterDesign::Disjoint { image, text } = &self.design {
            let img: BTreeSet<_> = image.iter().copied().collect();
            let txt: BTreeSet<_> = text.iter().copied().collect();
            if img.len() != image.len() || txt.len() != text.len() {
                return Err(RoutingError::Config("duplicate expert in a disjoint pool".into()));
            }
            if !img.is_disjoint(&txt) {
                return Err(RoutingError::Config("disjoint pools overlap".into()));
            }
            if img.iter().chain(&txt).any(|&x| x >= e) {
                return Err(RoutingError::Config(format!("pool expert index >= E={e}")));
            }
            if img.len() < self.top_k || txt.len() < self.top_k {
                return Err(RoutingError::Config("each disjoint pool needs at least K experts".into()));
            }
        }
        Ok(())
    }

    /// Experts that tokens of `m` may use under this design.
    pub fn pool(&self, m: Modality) -> Option<&[usize]> {
        match &self.design {
            RouterDesign::Disjoint { image, text } => Some(match m {
                Modality::Image => image,
                Modality::Text => text,
            }),
            _ => None,
        }
    }

    /// Router weight parameter names (relative to a layer prefix) per modality.
    pub fn weight_names(&self) -> [(Modality, &'static str); 2] {
        match self.design {
            RouterDesign::Joint => [(Modality::Image, "router/w"), (Modality::Text, "router/w")],
            _ => [(Modality::Image, "router/image/w"), (Modality::Text, "router/text/w")],
        }
    }
}

/// Router weight variables (`D×E`) for each modality. Under the joint design
/// both entries are the same variable.
#[derive(Debug, Clone, Copy)]
pub struct RouterWeights {
    pub image: Option<Var>,
    pub text: Option<Var>,
}

impl RouterWeights {
    pub fn shared(w: Var) -> Self {
        Self { image: Some(w), text: Some(w) }
    }

    pub fn for_modality(&self, m: Modality) -> Result<Var, RoutingError> {
        match m {
            Modality::Image => self.image,
            Modality::Text => self.text,
        }
        .ok_or(RoutingError::MissingWeights(m))
    }
}

/// Inference-time restriction of the experts one modality may use.
#[derive(Debug, Clone)]
pub struct ExpertFilter<'a> {
    pub modality: Modality,
    pub pruned: &'a BTreeSet<usize>,
    /// `true`: pruned logits are removed before the softmax (renormalizing
    /// the survivors); `false`: the softmax is left intact and pruned experts
    /// are only skipped by top-K selection.
    pub renormalize: bool,
}

/// Router output for the tokens of one modality.
#[derive(Debug, Clone)]
pub struct ModalityGates {
    pub modality: Modality,
    /// Batch rows, ascending; row `i` of `gates` belongs to batch row `rows[i]`.
    pub rows: Vec<usize>,
    /// Raw (masked) logits `n_m×E`.
    pub logits: Var,
    /// Row-stochastic `n_m×E`.
    pub gates: Var,
    /// Logits plus training noise; present only for training passes.
    pub noisy_logits: Option<Tensor>,
    /// Experts eligible for top-K selection; `None` means all.
    pub selectable: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct GatingMatrix {
    pub num_experts: usize,
    pub parts: Vec<ModalityGates>,
}

impl GatingMatrix {
    pub fn part(&self, m: Modality) -> Option<&ModalityGates> {
        self.parts.iter().find(|p| p.modality == m)
    }

    /// Gate values in batch order, `n×E`.
    pub fn values(&self, tape: &Tape, n: usize) -> Tensor {
        let e = self.num_experts;
        let mut out = Tensor::zeros(&[n, e]);
        for p in &self.parts {
            let g = tape.value(p.gates);
            for (i, &r) in p.rows.iter().enumerate() {
                out.data_mut()[r * e..(r + 1) * e].copy_from_slice(g.row(i));
            }
        }
        out
    }

    /// Gate variable in batch order, `n×E`.
    pub fn full(&self, tape: &Tape, n: usize) -> Result<Var, TensorError> {
        let mut acc: Option<Var> = None;
        for p in &self.parts {
            let s = tape.scatter_add_rows(p.gates, &p.rows, n)?;
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s)?,
            });
        }
        match acc {
            Some(v) => Ok(v),
            None => Ok(tape.constant(Tensor::zeros(&[n, self.num_experts]))),
        }
    }

    /// Top-K selections for every batch row, honouring selection masks.
    pub fn select(&self, tape: &Tape, n: usize, k: usize) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); n];
        for p in &self.parts {
            let g = tape.value(p.gates);
            let sel = top_k_select_masked(&g, k, p.selectable.as_deref());
            for (i, s) in sel.into_iter().enumerate() {
                out[p.rows[i]] = s;
            }
        }
        out
    }
}

/// Indices of the `k` largest entries per row, descending; ties go to the
/// lower expert index. Weights are the raw gate values.
pub fn top_k_select(gates: &Tensor, k: usize) -> Vec<Vec<(usize, f64)>> {
    top_k_select_masked(gates, k, None)
}

pub fn top_k_select_masked(gates: &Tensor, k: usize, selectable: Option<&[bool]>) -> Vec<Vec<(usize, f64)>> {
    let e = gates.last_dim();
    (0..gates.outer_len())
        .map(|i| {
            let row = gates.row(i);
            let mut idx: Vec<usize> = (0..e).filter(|&j| selectable.is_none_or(|s| s[j])).collect();
            // Stable sort keeps ascending expert order among equal gates.
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            idx.truncate(k);
            idx.into_iter().map(|j| (j, row[j])).collect()
        })
        .collect()
}

/// Computes the gating distributions for every modality present in `batch`.
///
/// When `noise` is given (training), `W x + ε` with `ε ~ N(0, σ²)` is recorded
/// alongside the gates; gates and selections always use the noiseless logits.
pub fn route(
    tape: &Tape,
    batch: &TokenBatch,
    weights: &RouterWeights,
    cfg: &RouterConfig,
    mut noise: Option<&mut dyn RngCore>,
    filter: Option<&ExpertFilter<'_>>,
) -> Result<GatingMatrix, RoutingError> {
    let e = cfg.num_experts;
    let mut parts = Vec::new();
    for m in Modality::ALL {
        let rows = batch.rows_of(m);
        if rows.is_empty() {
            continue;
        }
        let w = weights.for_modality(m)?;
        let x = tape.gather_rows(batch.tokens, &rows)?;
        let mut logits = tape.matmul(x, w)?;

        let mut banned = vec![false; e];
        if let Some(pool) = cfg.pool(m) {
            banned.iter_mut().for_each(|b| *b = true);
            for &j in pool {
                banned[j] = false;
            }
        }
        let mut selectable = banned.iter().map(|b| !b).collect::<Vec<_>>();
        if let Some(f) = filter.filter(|f| f.modality == m && !f.pruned.is_empty()) {
            for &j in f.pruned {
                if f.renormalize {
                    banned[j] = true;
                }
                selectable[j] = false;
            }
        }
        if banned.iter().any(|&b| b) {
            let mask = Tensor::vector(banned.iter().map(|&b| if b { MASKED_LOGIT } else { 0.0 }).collect());
            let mask = tape.constant(mask);
            logits = tape.add_row(logits, mask)?;
        }
        let gates = tape.softmax(logits)?;

        let noisy_logits = match noise.as_deref_mut() {
            Some(rng) => {
                let sigma = cfg.sigma();
                let mut v = (*tape.value(logits)).clone();
                for x in v.data_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *x += sigma * z;
                }
                Some(v)
            }
            None => None,
        };
        let selectable = if selectable.iter().all(|&s| s) { None } else { Some(selectable) };
        parts.push(ModalityGates { modality: m, rows, logits, gates, noisy_logits, selectable });
    }
    Ok(GatingMatrix { num_experts: e, parts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(tape: &Tape, x: Tensor, mods: &[Modality]) -> TokenBatch {
        let info = mods
            .iter()
            .enumerate()
            .map(|(i, &m)| TokenInfo { modality: m, example_id: i, position: 0, group_id: 0 })
            .collect();
        TokenBatch { tokens: tape.constant(x), info }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let tape = Tape::new();
        let b = batch(&tape, random(&[3, 4], 1), &[Modality::Image, Modality::Text, Modality::Image]);
        let w = tape.leaf(Tensor::zeros(&[4, 5]));
        let cfg = RouterConfig::joint(5, 1);
        let g = route(&tape, &b, &RouterWeights::shared(w), &cfg, None, None).unwrap();
        let v = g.values(&tape, 3);
        assert!(v.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn hand_evaluated_two_expert_row() {
        let tape = Tape::new();
        let b = batch(&tape, Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), &[Modality::Text]);
        let w = tape.leaf(Tensor::eye(2));
        let g = route(&tape, &b, &RouterWeights::shared(w), &RouterConfig::joint(2, 1), None, None).unwrap();
        let v = g.values(&tape, 1);
        let e = std::f64::consts::E;
        assert!((v.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((v.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((v.data()[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn disjoint_pool_masks_exactly() {
        let tape = Tape::new();
        let mods: Vec<_> = (0..6).map(|i| if i % 2 == 0 { Modality::Text } else { Modality::Image }).collect();
        let b = batch(&tape, random(&[6, 4], 2), &mods);
        let cfg = RouterConfig {
            design: RouterDesign::Disjoint { image: (5..32).collect(), text: (0..5).collect() },
            num_experts: 32,
            top_k: 1,
            noise_sigma: None,
        };
        cfg.validate().unwrap();
        let wi = tape.leaf(random(&[4, 32], 3));
        let wt = tape.leaf(random(&[4, 32], 4));
        let weights = RouterWeights { image: Some(wi), text: Some(wt) };
        let g = route(&tape, &b, &weights, &cfg, None, None).unwrap();
        let text = tape.value(g.part(Modality::Text).unwrap().gates);
        for i in 0..3 {
            assert!(text.row(i)[5..].iter().all(|&p| p == 0.0));
            assert!((text.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        let img = tape.value(g.part(Modality::Image).unwrap().gates);
        for i in 0..3 {
            assert!(img.row(i)[..5].iter().all(|&p| p == 0.0));
        }
        // Masked experts receive exactly zero gradient.
        let gt = g.part(Modality::Text).unwrap().gates;
        let wv = tape.constant(random(&[3, 32], 5));
        let p = tape.mul(gt, wv).unwrap();
        let l = tape.sum(p).unwrap();
        let grads = tape.backward(l).unwrap();
        let gw = grads.get(wt).unwrap();
        for r in 0..4 {
            assert!(gw.row(r)[5..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn noise_only_touches_recorded_noisy_logits() {
        let x = random(&[5, 4], 6);
        let w = random(&[4, 3], 7);
        let mods = [Modality::Image, Modality::Image, Modality::Text, Modality::Text, Modality::Image];
        let run = |training: bool| {
            let tape = Tape::new();
            let b = batch(&tape, x.clone(), &mods);
            let wv = tape.leaf(w.clone());
            let mut rng = stream_rng(1, Stream::Noise, 0);
            let noise: Option<&mut dyn RngCore> = if training { Some(&mut rng) } else { None };
            let g = route(&tape, &b, &RouterWeights::shared(wv), &RouterConfig::joint(3, 1), noise, None).unwrap();
            let has_noise = g.parts.iter().all(|p| p.noisy_logits.is_some());
            (g.values(&tape, 5), has_noise)
        };
        let (a, na) = run(true);
        let (b, nb) = run(false);
        assert_eq!(a, b);
        assert!(na && !nb);
    }

    #[test]
    fn top_k_examples() {
        let g = Tensor::from_rows(&[vec![0.1, 0.7, 0.2]]).unwrap();
        assert_eq!(top_k_select(&g, 1), vec![vec![(1, 0.7)]]);
        let u = Tensor::from_rows(&[vec![0.25; 4]]).unwrap();
        let s = top_k_select(&u, 2);
        assert_eq!(s[0].iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn top_k_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let row: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            let t = Tensor::from_rows(std::slice::from_ref(&row)).unwrap();
            let got = top_k_select(&t, 3);
            // Oracle: repeatedly take the maximal remaining entry.
            let mut taken = vec![false; 8];
            let mut expect = Vec::new();
            for _ in 0..3 {
                let mut best: Option<usize> = None;
                for j in 0..8 {
                    if !taken[j] && best.is_none_or(|b| row[j] > row[b]) {
                        best = Some(j);
                    }
                }
                let b = best.unwrap();
                taken[b] = true;
                expect.push((b, row[b]));
            }
            assert_eq!(got[0], expect);
        }
    }

    #[test]
    fn per_modality_with_equal_weights_matches_joint() {
        let x = random(&[6, 4], 8);
        let w = random(&[4, 5], 9);
        let mods = [Modality::Image, Modality::Text, Modality::Image, Modality::Text, Modality::Text, Modality::Image];
        let tape = Tape::new();
        let b = batch(&tape, x, &mods);
        let wv = tape.leaf(w.clone());
        let joint = route(&tape, &b, &RouterWeights::shared(wv), &RouterConfig::joint(5, 1), None, None).unwrap();
        let wi = tape.leaf(w.clone());
        let wt = tape.leaf(w);
        let cfg = RouterConfig { design: RouterDesign::PerModality, ..RouterConfig::joint(5, 1) };
        let per = route(&tape, &b, &RouterWeights { image: Some(wi), text: Some(wt) }, &cfg, None, None).unwrap();
        assert_eq!(joint.values(&tape, 6), per.values(&tape, 6));
    }

    #[test]
    fn routing_is_permutation_equivariant() {
        let x = random(&[5, 3], 10);
        let w = random(&[3, 4], 11);
        let perm = [3, 0, 4, 1, 2];
        let mut xp = Tensor::zeros(&[5, 3]);
        for (i, &p) in perm.iter().enumerate() {
            xp.data_mut()[i * 3..(i + 1) * 3].copy_from_slice(x.row(p));
        }
        let tape = Tape::new();
        let wv = tape.leaf(w);
        let cfg = RouterConfig::joint(4, 1);
        let mods = [Modality::Text; 5];
        let g = route(&tape, &batch(&tape, x, &mods), &RouterWeights::shared(wv), &cfg, None, None).unwrap();
        let gp = route(&tape, &batch(&tape, xp, &mods), &RouterWeights::shared(wv), &cfg, None, None).unwrap();
        let (a, b) = (g.values(&tape, 5), gp.values(&tape, 5));
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(b.row(i), a.row(p));
        }
    }

    #[test]
    fn missing_modality_weights_is_an_error() {
        let tape = Tape::new();
        let b = batch(&tape, random(&[2, 3], 12), &[Modality::Image, Modality::Text]);
        let w = tape.leaf(random(&[3, 4], 13));
        let weights = RouterWeights { image: Some(w), text: None };
        let cfg = RouterConfig { design: RouterDesign::PerModality, ..RouterConfig::joint(4, 1) };
        let err = route(&tape, &b, &weights, &cfg, None, None).unwrap_err();
        assert_eq!(err, RoutingError::MissingWeights(Modality::Text));
    }

    #[test]
    fn config_validation() {
        assert!(RouterConfig::joint(4, 5).validate().is_err());
        assert!(RouterConfig::joint(4, 0).validate().is_err());
        let overlap = RouterConfig {
            design: RouterDesign::Disjoint { image: vec![0, 1, 2], text: vec![2, 3] },
            ..RouterConfig::joint(4, 1)
        };
        assert!(overlap.validate().is_err());
        let small = RouterConfig {
            design: RouterDesign::Disjoint { image: vec![0, 1, 2], text: vec![3] },
            ..RouterConfig::joint(4, 2)
        };
        assert!(small.validate().is_err());
    }
}
