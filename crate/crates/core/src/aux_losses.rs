// SPDX-License-Identifier: Apache-2.0

//! Router regularizers and their aggregation.
//!
//! Every loss is an [`AuxLoss`] registered under a config name. Losses are
//! evaluated on one `(layer, group)` slice of gating output at a time, then
//! averaged over slices, then over losses, then scaled by `λ`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::routing::{top_k_select, GatingMatrix, Modality, TokenInfo};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Floor inside `log` so that `0 · log 0` evaluates (and differentiates) as 0.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AuxError {
    #[error("aux loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Router outputs of one modality within one `(layer, group)` slice.
#[derive(Debug, Clone)]
pub struct AuxPart {
    pub modality: Modality,
    pub logits: Var,
    pub gates: Var,
    pub noisy_logits: Option<Tensor>,
}

/// Everything a loss may look at for one `(layer, group)` slice.
#[derive(Debug, Clone)]
pub struct AuxInput {
    pub num_experts: usize,
    pub top_k: usize,
    /// Router noise scale, used by the load loss.
    pub sigma: f64,
    pub parts: Vec<AuxPart>,
}

impl AuxInput {
    pub fn part(&self, m: Modality) -> Option<&AuxPart> {
        self.parts.iter().find(|p| p.modality == m)
    }

    /// Restricts `gating` to the tokens of dispatch group `group`.
    pub fn from_gating(
        tape: &Tape,
        gating: &GatingMatrix,
        info: &[TokenInfo],
        group: usize,
        top_k: usize,
        sigma: f64,
    ) -> Result<Self, TensorError> {
        let mut parts = Vec::new();
        for p in &gating.parts {
            let local: Vec<usize> = (0..p.rows.len()).filter(|&i| info[p.rows[i]].group_id == group).collect();
            if local.is_empty() {
                continue;
            }
            let part = if local.len() == p.rows.len() {
                AuxPart { modality: p.modality, logits: p.logits, gates: p.gates, noisy_logits: p.noisy_logits.clone() }
            } else {
                let noisy = p.noisy_logits.as_ref().map(|t| {
                    let e = t.last_dim();
                    let data = local.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
                    Tensor::new(vec![local.len(), e], data).expect("row subset")
                });
                AuxPart {
                    modality: p.modality,
                    logits: tape.gather_rows(p.logits, &local)?,
                    gates: tape.gather_rows(p.gates, &local)?,
                    noisy_logits: noisy,
                }
            };
            parts.push(part);
        }
        Ok(Self { num_experts: gating.num_experts, top_k, sigma, parts })
    }

    fn all_rows(&self, tape: &Tape, pick: impl Fn(&AuxPart) -> Var) -> Result<Option<Var>, TensorError> {
        let vars: Vec<Var> = self.parts.iter().map(pick).collect();
        match vars.len() {
            0 => Ok(None),
            1 => Ok(Some(vars[0])),
            _ => tape.concat_rows(&vars).map(Some),
        }
    }
}

/// A router regularizer. Returns `None` when the slice holds no tokens the
/// loss applies to.
pub trait AuxLoss: Send + Sync {
    fn name(&self) -> &str;
    fn compute(&self, tape: &Tape, input: &AuxInput) -> Result<Option<Var>, TensorError>;
}

fn square(tape: &Tape, x: Var) -> Result<Var, TensorError> {
    tape.mul(x, x)
}

/// `(std(v) / mean(v))²`.
fn cv_squared(tape: &Tape, v: Var) -> Result<Var, TensorError> {
    let ratio = tape.div(tape.std(v)?, tape.mean(v)?)?;
    square(tape, ratio)
}

/// `Σ p log p` per row of a 2-D matrix, or over a whole vector.
fn neg_entropy(tape: &Tape, p: Var) -> Result<Var, TensorError> {
    let plogp = tape.mul(p, tape.log_clamped(p, LOG_FLOOR)?)?;
    if tape.shape(p).len() == 2 {
        tape.sum_axis1(plogp)
    } else {
        tape.sum(plogp)
    }
}

/// Mean per-token entropy of the rows of `gates`.
pub fn local_entropy(tape: &Tape, gates: Var) -> Result<Var, TensorError> {
    tape.neg(tape.mean(neg_entropy(tape, gates)?)?)
}

/// Entropy of the token-averaged routing distribution.
pub fn marginal_entropy(tape: &Tape, gates: Var) -> Result<Var, TensorError> {
    tape.neg(neg_entropy(tape, tape.mean_axis0(gates)?)?)
}

#[derive(Debug, Default)]
pub struct ImportanceLoss;

impl AuxLoss for ImportanceLoss {
    fn name(&self) -> &str {
        "importance"
    }

    fn compute(&self, tape: &Tape, input: &AuxInput) -> Result<Option<Var>, TensorError> {
        let Some(g) = input.all_rows(tape, |p| p.gates)? else { return Ok(None) };
        Ok(Some(cv_squared(tape, tape.sum_axis0(g)?)?))
    }
}

/// Per-token probability that each expert stays in the top `k` under a fresh
/// noise draw, holding the observed K-th noisy logit fixed.
pub fn load_probabilities(
    tape: &Tape,
    logits: Var,
    noisy: Option<&Tensor>,
    k: usize,
    sigma: f64,
) -> Result<Var, TensorError> {
    let clean = tape.value(logits);
    let reference = noisy.unwrap_or(&clean);
    let e = reference.last_dim();
    let mut threshold = Vec::with_capacity(reference.numel());
    for i in 0..reference.outer_len() {
        let mut row = reference.row(i).to_vec();
        row.sort_by(|a, b| b.total_cmp(a));
        let eta = row[k.min(e) - 1];
        threshold.extend(std::iter::repeat_n(eta, e));
    }
    let eta = tape.constant(Tensor::new(clean.shape().to_vec(), threshold)?);
    let z = tape.scale(tape.sub(eta, logits)?, 1.0 / sigma)?;
    tape.add_scalar(tape.neg(tape.norm_cdf(z)?)?, 1.0)
}

#[derive(Debug, Default)]
pub struct LoadLoss;

impl AuxLoss for LoadLoss {
    fn name(&self) -> &str {
        "load"
    }

    fn compute(&self, tape: &Tape, input: &AuxInput) -> Result<Option<Var>, TensorError> {
        if input.parts.is_empty() {
            return Ok(None);
        }
        let mut probs = Vec::new();
        for p in &input.parts {
            probs.push(load_probabilities(tape, p.logits, p.noisy_logits.as_ref(), input.top_k, input.sigma)?);
        }
        let all = if probs.len() == 1 { probs[0] } else { tape.concat_rows(&probs)? };
        Ok(Some(cv_squared(tape, tape.sum_axis0(all)?)?))
    }
}

#[derive(Debug, Default)]
pub struct ZLoss;

impl AuxLoss for ZLoss {
    fn name(&self) -> &str {
        "zloss"
    }

    fn compute(&self, tape: &Tape, input: &AuxInput) -> Result<Option<Var>, TensorError> {
        let Some(a) = input.all_rows(tape, |p| p.logits)? else { return Ok(None) };
        let lse = tape.logsumexp(a)?;
        Ok(Some(tape.mean(square(tape, lse)?)?))
    }
}

#[derive(Debug)]
pub struct LocalEntropyLoss {
    pub modality: Modality,
    name: String,
}

impl LocalEntropyLoss {
    pub fn new(modality: Modality) -> Self {
        Self { modality, name: format!("local_ent_{modality}") }
    }
}

impl AuxLoss for LocalEntropyLoss {
    fn name(&self) -> &str {
        &self.name
    }

    fn compute(&self, tape: &Tape, input: &AuxInput) -> Result<Option<Var>, TensorError> {
        input.part(self.modality).map(|p| local_entropy(tape, p.gates)).transpose()
    }
}

/// `max(0, τ − H(p̃))`.
#[derive(Debug)]
pub struct GlobalEntropyLoss {
    pub modality: Modality,
    pub tau: f64,
    name: String,
}

impl GlobalEntropyLoss {
    pub fn new(modality: Modality, tau: f64) -> Self {
        Self { modality, tau, name: format!("global_ent_{modality}") }
    }
}

impl AuxLoss for GlobalEntropyLoss {
    fn name(&self) -> &str {
        &self.name
    }

    fn compute(&self, tape: &Tape, input: &AuxInput) -> Result<Option<Var>, TensorError> {
        let Some(p) = input.part(self.modality) else { return Ok(None) };
        let neg_h = neg_entropy(tape, tape.mean_axis0(p.gates)?)?;
        Ok(Some(tape.relu(tape.add_scalar(neg_h, self.tau)?)?))
    }
}

/// `(log K − local entropy)²`.
#[derive(Debug)]
pub struct TargetEntropyLoss {
    pub modality: Modality,
    name: String,
}

impl TargetEntropyLoss {
    pub fn new(modality: Modality) -> Self {
        Self { modality, name: format!("target_ent_{modality}") }
    }
}

impl AuxLoss for TargetEntropyLoss {
    fn name(&self) -> &str {
        &self.name
    }

    fn compute(&self, tape: &Tape, input: &AuxInput) -> Result<Option<Var>, TensorError> {
        let Some(p) = input.part(self.modality) else { return Ok(None) };
        let h = local_entropy(tape, p.gates)?;
        let d = tape.add_scalar(tape.neg(h)?, (input.top_k as f64).ln())?;
        Ok(Some(square(tape, d)?))
    }
}

/// Mean binary entropy of (top-K mass, remaining mass) per token.
#[derive(Debug)]
pub struct MergedEntropyLoss {
    pub modality: Modality,
    name: String,
}

impl MergedEntropyLoss {
    pub fn new(modality: Modality) -> Self {
        Self { modality, name: format!("merged_ent_{modality}") }
    }
}

impl AuxLoss for MergedEntropyLoss {
    fn name(&self) -> &str {
        &self.name
    }

    fn compute(&self, tape: &Tape, input: &AuxInput) -> Result<Option<Var>, TensorError> {
        let Some(p) = input.part(self.modality) else { return Ok(None) };
        let g = tape.value(p.gates);
        let n = g.rows();
        let k = input.top_k;
        let pairs: Vec<(usize, usize)> = top_k_select(&g, k)
            .into_iter()
            .enumerate()
            .flat_map(|(i, sel)| sel.into_iter().map(move |(j, _)| (i, j)))
            .collect();
        let top = tape.reshape(tape.pick(p.gates, &pairs)?, &[n, k])?;
        let s = tape.sum_axis1(top)?;
        let rest = tape.add_scalar(tape.neg(s)?, 1.0)?;
        let both = tape.add(neg_entropy(tape, s)?, neg_entropy(tape, rest)?)?;
        Ok(Some(tape.scale(both, -1.0 / n as f64)?))
    }
}

/// `(1/M) Σ_m H(p̃_m) − H((1/M) Σ_m p̃_m)` over the modalities present.
#[derive(Debug, Default)]
pub struct ModalityMiLoss;

impl AuxLoss for ModalityMiLoss {
    fn name(&self) -> &str {
        "mi_modality"
    }

    fn compute(&self, tape: &Tape, input: &AuxInput) -> Result<Option<Var>, TensorError> {
        if input.parts.is_empty() {
            return Ok(None);
        }
        let m = input.parts.len() as f64;
        let mut sum_h: Option<Var> = None;
        let mut sum_p: Option<Var> = None;
        for p in &input.parts {
            let marginal = tape.mean_axis0(p.gates)?;
            let h = tape.neg(neg_entropy(tape, marginal)?)?;
            sum_h = Some(match sum_h {
                None => h,
                Some(a) => tape.add(a, h)?,
            });
            sum_p = Some(match sum_p {
                None => marginal,
                Some(a) => tape.add(a, marginal)?,
            });
        }
        let mean_h = tape.scale(sum_h.expect("parts non-empty"), 1.0 / m)?;
        let mixture = tape.scale(sum_p.expect("parts non-empty"), 1.0 / m)?;
        let h_mix = tape.neg(neg_entropy(tape, mixture)?)?;
        Ok(Some(tape.sub(mean_h, h_mix)?))
    }
}

pub const DEFAULT_WEIGHT: f64 = 0.04;

fn default_active() -> Vec<String> {
    ["load", "zloss", "global_ent_image", "global_ent_text", "local_ent_text"].map(String::from).to_vec()
}

fn default_weight() -> f64 {
    DEFAULT_WEIGHT
}

fn default_tau_text() -> f64 {
    4f64.ln()
}

fn default_tau_image() -> f64 {
    5f64.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxLossConfig {
    #[serde(default = "default_active")]
    pub active: Vec<String>,
    /// Aggregate weight `λ`.
    #[serde(default = "default_weight")]
    pub weight: f64,
    #[serde(default = "default_tau_image")]
    pub tau_image: f64,
    #[serde(default = "default_tau_text")]
    pub tau_text: f64,
}

impl Default for AuxLossConfig {
    fn default() -> Self {
        Self { active: default_active(), weight: DEFAULT_WEIGHT, tau_image: default_tau_image(), tau_text: default_tau_text() }
    }
}

/// Loss names understood by [`AuxLossRegistry::with_builtin`].
pub fn builtin_names() -> Vec<String> {
    let mut names: Vec<String> = ["importance", "load", "zloss", "mi_modality"].map(String::from).to_vec();
    for kind in ["local_ent", "global_ent", "target_ent", "merged_ent"] {
        for m in Modality::ALL {
            names.push(format!("{kind}_{m}"));
        }
    }
    names
}

impl AuxLossConfig {
    pub fn with_active<S: AsRef<str>>(active: &[S]) -> Self {
        Self { active: active.iter().map(|s| s.as_ref().to_string()).collect(), ..Self::default() }
    }

    pub fn tau(&self, m: Modality) -> f64 {
        match m {
            Modality::Image => self.tau_image,
            Modality::Text => self.tau_text,
        }
    }

    /// Checks names and ranges against the model's expert count.
    pub fn validate(&self, num_experts: usize, top_k: usize) -> Result<(), AuxError> {
        let known = builtin_names();
        let mut seen = BTreeSet::new();
        for name in &self.active {
            if !known.contains(name) {
                return Err(AuxError::Config(format!("unknown aux loss {name:?}")));
            }
            if !seen.insert(name) {
                return Err(AuxError::Config(format!("aux loss {name:?} listed twice")));
            }
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(AuxError::Config(format!("weight must be >= 0, got {}", self.weight)));
        }
        let max_tau = (num_experts as f64).ln();
        for m in Modality::ALL {
            let tau = self.tau(m);
            if !(0.0..=max_tau + 1e-12).contains(&tau) {
                return Err(AuxError::Config(format!("tau_{m} = {tau} outside [0, ln {num_experts}]")));
            }
            let t = format!("target_ent_{m}");
            let g = format!("merged_ent_{m}");
            if seen.contains(&t) && seen.contains(&g) {
                return Err(AuxError::Config(format!("{t} and {g} are alternatives; pick one")));
            }
            if seen.contains(&g) && top_k >= num_experts {
                return Err(AuxError::Config(format!("{g} needs K < E")));
            }
        }
        Ok(())
    }

    /// The active set with each modality's plain local loss dropped when a
    /// target or merged variant replaces it.
    pub fn effective_active(&self) -> Vec<String> {
        let replaced: BTreeSet<Modality> = Modality::ALL
            .into_iter()
            .filter(|m| self.active.iter().any(|n| *n == format!("target_ent_{m}") || *n == format!("merged_ent_{m}")))
            .collect();
        self.active
            .iter()
            .filter(|n| !replaced.iter().any(|m| **n == format!("local_ent_{m}")))
            .cloned()
            .collect()
    }
}

/// Auxiliary losses by name.
#[derive(Clone, Default)]
pub struct AuxLossRegistry {
    entries: BTreeMap<String, Arc<dyn AuxLoss>>,
}

impl fmt::Debug for AuxLossRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

impl AuxLossRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// All built-in losses, thresholds taken from `cfg`.
    pub fn with_builtin(cfg: &AuxLossConfig) -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(ImportanceLoss));
        r.register(Arc::new(LoadLoss));
        r.register(Arc::new(ZLoss));
        r.register(Arc::new(ModalityMiLoss));
        for m in Modality::ALL {
            r.register(Arc::new(LocalEntropyLoss::new(m)));
            r.register(Arc::new(GlobalEntropyLoss::new(m, cfg.tau(m))));
            r.register(Arc::new(TargetEntropyLoss::new(m)));
            r.register(Arc::new(MergedEntropyLoss::new(m)));
        }
        r
    }

    pub fn register(&mut self, loss: Arc<dyn AuxLoss>) {
        self.entries.insert(loss.name().to_string(), loss);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn AuxLoss>> {
        self.entries.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Resolves the effective active set of `cfg`, in config order.
    pub fn resolve(&self, cfg: &AuxLossConfig) -> Result<Vec<Arc<dyn AuxLoss>>, AuxError> {
        let active = cfg.effective_active();
        if active.is_empty() {
            return Err(AuxError::Config("no active aux losses".into()));
        }
        active
            .iter()
            .map(|n| self.get(n).ok_or_else(|| AuxError::Config(format!("unknown aux loss {n:?}"))))
            .collect()
    }
}

/// Aggregated auxiliary term plus its components.
#[derive(Debug, Clone)]
pub struct AuxOutcome {
    /// `λ · mean over losses`, on the tape.
    pub total: Var,
    pub report: AuxReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxReport {
    /// Each loss averaged over layers and groups.
    pub losses: BTreeMap<String, f64>,
    /// `per_layer[l][name]`: loss averaged over groups of MoE layer `l`.
    pub per_layer: Vec<BTreeMap<String, f64>>,
    pub total: f64,
}

/// Evaluates `losses` on every slice and aggregates.
///
/// `slices[l]` holds the per-group inputs of MoE layer `l`. A loss with no
/// applicable slice (e.g. a text loss on an image-only batch) is left out of
/// the average.
pub fn aggregate(
    tape: &Tape,
    losses: &[Arc<dyn AuxLoss>],
    slices: &[Vec<AuxInput>],
    weight: f64,
) -> Result<AuxOutcome, AuxError> {
    if losses.is_empty() {
        return Err(AuxError::Config("no active aux losses".into()));
    }
    let mut per_layer = vec![BTreeMap::new(); slices.len()];
    let mut loss_means = Vec::new();
    let mut report = BTreeMap::new();
    for loss in losses {
        let mut all = Vec::new();
        for (l, groups) in slices.iter().enumerate() {
            let mut vals = Vec::new();
            for input in groups {
                if let Some(v) = loss.compute(tape, input)? {
                    vals.push(v);
                }
            }
            if !vals.is_empty() {
                let layer_mean = vals.iter().map(|&v| tape.item(v)).sum::<f64>() / vals.len() as f64;
                per_layer[l].insert(loss.name().to_string(), layer_mean);
            }
            all.extend(vals);
        }
        if all.is_empty() {
            continue;
        }
        let mean = mean_of(tape, &all)?;
        report.insert(loss.name().to_string(), tape.item(mean));
        loss_means.push(mean);
    }
    let total = if loss_means.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        tape.scale(mean_of(tape, &loss_means)?, weight)?
    };
    let report = AuxReport { losses: report, per_layer, total: tape.item(total) };
    Ok(AuxOutcome { total, report })
}

fn mean_of(tape: &Tape, vars: &[Var]) -> Result<Var, TensorError> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    tape.scale(acc, 1.0 / vars.len() as f64)
}
