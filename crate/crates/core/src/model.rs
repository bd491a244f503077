// SPDX-License-Identifier: Apache-2.0

//! One-tower contrastive encoder with interleaved sparse MoE layers.
//!
//! A batch of `n` pairs is laid out as `n·L_img` image tokens followed by
//! `n·L_txt` text tokens, each example contiguous. Attention runs within one
//! example's sequence of one modality, so the two halves of a pair never see
//! each other; everything else is shared between modalities.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aux_losses::{aggregate, AuxError, AuxInput, AuxLoss, AuxLossConfig, AuxLossRegistry, AuxReport};
use crate::dispatch::{builtin_priorities, combine, dispatch, CapacityConfig, DispatchPlan, PriorityOrder, PriorityRegistry};
use crate::pruning::{PruneMode, PruneSet};
use crate::rng::{stream_rng, Stream};
use crate::routing::{route, ExpertFilter, GatingMatrix, Modality, RouterConfig, RouterWeights, RoutingError, TokenBatch, TokenInfo};
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Aux(#[from] AuxError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// 1-based block indices whose MLP is a sparse MoE layer.
    pub moe_layers: Vec<usize>,
    pub router: RouterConfig,
    #[serde(default)]
    pub capacity: CapacityConfig,
    /// Name of the dispatch priority ordering.
    #[serde(default = "default_priority")]
    pub priority: String,
    pub output_dim: usize,
    /// Initial value of the learned similarity scale `T = exp(t)`.
    #[serde(default = "default_temperature")]
    pub temperature_init: f64,
    pub vocab_size: usize,
    pub image_token_dim: usize,
    pub seq_len_image: usize,
    pub seq_len_text: usize,
    /// Separate encoder weights per modality instead of one shared tower.
    #[serde(default)]
    pub two_tower: bool,
}

fn default_priority() -> String {
    "bpr_max".into()
}

fn default_temperature() -> f64 {
    10.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            depth: 4,
            heads: 2,
            mlp_hidden: 64,
            moe_layers: vec![2, 4],
            router: RouterConfig::joint(8, 1),
            capacity: CapacityConfig::default(),
            priority: default_priority(),
            output_dim: 32,
            temperature_init: default_temperature(),
            vocab_size: 64,
            image_token_dim: 16,
            seq_len_image: 32,
            seq_len_text: 8,
            two_tower: false,
        }
    }
}

impl ModelConfig {
    pub fn num_experts(&self) -> usize {
        self.router.num_experts
    }

    pub fn top_k(&self) -> usize {
        self.router.top_k
    }

    pub fn is_moe(&self, layer: usize) -> bool {
        self.moe_layers.contains(&layer)
    }

    pub fn validate(&self, priorities: &PriorityRegistry) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return err(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.mlp_hidden == 0 || self.output_dim == 0 {
            return err("mlp_hidden and output_dim must be positive".into());
        }
        if self.vocab_size == 0 || self.image_token_dim == 0 || self.seq_len_image == 0 || self.seq_len_text == 0 {
            return err("vocab, image token width and sequence lengths must be positive".into());
        }
        let mut seen = BTreeSet::new();
        for &l in &self.moe_layers {
            if l == 0 || l > self.depth {
                return err(format!("MoE layer {l} outside 1..={}", self.depth));
            }
            if !seen.insert(l) {
                return err(format!("MoE layer {l} listed twice"));
            }
        }
        if !(self.temperature_init > 0.0 && self.temperature_init.is_finite()) {
            return err(format!("temperature_init must be > 0, got {}", self.temperature_init));
        }
        self.router.validate()?;
        self.capacity.validate().map_err(ModelError::Config)?;
        if priorities.get(&self.priority).is_none() {
            return err(format!("unknown priority ordering {:?}", self.priority));
        }
        Ok(())
    }

    /// Parameter-name prefix of block `layer` for the tower of modality `m`.
    fn block_prefix(&self, m: Modality, layer: usize) -> String {
        if self.two_tower {
            format!("{m}/block{layer}")
        } else {
            format!("block{layer}")
        }
    }

    fn tower_prefix(&self, m: Modality) -> String {
        if self.two_tower {
            format!("{m}/")
        } else {
            String::new()
        }
    }

    fn towers(&self) -> Vec<Option<Modality>> {
        if self.two_tower {
            Modality::ALL.map(Some).to_vec()
        } else {
            vec![None]
        }
    }
}

/// `n` paired examples; either modality may be absent for single-modality
/// inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub n: usize,
    /// `[n·L_img, image_token_dim]`, example-major.
    pub images: Option<Tensor>,
    /// `n·L_txt` token ids, example-major.
    pub texts: Option<Vec<usize>>,
    /// Latent class of each example (synthetic data only).
    pub classes: Vec<usize>,
}

impl PairBatch {
    pub fn only(&self, m: Modality) -> PairBatch {
        PairBatch {
            n: self.n,
            images: if m == Modality::Image { self.images.clone() } else { None },
            texts: if m == Modality::Text { self.texts.clone() } else { None },
            classes: self.classes.clone(),
        }
    }
}

/// Per-pass switches. Noise and shuffle streams are owned so a forward pass
/// can be replayed from its counters alone.
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    /// Router noise source; `Some` for training passes.
    pub noise: Option<ChaCha8Rng>,
    pub shuffle: ChaCha8Rng,
    /// Replaces the configured capacity (slack / override).
    pub capacity: Option<CapacityConfig>,
    pub prune: Option<PruneSet>,
    /// Blocks whose MLP branch is skipped entirely.
    pub skip_mlp: BTreeSet<usize>,
    /// Number of dispatch groups, each a contiguous range of examples.
    pub groups: Option<usize>,
    /// Replaces the recorded noisy logits of each MoE layer (in trace order),
    /// freezing the load-loss thresholds across repeated passes.
    pub pinned_noise: Option<Vec<Vec<Tensor>>>,
}

impl ForwardOptions {
    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            noise: Some(stream_rng(seed, Stream::Noise, step)),
            shuffle: stream_rng(seed, Stream::Shuffle, step),
            capacity: None,
            prune: None,
            skip_mlp: BTreeSet::new(),
            groups: None,
            pinned_noise: None,
        }
    }

    pub fn eval(seed: u64) -> Self {
        Self { noise: None, ..Self::train(seed, u64::MAX) }
    }
}

/// Routing record of one MoE layer in one pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// 1-based block index.
    pub layer: usize,
    /// Set for two-tower models: the tower this trace belongs to.
    pub tower: Option<Modality>,
    pub info: Arc<Vec<TokenInfo>>,
    pub gating: GatingMatrix,
    /// Gate values in batch order, `n_tokens×E`.
    pub gates: Tensor,
    pub selections: Vec<Vec<(usize, f64)>>,
    pub plan: DispatchPlan,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    /// L2-normalized projections, `[n, output_dim]`.
    pub image: Option<Var>,
    pub text: Option<Var>,
    /// Pooled pre-projection representations.
    pub pooled_image: Option<Var>,
    pub pooled_text: Option<Var>,
    pub traces: Vec<LayerTrace>,
}

impl Encoded {
    /// Load-loss reference logits of every MoE layer: the noisy logits of a
    /// training pass, the clean ones otherwise.
    pub fn noise_pins(&self, tape: &Tape) -> Vec<Vec<Tensor>> {
        self.traces
            .iter()
            .map(|t| {
                t.gating
                    .parts
                    .iter()
                    .map(|p| p.noisy_logits.clone().unwrap_or_else(|| (*tape.value(p.logits)).clone()))
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Var,
    pub contrastive: Var,
    pub aux: Option<AuxReport>,
    pub encoded: Encoded,
}

/// Resolved auxiliary-loss setup.
#[derive(Clone)]
pub struct AuxPlan {
    pub losses: Vec<Arc<dyn AuxLoss>>,
    pub weight: f64,
}

impl std::fmt::Debug for AuxPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = self.losses.iter().map(|l| l.name()).collect();
        f.debug_struct("AuxPlan").field("losses", &names).field("weight", &self.weight).finish()
    }
}

impl AuxPlan {
    pub fn from_config(cfg: &AuxLossConfig, registry: &AuxLossRegistry) -> Result<Self> {
        Ok(Self { losses: registry.resolve(cfg)?, weight: cfg.weight })
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    priority: Arc<dyn PriorityOrder>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("cfg", &self.cfg).field("priority", &self.priority.name()).finish()
    }
}

fn param(p: &BoundParams, name: &str) -> Result<Var> {
    p.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

/// Normal samples redrawn until within two standard deviations.
fn truncated_normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        Self::with_registry(cfg, builtin_priorities())
    }

    pub fn with_registry(cfg: ModelConfig, priorities: &PriorityRegistry) -> Result<Self> {
        cfg.validate(priorities)?;
        let priority = priorities.get(&cfg.priority).expect("validated");
        Ok(Self { cfg, priority })
    }

    pub fn priority(&self) -> &dyn PriorityOrder {
        &*self.priority
    }

    /// Fresh parameters drawn from the init stream of `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let c = &self.cfg;
        let (d, h) = (c.width, c.mlp_hidden);
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut ps = ParamStore::new();
        let lin = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
            normal_tensor(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
        };
        for tower in c.towers() {
            let t = tower.map(|m| format!("{m}/")).unwrap_or_default();
            ps.insert(format!("{t}embed/image/w"), lin(&mut rng, c.image_token_dim, d));
            ps.insert(format!("{t}embed/image/b"), Tensor::zeros(&[d]));
            ps.insert(format!("{t}embed/image/pos"), normal_tensor(&mut rng, &[c.seq_len_image, d], 0.02));
            ps.insert(format!("{t}embed/text/table"), normal_tensor(&mut rng, &[c.vocab_size, d], 1.0));
            ps.insert(format!("{t}embed/text/pos"), normal_tensor(&mut rng, &[c.seq_len_text, d], 0.02));
            for l in 1..=c.depth {
                let b = format!("{t}block{l}");
                for ln in ["ln1", "ln2"] {
                    ps.insert(format!("{b}/{ln}/g"), Tensor::full(&[d], 1.0));
                    ps.insert(format!("{b}/{ln}/b"), Tensor::zeros(&[d]));
                }
                for w in ["wq", "wk", "wv", "wo"] {
                    ps.insert(format!("{b}/attn/{w}"), lin(&mut rng, d, d));
                }
                let w1 = lin(&mut rng, d, h);
                let w2 = lin(&mut rng, h, d);
                if c.is_moe(l) {
                    let e = c.num_experts();
                    for (_, name) in c.router.weight_names() {
                        if !ps.contains(&format!("{b}/{name}")) {
                            ps.insert(format!("{b}/{name}"), truncated_normal_tensor(&mut rng, &[d, e], 0.02));
                        }
                    }
                    for x in 0..e {
                        let (w1, w2) = if x == 0 { (w1.clone(), w2.clone()) } else { (lin(&mut rng, d, h), lin(&mut rng, h, d)) };
                        ps.insert(format!("{b}/expert{x}/w1"), w1);
                        ps.insert(format!("{b}/expert{x}/b1"), Tensor::zeros(&[h]));
                        ps.insert(format!("{b}/expert{x}/w2"), w2);
                        ps.insert(format!("{b}/expert{x}/b2"), Tensor::zeros(&[d]));
                    }
                } else {
                    ps.insert(format!("{b}/mlp/w1"), w1);
                    ps.insert(format!("{b}/mlp/b1"), Tensor::zeros(&[h]));
                    ps.insert(format!("{b}/mlp/w2"), w2);
                    ps.insert(format!("{b}/mlp/b2"), Tensor::zeros(&[d]));
                }
            }
            ps.insert(format!("{t}final_ln/g"), Tensor::full(&[d], 1.0));
            ps.insert(format!("{t}final_ln/b"), Tensor::zeros(&[d]));
        }
        ps.insert("head/image", lin(&mut rng, d, c.output_dim));
        ps.insert("head/text", lin(&mut rng, d, c.output_dim));
        ps.insert("head/log_scale", Tensor::scalar(c.temperature_init.ln()));
        ps
    }

    /// Token info for the rows of `batch`, images first.
    pub fn token_info(&self, batch: &PairBatch, groups: usize) -> Vec<TokenInfo> {
        let groups = groups.clamp(1, batch.n.max(1));
        let group_of = |j: usize| j * groups / batch.n;
        let mut info = Vec::new();
        if batch.images.is_some() {
            for j in 0..batch.n {
                for p in 0..self.cfg.seq_len_image {
                    info.push(TokenInfo { modality: Modality::Image, example_id: j, position: p, group_id: group_of(j) });
                }
            }
        }
        if batch.texts.is_some() {
            for j in 0..batch.n {
                for p in 0..self.cfg.seq_len_text {
                    info.push(TokenInfo { modality: Modality::Text, example_id: j, position: p, group_id: group_of(j) });
                }
            }
        }
        info
    }

    fn check_batch(&self, batch: &PairBatch) -> Result<()> {
        let c = &self.cfg;
        if batch.n == 0 {
            return Err(ModelError::Input("empty batch".into()));
        }
        if let Some(img) = &batch.images {
            if img.shape() != [batch.n * c.seq_len_image, c.image_token_dim] {
                return Err(ModelError::Input(format!(
                    "image tokens {:?}, expected [{}, {}]",
                    img.shape(),
                    batch.n * c.seq_len_image,
                    c.image_token_dim
                )));
            }
        }
        if let Some(ids) = &batch.texts {
            if ids.len() != batch.n * c.seq_len_text {
                return Err(ModelError::Input(format!("{} text ids, expected {}", ids.len(), batch.n * c.seq_len_text)));
            }
            if let Some(&bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
                return Err(ModelError::Input(format!("text id {bad} outside vocabulary of {}", c.vocab_size)));
            }
        }
        if batch.images.is_none() && batch.texts.is_none() {
            return Err(ModelError::Input("batch carries no modality".into()));
        }
        Ok(())
    }

    /// Token embeddings plus positions for one modality of `batch`.
    pub fn embed(&self, tape: &Tape, p: &BoundParams, batch: &PairBatch, m: Modality) -> Result<Option<Var>> {
        let c = &self.cfg;
        let t = c.tower_prefix(m);
        match m {
            Modality::Image => {
                let Some(img) = &batch.images else { return Ok(None) };
                let x = tape.constant(img.clone());
                let x = tape.matmul(x, param(p, &format!("{t}embed/image/w"))?)?;
                let x = tape.add_row(x, param(p, &format!("{t}embed/image/b"))?)?;
                let pos_idx: Vec<usize> = (0..batch.n).flat_map(|_| 0..c.seq_len_image).collect();
                let pos = tape.gather_rows(param(p, &format!("{t}embed/image/pos"))?, &pos_idx)?;
                Ok(Some(tape.add(x, pos)?))
            }
            Modality::Text => {
                let Some(ids) = &batch.texts else { return Ok(None) };
                let x = tape.gather_rows(param(p, &format!("{t}embed/text/table"))?, ids)?;
                let pos_idx: Vec<usize> = (0..batch.n).flat_map(|_| 0..c.seq_len_text).collect();
                let pos = tape.gather_rows(param(p, &format!("{t}embed/text/pos"))?, &pos_idx)?;
                Ok(Some(tape.add(x, pos)?))
            }
        }
    }

    fn layer_norm(&self, tape: &Tape, p: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
        let y = tape.layer_norm(x, LN_EPS)?;
        let y = tape.mul_row(y, param(p, &format!("{prefix}/g"))?)?;
        Ok(tape.add_row(y, param(p, &format!("{prefix}/b"))?)?)
    }

    /// Multi-head self-attention within each contiguous sequence of `segments`.
    fn attention(&self, tape: &Tape, p: &BoundParams, h: Var, segments: &[(usize, usize)], b: &str) -> Result<Var> {
        let heads = self.cfg.heads;
        let dh = self.cfg.width / heads;
        let q_all = tape.matmul(h, param(p, &format!("{b}/attn/wq"))?)?;
        let k_all = tape.matmul(h, param(p, &format!("{b}/attn/wk"))?)?;
        let v_all = tape.matmul(h, param(p, &format!("{b}/attn/wv"))?)?;
        let mut outs = Vec::new();
        let mut start = 0;
        for &(rows, seq_len) in segments {
            let sl = |a: Var| tape.slice_rows(a, start, rows).and_then(|s| tape.split_heads(s, seq_len, heads));
            let (q, k, v) = (sl(q_all)?, sl(k_all)?, sl(v_all)?);
            let scores = tape.scale(tape.bmm(q, tape.transpose_last2(k)?)?, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax(scores)?;
            outs.push(tape.merge_heads(tape.bmm(attn, v)?, heads)?);
            start += rows;
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs)? };
        Ok(tape.matmul(merged, param(p, &format!("{b}/attn/wo"))?)?)
    }

    fn mlp(&self, tape: &Tape, p: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
        let h = tape.matmul(x, param(p, &format!("{prefix}/w1"))?)?;
        let h = tape.gelu(tape.add_row(h, param(p, &format!("{prefix}/b1"))?)?)?;
        let y = tape.matmul(h, param(p, &format!("{prefix}/w2"))?)?;
        Ok(tape.add_row(y, param(p, &format!("{prefix}/b2"))?)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn moe(
        &self,
        tape: &Tape,
        p: &BoundParams,
        x: Var,
        info: &Arc<Vec<TokenInfo>>,
        layer: usize,
        tower: Option<Modality>,
        index: usize,
        opts: &mut ForwardOptions,
    ) -> Result<(Var, LayerTrace)> {
        let c = &self.cfg;
        let b = c.block_prefix(tower.unwrap_or(Modality::Image), layer);
        let names = c.router.weight_names();
        let weights = RouterWeights {
            image: p.get(&format!("{b}/{}", names[0].1)),
            text: p.get(&format!("{b}/{}", names[1].1)),
        };
        let n = info.len();
        let batch = TokenBatch { tokens: x, info: (**info).clone() };
        let filter_set;
        let filter = match &opts.prune {
            Some(ps) => match ps.pruned(layer) {
                Some(set) => {
                    filter_set = set.clone();
                    Some(ExpertFilter {
                        modality: ps.modality,
                        pruned: &filter_set,
                        renormalize: ps.mode == PruneMode::RouterDrop,
                    })
                }
                None => None,
            },
            None => None,
        };
        let noise = opts.noise.as_mut().map(|r| r as &mut dyn RngCore);
        let mut gating = route(tape, &batch, &weights, &c.router, noise, filter.as_ref())?;
        if let Some(pins) = opts.pinned_noise.as_ref().and_then(|p| p.get(index)) {
            for (part, pin) in gating.parts.iter_mut().zip(pins) {
                part.noisy_logits = Some(pin.clone());
            }
        }
        let selections = gating.select(tape, n, c.top_k());
        let cap = opts.capacity.as_ref().unwrap_or(&c.capacity);
        let plan = dispatch(info, &selections, c.num_experts(), c.top_k(), cap, &*self.priority, &mut opts.shuffle);
        let mut outputs = Vec::with_capacity(c.num_experts());
        for (e, rows) in plan.expert_rows.iter().enumerate() {
            if rows.is_empty() {
                outputs.push(None);
                continue;
            }
            let xe = tape.gather_rows(x, rows)?;
            outputs.push(Some(self.mlp(tape, p, xe, &format!("{b}/expert{e}"))?));
        }
        let gates_full = gating.full(tape, n)?;
        let out = combine(tape, &plan, gates_full, &outputs, c.width)?;
        let gates = gating.values(tape, n);
        let trace = LayerTrace { layer, tower, info: info.clone(), gating, gates, selections, plan };
        Ok((out, trace))
    }

    /// Runs the blocks over `x` (rows described by `info`) and pools.
    #[allow(clippy::too_many_arguments)]
    fn tower(
        &self,
        tape: &Tape,
        p: &BoundParams,
        mut x: Var,
        info: Arc<Vec<TokenInfo>>,
        segments: &[(usize, usize)],
        tower: Option<Modality>,
        opts: &mut ForwardOptions,
        traces: &mut Vec<LayerTrace>,
    ) -> Result<Var> {
        let c = &self.cfg;
        let t = tower.map(|m| format!("{m}/")).unwrap_or_default();
        for l in 1..=c.depth {
            let b = format!("{t}block{l}");
            let h = self.layer_norm(tape, p, x, &format!("{b}/ln1"))?;
            x = tape.add(x, self.attention(tape, p, h, segments, &b)?)?;
            if opts.skip_mlp.contains(&l) {
                continue;
            }
            let h = self.layer_norm(tape, p, x, &format!("{b}/ln2"))?;
            let y = if c.is_moe(l) {
                let (y, trace) = self.moe(tape, p, h, &info, l, tower, traces.len(), opts)?;
                traces.push(trace);
                y
            } else {
                self.mlp(tape, p, h, &format!("{b}/mlp"))?
            };
            x = tape.add(x, y)?;
        }
        self.layer_norm(tape, p, x, &format!("{t}final_ln"))
    }

    /// Encodes every modality present in `batch`.
    pub fn encode(&self, tape: &Tape, p: &BoundParams, batch: &PairBatch, opts: &mut ForwardOptions) -> Result<Encoded> {
        self.check_batch(batch)?;
        let c = &self.cfg;
        let groups = opts.groups.unwrap_or(c.capacity.groups);
        let info_all = self.token_info(batch, groups);
        let n_img = if batch.images.is_some() { batch.n * c.seq_len_image } else { 0 };
        let mut traces = Vec::new();
        let mut pooled = [None, None];
        let pool = |tape: &Tape, y: Var, start: usize, rows: usize, len: usize| -> Result<Var> {
            let part = if start == 0 && rows == tape.shape(y)[0] { y } else { tape.slice_rows(y, start, rows)? };
            Ok(tape.mean_groups(part, len)?)
        };
        if c.two_tower {
            for m in Modality::ALL {
                let Some(x) = self.embed(tape, p, batch, m)? else { continue };
                let info: Vec<TokenInfo> = info_all.iter().filter(|t| t.modality == m).cloned().collect();
                let len = self.seq_len(m);
                let rows = info.len();
                let y = self.tower(tape, p, x, Arc::new(info), &[(rows, len)], Some(m), opts, &mut traces)?;
                pooled[m.index()] = Some(pool(tape, y, 0, rows, len)?);
            }
        } else {
            let mut parts = Vec::new();
            let mut segments = Vec::new();
            for m in Modality::ALL {
                if let Some(x) = self.embed(tape, p, batch, m)? {
                    parts.push(x);
                    segments.push((batch.n * self.seq_len(m), self.seq_len(m)));
                }
            }
            let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
            let y = self.tower(tape, p, x, Arc::new(info_all), &segments, None, opts, &mut traces)?;
            if batch.images.is_some() {
                pooled[0] = Some(pool(tape, y, 0, n_img, c.seq_len_image)?);
            }
            if batch.texts.is_some() {
                pooled[1] = Some(pool(tape, y, n_img, batch.n * c.seq_len_text, c.seq_len_text)?);
            }
        }
        let project = |pooled: Option<Var>, name: &str| -> Result<Option<Var>> {
            pooled
                .map(|v| -> Result<Var> { Ok(tape.l2_normalize_rows(tape.matmul(v, param(p, name)?)?)?) })
                .transpose()
        };
        Ok(Encoded {
            image: project(pooled[0], "head/image")?,
            text: project(pooled[1], "head/text")?,
            pooled_image: pooled[0],
            pooled_text: pooled[1],
            traces,
        })
    }

    fn seq_len(&self, m: Modality) -> usize {
        match m {
            Modality::Image => self.cfg.seq_len_image,
            Modality::Text => self.cfg.seq_len_text,
        }
    }

    /// Per-layer, per-group slices of router output for the aux losses.
    pub fn aux_inputs(&self, tape: &Tape, traces: &[LayerTrace]) -> Result<Vec<Vec<AuxInput>>> {
        let sigma = self.cfg.router.sigma();
        let k = self.cfg.top_k();
        traces
            .iter()
            .map(|t| {
                let groups = t.info.iter().map(|i| i.group_id + 1).max().unwrap_or(0);
                (0..groups)
                    .map(|g| Ok(AuxInput::from_gating(tape, &t.gating, &t.info, g, k, sigma)?))
                    .collect()
            })
            .collect()
    }

    /// Contrastive loss plus the aggregated auxiliary term.
    pub fn training_loss(
        &self,
        tape: &Tape,
        p: &BoundParams,
        batch: &PairBatch,
        aux: Option<&AuxPlan>,
        opts: &mut ForwardOptions,
    ) -> Result<LossOutput> {
        let encoded = self.encode(tape, p, batch, opts)?;
        let (Some(zi), Some(zt)) = (encoded.image, encoded.text) else {
            return Err(ModelError::Input("training needs both modalities".into()));
        };
        let contrastive = contrastive_loss(tape, zi, zt, param(p, "head/log_scale")?)?;
        let (total, report) = match aux {
            Some(plan) if !encoded.traces.is_empty() => {
                let slices = self.aux_inputs(tape, &encoded.traces)?;
                let out = aggregate(tape, &plan.losses, &slices, plan.weight)?;
                (tape.add(contrastive, out.total)?, Some(out.report))
            }
            _ => (contrastive, None),
        };
        Ok(LossOutput { total, contrastive, aux: report, encoded })
    }
}

/// Similarity logits `exp(t) · z_i z_tᵀ`.
pub fn similarity_logits(tape: &Tape, zi: Var, zt: Var, log_scale: Var) -> std::result::Result<Var, TensorError> {
    let sims = tape.matmul(zi, tape.transpose(zt)?)?;
    tape.scale_by(sims, tape.exp(log_scale)?)
}

/// Symmetric in-batch cross-entropy, each direction weighted ½.
pub fn contrastive_loss(tape: &Tape, zi: Var, zt: Var, log_scale: Var) -> Result<Var> {
    let n = tape.shape(zi)[0];
    if n == 0 || tape.shape(zt)[0] != n {
        return Err(ModelError::Input(format!("contrastive loss needs n >= 1 matched pairs, got {n}")));
    }
    let logits = similarity_logits(tape, zi, zt, log_scale)?;
    let diag: Vec<(usize, usize)> = (0..n).map(|j| (j, j)).collect();
    let i2t = tape.mean(tape.pick(tape.log_softmax(logits)?, &diag)?)?;
    let t2i = tape.mean(tape.pick(tape.log_softmax(tape.transpose(logits)?)?, &diag)?)?;
    Ok(tape.scale(tape.add(i2t, t2i)?, -0.5)?)
}
