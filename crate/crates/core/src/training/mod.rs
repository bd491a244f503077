// SPDX-License-Identifier: Apache-2.0

//! Training loop, checkpointing, retrieval evaluation and checkpoint soups.
//!
//! A run is fully determined by its config and seed: every random draw comes
//! from a counter-addressed stream keyed by the step, so a run resumed from a
//! checkpoint at step `s` replays exactly what the uninterrupted run did.

pub mod data;
pub mod eval;
pub mod optim;
pub mod sink;
pub mod soup;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{layer_summaries, routing_stats, LayerAnalytics, LayerSummary};
use crate::aux_losses::{AuxLossRegistry, AuxReport};
use crate::config::ExperimentConfig;
use crate::model::{AuxPlan, ForwardOptions, Model, ModelError};
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{ParamStore, Tape, Tensor, TensorError};

use data::SyntheticTask;
use optim::{learning_rate, AdamConfig, AdamState};
pub use sink::{DirSink, MemorySink, NullSink, RunSink};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Fraction of `steps` spent in linear warmup.
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    /// Detailed routing analytics are logged every this many steps.
    #[serde(default = "default_analytics_every")]
    pub analytics_every: usize,
    /// Periodic checkpoints; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Held-out batches used by the final evaluation.
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    #[serde(default = "default_batch")]
    pub eval_batch_size: usize,
}

fn default_steps() -> usize {
    3000
}

fn default_batch() -> usize {
    64
}

fn default_warmup() -> f64 {
    0.1
}

fn default_analytics_every() -> usize {
    50
}

fn default_eval_batches() -> usize {
    4
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            batch_size: default_batch(),
            optimizer: AdamConfig::default(),
            warmup_frac: default_warmup(),
            analytics_every: default_analytics_every(),
            checkpoint_every: 0,
            eval_batches: default_eval_batches(),
            eval_batch_size: default_batch(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size < 2 || self.eval_batch_size < 2 {
            return Err("contrastive batches need at least two pairs".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(format!("warmup_frac must lie in [0, 1], got {}", self.warmup_frac));
        }
        if self.analytics_every == 0 {
            return Err("analytics_every must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2))
        {
            return Err("optimizer: need lr, weight_decay >= 0 and betas in [0, 1)".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.steps as f64 * self.warmup_frac).round() as usize
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        learning_rate(self.optimizer.lr, step, self.steps, self.warmup_steps())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub contrastive: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<AuxReport>,
    pub lr: f64,
    /// Current similarity scale `exp(t)`.
    pub logit_scale: f64,
    pub layers: Vec<LayerSummary>,
}

/// One line of the analytics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsRecord {
    pub step: u64,
    pub layers: Vec<LayerAnalytics>,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: u64,
    pub params: ParamStore,
    pub adam: AdamState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    adam_t: u64,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<ExperimentConfig>,
}

impl TrainState {
    pub fn to_checkpoint(&self, seed: u64, config: Option<&ExperimentConfig>) -> Checkpoint {
        let mut entries = BTreeMap::new();
        for (prefix, store) in [("param", &self.params), ("adam_m", &self.adam.m), ("adam_v", &self.adam.v)] {
            for (name, t) in store.iter() {
                entries.insert(format!("{prefix}/{name}"), t.clone());
            }
        }
        let meta = CheckpointMeta { step: self.step, adam_t: self.adam.t, seed, config: config.cloned() };
        Checkpoint { meta: serde_json::to_string(&meta).expect("meta serializes"), entries }
    }

    /// Returns the state plus the seed and config recorded with it.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, u64, Option<ExperimentConfig>), TrainError> {
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta)?;
        let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
        for (name, t) in &ckpt.entries {
            let (prefix, rest) = name
                .split_once('/')
                .ok_or_else(|| CheckpointError::Corrupt(format!("entry without prefix: {name}")))?;
            let slot = match prefix {
                "param" => 0,
                "adam_m" => 1,
                "adam_v" => 2,
                _ => return Err(CheckpointError::Corrupt(format!("unknown entry {name}")).into()),
            };
            stores[slot].insert(rest, t.clone());
        }
        let [params, m, v] = stores;
        let adam = if m.is_empty() {
            AdamState::zeros_like(&params)
        } else {
            if !m.same_layout(&params) || !v.same_layout(&params) {
                return Err(CheckpointError::Corrupt("optimizer state does not match parameters".into()).into());
            }
            AdamState { t: meta.adam_t, m, v }
        };
        Ok((Self { step: meta.step, params, adam }, meta.seed, meta.config))
    }

    pub fn save(&self, path: &Path, seed: u64, config: Option<&ExperimentConfig>) -> Result<(), TrainError> {
        Ok(self.to_checkpoint(seed, config).save(path)?)
    }

    pub fn load(path: &Path) -> Result<(Self, u64, Option<ExperimentConfig>), TrainError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Parameters only, for evaluation and souping; optimizer entries are ignored.
pub fn load_params(path: &Path) -> Result<ParamStore, TrainError> {
    Ok(TrainState::load(path)?.0.params)
}

/// Model, task and loss setup of one experiment config.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub model: Model,
    pub task: SyntheticTask,
    pub aux: Option<AuxPlan>,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, TrainError> {
        Self::with_registry(cfg, None)
    }

    /// `registry` replaces the built-in aux losses (custom strategies).
    pub fn with_registry(cfg: ExperimentConfig, registry: Option<&AuxLossRegistry>) -> Result<Self, TrainError> {
        cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let model = Model::new(cfg.model.clone())?;
        let task = SyntheticTask::new(&cfg.data, &cfg.model).map_err(TrainError::Config)?;
        let aux = if cfg.aux.active.is_empty() {
            None
        } else {
            let owned;
            let reg = match registry {
                Some(r) => r,
                None => {
                    owned = AuxLossRegistry::with_builtin(&cfg.aux);
                    &owned
                }
            };
            Some(AuxPlan::from_config(&cfg.aux, reg)?)
        };
        Ok(Self { cfg, model, task, aux })
    }

    pub fn init_state(&self, seed: u64) -> TrainState {
        let params = self.model.init_params(seed);
        TrainState { step: 0, adam: AdamState::zeros_like(&params), params }
    }

    /// One optimizer step; returns the record of the step just taken and,
    /// on analytics steps, the detailed routing record.
    pub fn step(&self, state: &mut TrainState, seed: u64) -> Result<(StepRecord, Option<AnalyticsRecord>), TrainError> {
        let t = &self.cfg.train;
        let step = state.step;
        let batch = self.task.train_batch(seed, step, t.batch_size);
        let tape = Tape::new();
        let bound = state.params.bind(&tape);
        let mut opts = ForwardOptions::train(seed, step);
        let out = match self.model.training_loss(&tape, &bound, &batch, self.aux.as_ref(), &mut opts) {
            Ok(out) => out,
            Err(ModelError::Tensor(TensorError::NonFinite { op })) => {
                return Err(TrainError::NonFinite { step, what: format!("forward value ({op})") })
            }
            Err(e) => return Err(e.into()),
        };
        let loss = tape.item(out.total);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, what: "loss".into() });
        }
        let grads = tape.backward(out.total).map_err(ModelError::from)?;
        let grads = bound.collect_grads(&tape, &grads);
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(TrainError::NonFinite { step, what: format!("gradient of {name}") });
        }
        let lr = t.lr_at(step as usize);
        state.adam.step(&mut state.params, &grads, lr, &t.optimizer);
        state.step += 1;
        let analytics = (step.is_multiple_of(t.analytics_every as u64) || state.step == t.steps as u64)
            .then(|| AnalyticsRecord { step, layers: routing_stats(&out.encoded.traces) });
        let record = StepRecord {
            step,
            loss,
            contrastive: tape.item(out.contrastive),
            aux: out.aux,
            lr,
            logit_scale: logit_scale(&state.params),
            layers: layer_summaries(&out.encoded.traces),
        };
        Ok((record, analytics))
    }

    /// Trains from `state` until `until` steps are complete.
    pub fn run(
        &self,
        state: &mut TrainState,
        seed: u64,
        until: u64,
        sink: &mut dyn RunSink,
    ) -> Result<(), TrainError> {
        let every = self.cfg.train.checkpoint_every as u64;
        while state.step < until {
            let (record, analytics) = match self.step(state, seed) {
                Ok(r) => r,
                Err(e @ TrainError::NonFinite { .. }) => {
                    sink.abort(state, seed, &self.cfg, &e.to_string())?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            sink.step(&record)?;
            if let Some(a) = analytics {
                sink.analytics(&a)?;
            }
            if every > 0 && state.step.is_multiple_of(every) && state.step < until {
                sink.checkpoint(state, seed, &self.cfg, false)?;
            }
        }
        sink.checkpoint(state, seed, &self.cfg, true)?;
        Ok(())
    }

    /// Fresh run of `train.steps` steps.
    pub fn train(&self, seed: u64, sink: &mut dyn RunSink) -> Result<TrainState, TrainError> {
        let mut state = self.init_state(seed);
        self.run(&mut state, seed, self.cfg.train.steps as u64, sink)?;
        Ok(state)
    }
}

pub fn logit_scale(params: &ParamStore) -> f64 {
    params.get("head/log_scale").map(|t| t.data()[0].exp()).unwrap_or(f64::NAN)
}

/// Uniform parameter average weighted by `counts`.
pub fn average_params(stores: &[&ParamStore], counts: &[usize]) -> Result<ParamStore, String> {
    let first = stores.first().ok_or("nothing to average")?;
    if stores.iter().any(|s| !s.same_layout(first)) {
        return Err("parameter layouts differ".into());
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err("empty multiset".into());
    }
    let mut out = ParamStore::new();
    for (name, t) in first.iter() {
        let mut acc = vec![0.0; t.numel()];
        for (s, &c) in stores.iter().zip(counts) {
            if c == 0 {
                continue;
            }
            for (a, x) in acc.iter_mut().zip(s.get(name).expect("same layout").data()) {
                *a += c as f64 * x;
            }
        }
        let data = acc.into_iter().map(|a| a / total as f64).collect();
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data).expect("shape kept"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
