// SPDX-License-Identifier: Apache-2.0

//! Synthetic paired data with a shared latent class per pair.
//!
//! Each class owns an image prototype (one vector per patch position) and a
//! text caption (one id per position). A sample perturbs the prototype with
//! Gaussian noise and resamples each caption token with some probability.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, PairBatch};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Std of the Gaussian noise added to image prototypes.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Minimum Euclidean distance between any two class prototypes.
    #[serde(default = "default_min_distance")]
    pub min_prototype_distance: f64,
    /// Probability that a caption token is kept rather than resampled
    /// uniformly from the vocabulary.
    #[serde(default = "default_purity")]
    pub text_purity: f64,
    /// Seed of the task itself (prototypes and captions); runs with different
    /// training seeds share one task.
    #[serde(default)]
    pub task_seed: u64,
}

fn default_classes() -> usize {
    256
}

fn default_noise() -> f64 {
    0.5
}

fn default_min_distance() -> f64 {
    1.0
}

fn default_purity() -> f64 {
    0.8
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: default_classes(),
            noise_std: default_noise(),
            min_prototype_distance: default_min_distance(),
            text_purity: default_purity(),
            task_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_classes < 2 {
            return Err("need at least two classes".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !(0.0..=1.0).contains(&self.text_purity) {
            return Err(format!("text_purity must lie in [0, 1], got {}", self.text_purity));
        }
        // Also rejects NaN.
        if self.min_prototype_distance.is_nan() || self.min_prototype_distance < 0.0 {
            return Err("min_prototype_distance must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub cfg: DataConfig,
    pub seq_len_image: usize,
    pub seq_len_text: usize,
    pub image_token_dim: usize,
    pub vocab_size: usize,
    /// `[classes · L_img, image_token_dim]`.
    pub prototypes: Tensor,
    /// `captions[c]` has `L_txt` ids.
    pub captions: Vec<Vec<usize>>,
}

impl SyntheticTask {
    pub fn new(cfg: &DataConfig, model: &ModelConfig) -> Result<Self, String> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.task_seed, Stream::Task, 0);
        let per_class = model.seq_len_image * model.image_token_dim;
        let mut protos: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
        let mut attempts = 0;
        while protos.len() < cfg.num_classes {
            let p: Vec<f64> = (0..per_class).map(|_| rng.sample(StandardNormal)).collect();
            let far = protos
                .iter()
                .all(|q| q.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= cfg.min_prototype_distance);
            if far {
                protos.push(p);
            }
            attempts += 1;
            if attempts > 1000 * cfg.num_classes {
                return Err("could not place prototypes at the requested minimum distance".into());
            }
        }
        let captions = (0..cfg.num_classes)
            .map(|_| (0..model.seq_len_text).map(|_| rng.random_range(0..model.vocab_size)).collect())
            .collect();
        let prototypes = Tensor::new(vec![cfg.num_classes * model.seq_len_image, model.image_token_dim], protos.concat())
            .expect("prototype shape");
        Ok(Self {
            cfg: cfg.clone(),
            seq_len_image: model.seq_len_image,
            seq_len_text: model.seq_len_text,
            image_token_dim: model.image_token_dim,
            vocab_size: model.vocab_size,
            prototypes,
            captions,
        })
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        let n = self.seq_len_image * self.image_token_dim;
        &self.prototypes.data()[class * n..(class + 1) * n]
    }

    /// `batch_size` pairs with classes drawn uniformly with replacement.
    pub fn generate_batch(&self, rng: &mut impl Rng, batch_size: usize) -> PairBatch {
        let classes: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..self.cfg.num_classes)).collect();
        self.batch_for(rng, &classes)
    }

    pub fn batch_for(&self, rng: &mut impl Rng, classes: &[usize]) -> PairBatch {
        let noise = Normal::new(0.0, self.cfg.noise_std).expect("validated std");
        let mut img = Vec::with_capacity(classes.len() * self.seq_len_image * self.image_token_dim);
        for &c in classes {
            img.extend(self.prototype(c).iter().map(|&x| x + noise.sample(rng)));
        }
        let mut txt = Vec::with_capacity(classes.len() * self.seq_len_text);
        for &c in classes {
            for &id in &self.captions[c] {
                let keep = rng.random_bool(self.cfg.text_purity);
                txt.push(if keep { id } else { rng.random_range(0..self.vocab_size) });
            }
        }
        PairBatch {
            n: classes.len(),
            images: Some(
                Tensor::new(vec![classes.len() * self.seq_len_image, self.image_token_dim], img).expect("image shape"),
            ),
            texts: Some(txt),
            classes: classes.to_vec(),
        }
    }

    /// Training batch of step `step`.
    pub fn train_batch(&self, seed: u64, step: u64, batch_size: usize) -> PairBatch {
        self.generate_batch(&mut stream_rng(seed, Stream::Data, step), batch_size)
    }

    /// Held-out batch `index`, independent of the training seed.
    pub fn eval_batch(&self, index: u64, batch_size: usize) -> PairBatch {
        self.generate_batch(&mut stream_rng(self.cfg.task_seed, Stream::Eval, index), batch_size)
    }
}
