// SPDX-License-Identifier: Apache-2.0

//! Sparse mixture-of-experts routing for two-modality contrastive models.

pub mod analytics;
pub mod aux_losses;
pub mod config;
pub mod dispatch;
pub mod gradcheck;
pub mod model;
pub mod pruning;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod training;
