// SPDX-License-Identifier: Apache-2.0

//! Library side of the `moe-route` command: every subcommand is a plain
//! function over paths so it can be driven from tests as well as the binary.

pub mod analyze;
pub mod eval;
pub mod prune;
pub mod run;
pub mod soup;
pub mod svg;
pub mod sweep;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    NonFinite(String),
    #[error("{failed} of {total} sweep runs failed")]
    PartialSweep { failed: usize, total: usize },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// 0 success, 1 config error, 2 numerical abort, 3 partial sweep failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Other(_) => 1,
            CliError::NonFinite(_) => 2,
            CliError::PartialSweep { .. } => 3,
        }
    }
}

impl From<moe_route::training::TrainError> for CliError {
    fn from(e: moe_route::training::TrainError) -> Self {
        use moe_route::training::TrainError;
        match e {
            TrainError::Config(m) => CliError::Config(m),
            e @ TrainError::NonFinite { .. } => CliError::NonFinite(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

impl From<moe_route::config::ConfigError> for CliError {
    fn from(e: moe_route::config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<moe_route::model::ModelError> for CliError {
    fn from(e: moe_route::model::ModelError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<moe_route::pruning::PruneError> for CliError {
    fn from(e: moe_route::pruning::PruneError) -> Self {
        use moe_route::pruning::PruneError;
        match e {
            PruneError::Config(m) => CliError::Config(m),
            e => CliError::Other(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Parses `1,2,5-7` into seeds.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || CliError::Config(format!("bad seed list entry {part:?}"));
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("empty seed list".into()));
    }
    Ok(out)
}

/// Parses `path=json` overrides; bare words that are not JSON become strings.
pub fn parse_override(s: &str) -> Result<(String, serde_json::Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config(format!("override {s:?} is not path=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seed_list("1,2,3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seed_list("0-2,9").unwrap(), vec![0, 1, 2, 9]);
        assert!(parse_seed_list("3-1").is_err());
        assert!(parse_seed_list("x").is_err());
        assert!(parse_seed_list("").is_err());
    }

    #[test]
    fn overrides() {
        assert_eq!(parse_override("train.steps=50").unwrap(), ("train.steps".into(), serde_json::json!(50)));
        assert_eq!(parse_override("model.priority=fifo_text_first").unwrap().1, serde_json::json!("fifo_text_first"));
        assert!(parse_override("nothing").is_err());
    }
}
