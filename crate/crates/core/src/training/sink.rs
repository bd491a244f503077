// SPDX-License-Identifier: Apache-2.0

//! Destinations for the records a training run produces.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{AnalyticsRecord, StepRecord, TrainError, TrainState};
use crate::config::ExperimentConfig;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ANALYTICS_FILE: &str = "analytics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const ABORT_CHECKPOINT: &str = "abort_snapshot.ckpt";
pub const ABORT_REPORT: &str = "abort.json";

pub trait RunSink {
    fn step(&mut self, record: &StepRecord) -> Result<(), TrainError>;
    fn analytics(&mut self, record: &AnalyticsRecord) -> Result<(), TrainError>;
    /// Called periodically and once more (`last = true`) when the run ends.
    fn checkpoint(
        &mut self,
        state: &TrainState,
        seed: u64,
        cfg: &ExperimentConfig,
        last: bool,
    ) -> Result<(), TrainError>;
    /// Called before a numerical abort propagates; `state` is the last good one.
    fn abort(&mut self, state: &TrainState, seed: u64, cfg: &ExperimentConfig, reason: &str) -> Result<(), TrainError>;
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl RunSink for NullSink {
    fn step(&mut self, _: &StepRecord) -> Result<(), TrainError> {
        Ok(())
    }
    fn analytics(&mut self, _: &AnalyticsRecord) -> Result<(), TrainError> {
        Ok(())
    }
    fn checkpoint(&mut self, _: &TrainState, _: u64, _: &ExperimentConfig, _: bool) -> Result<(), TrainError> {
        Ok(())
    }
    fn abort(&mut self, _: &TrainState, _: u64, _: &ExperimentConfig, _: &str) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Keeps every record in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub steps: Vec<StepRecord>,
    pub analytics: Vec<AnalyticsRecord>,
    pub aborted: Option<(TrainState, String)>,
}

impl RunSink for MemorySink {
    fn step(&mut self, record: &StepRecord) -> Result<(), TrainError> {
        self.steps.push(record.clone());
        Ok(())
    }
    fn analytics(&mut self, record: &AnalyticsRecord) -> Result<(), TrainError> {
        self.analytics.push(record.clone());
        Ok(())
    }
    fn checkpoint(&mut self, _: &TrainState, _: u64, _: &ExperimentConfig, _: bool) -> Result<(), TrainError> {
        Ok(())
    }
    fn abort(&mut self, state: &TrainState, _: u64, _: &ExperimentConfig, reason: &str) -> Result<(), TrainError> {
        self.aborted = Some((state.clone(), reason.to_string()));
        Ok(())
    }
}

/// Writes the JSONL streams and checkpoints into a run directory.
#[derive(Debug)]
pub struct DirSink {
    dir: PathBuf,
    metrics: BufWriter<File>,
    analytics: BufWriter<File>,
}

#[derive(Serialize)]
struct AbortReport<'a> {
    step: u64,
    reason: &'a str,
    checkpoint: &'a str,
}

impl DirSink {
    /// Starts fresh streams, truncating any previous ones.
    pub fn create(dir: &Path) -> Result<Self, TrainError> {
        Self::open(dir, false)
    }

    /// Appends to existing streams (resumed runs).
    pub fn append(dir: &Path) -> Result<Self, TrainError> {
        Self::open(dir, true)
    }

    fn open(dir: &Path, append: bool) -> Result<Self, TrainError> {
        std::fs::create_dir_all(dir)?;
        let file = |name: &str| -> std::io::Result<BufWriter<File>> {
            let f = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(dir.join(name))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self { dir: dir.to_path_buf(), metrics: file(METRICS_FILE)?, analytics: file(ANALYTICS_FILE)? })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn flush(&mut self) -> Result<(), TrainError> {
        self.metrics.flush()?;
        self.analytics.flush()?;
        Ok(())
    }
}

fn write_line(w: &mut impl Write, value: &impl Serialize) -> Result<(), TrainError> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

impl RunSink for DirSink {
    fn step(&mut self, record: &StepRecord) -> Result<(), TrainError> {
        write_line(&mut self.metrics, record)
    }

    fn analytics(&mut self, record: &AnalyticsRecord) -> Result<(), TrainError> {
        write_line(&mut self.analytics, record)
    }

    fn checkpoint(
        &mut self,
        state: &TrainState,
        seed: u64,
        cfg: &ExperimentConfig,
        last: bool,
    ) -> Result<(), TrainError> {
        self.flush()?;
        let name = if last { FINAL_CHECKPOINT.to_string() } else { format!("step_{:06}.ckpt", state.step) };
        state.save(&self.dir.join(name), seed, Some(cfg))
    }

    fn abort(&mut self, state: &TrainState, seed: u64, cfg: &ExperimentConfig, reason: &str) -> Result<(), TrainError> {
        self.flush()?;
        state.save(&self.dir.join(ABORT_CHECKPOINT), seed, Some(cfg))?;
        let report = AbortReport { step: state.step, reason, checkpoint: ABORT_CHECKPOINT };
        std::fs::write(self.dir.join(ABORT_REPORT), serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(())
    }
}

/// Reads a JSONL file into records.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, TrainError> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
