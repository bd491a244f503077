// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moe_route::config::ExperimentConfig;
use moe_route::pruning::{PruneMode, PruneSet, PruneTarget, UsageBasis};
use moe_route::routing::Modality;
use moe_route_cli::{analyze, eval, parse_override, parse_seed_list, prune, run, soup, sweep, CliError, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "moe-route", version, about = "Train, sweep, analyze, prune and soup multimodal MoE runs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply to missing sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seeds, e.g. `0,1,2` or `0-4`. Replaces the config's list.
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override `dotted.path=json`, repeatable.
    #[arg(long = "set", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run per seed into `<out>/seed_<n>`.
    Train,
    /// Run a grid of configs.
    Sweep {
        /// Sweep spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Tables and figures from a run's JSONL streams.
    Analyze { run: PathBuf },
    /// Choose experts to prune from a run's usage and score the result.
    Prune {
        run: PathBuf,
        #[arg(long, value_parser = parse_modality)]
        modality: Modality,
        /// Number of experts to keep per layer.
        #[arg(long, conflicts_with = "coverage")]
        keep: Option<usize>,
        /// Keep the fewest experts covering this share of tokens.
        #[arg(long)]
        coverage: Option<f64>,
        #[arg(long, default_value = "router_drop")]
        mode: PruneMode,
        /// Trailing fraction of the analytics stream used for ranking.
        #[arg(long, default_value_t = 0.1)]
        window: f64,
        #[arg(long, default_value = "served", value_parser = parse_basis)]
        basis: UsageBasis,
        /// Skip the pruned vs unpruned evaluation.
        #[arg(long)]
        no_eval: bool,
    },
    /// Greedy multiset soup of several runs' final checkpoints.
    Soup {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = 4)]
        max_size: usize,
    },
    /// Held-out retrieval metrics for a checkpoint.
    Eval {
        checkpoint: PathBuf,
        /// Route each modality in its own pass.
        #[arg(long)]
        unimodal: bool,
        /// Capacity slack factor override.
        #[arg(long)]
        slack: Option<f64>,
        /// Prune set written by `prune`.
        #[arg(long)]
        prune: Option<PathBuf>,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        batches: Option<usize>,
    },
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    Modality::parse(s).ok_or_else(|| format!("unknown modality {s:?}"))
}

fn parse_basis(s: &str) -> std::result::Result<UsageBasis, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown usage basis {s:?}"))
}

impl Common {
    /// The config after `--config`, `--set` and `--seed`, if any were given.
    fn explicit_config(&self) -> Result<Option<ExperimentConfig>> {
        if self.config.is_none() && self.set.is_empty() && self.seed.is_none() {
            return Ok(None);
        }
        self.config().map(Some)
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for s in &self.set {
            let (k, v) = parse_override(s)?;
            cfg = cfg.with_override(&k, v)?;
        }
        if let Some(s) = &self.seed {
            cfg.seeds = parse_seed_list(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self, cfg: Option<&ExperimentConfig>, fallback: &str) -> PathBuf {
        self.out.clone().or_else(|| cfg.and_then(|c| c.out_dir.clone())).unwrap_or_else(|| PathBuf::from(fallback))
    }
}

fn print<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.cmd {
        Cmd::Train => {
            let cfg = c.config()?;
            let out = c.out(Some(&cfg), "runs");
            let summaries = run::cmd_train(&cfg, &cfg.seeds, &out)?;
            print(&summaries)
        }
        Cmd::Sweep { spec, jobs } => {
            let cfg = c.config()?;
            let text = std::fs::read_to_string(&spec).map_err(|e| CliError::Config(format!("{}: {e}", spec.display())))?;
            let spec: sweep::SweepSpec =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", spec.display())))?;
            let out = c.out(Some(&cfg), "sweep");
            let outcome = sweep::cmd_sweep(&spec, &cfg, &out, jobs)?;
            let failed = outcome.failures();
            eprintln!("{} runs, {failed} failed; results in {}", outcome.runs.len(), out.join(sweep::RESULTS_FILE).display());
            if failed > 0 {
                return Err(CliError::PartialSweep { failed, total: outcome.runs.len() });
            }
            Ok(())
        }
        Cmd::Analyze { run } => {
            let out = c.out.clone().unwrap_or_else(|| run.join("analysis"));
            let report = analyze::cmd_analyze(&run, &out)?;
            print(&report)
        }
        Cmd::Prune { run, modality, keep, coverage, mode, window, basis, no_eval } => {
            let target = match (keep, coverage) {
                (Some(k), None) => PruneTarget::Keep(k),
                (None, Some(f)) => PruneTarget::Coverage(f),
                _ => return Err(CliError::Config("give exactly one of --keep or --coverage".into())),
            };
            let args = prune::PruneArgs { modality, target, mode, window, basis, evaluate: !no_eval };
            let out = c.out.clone().unwrap_or_else(|| run.join("prune"));
            let report = prune::cmd_prune(&run, &args, &out)?;
            print(&serde_json::json!({ "prune": report.prune, "unpruned": report.unpruned, "pruned": report.pruned }))
        }
        Cmd::Soup { runs, max_size } => {
            let out = c.out(None, "soup");
            let report = soup::cmd_soup(&runs, max_size, &out)?;
            print(&report)
        }
        Cmd::Eval { checkpoint, unimodal, slack, prune, groups, batches } => {
            let cfg = c.explicit_config()?;
            let prune = prune.map(|p| PruneSet::load(&p)).transpose()?;
            let args = eval::EvalArgs { unimodal, slack, prune, groups, batches };
            let report = eval::cmd_eval(&checkpoint, cfg.as_ref(), &args)?;
            if let Some(out) = &c.out {
                write_json(out, "eval.json", &report)?;
            }
            print(&report)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
