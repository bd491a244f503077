// SPDX-License-Identifier: Apache-2.0

//! `sweep`: cross product of config overrides, run on a bounded worker pool.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use moe_route::config::ExperimentConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::run::{run_dir, summary_row, train_one, RunSummary, SUMMARY_COLUMNS};
use crate::{CliError, Result};

pub const RESULTS_FILE: &str = "results.csv";
pub const AUX_ABLATION_FILE: &str = "aux_ablation.csv";
pub const PLAN_FILE: &str = "sweep.json";

/// One swept parameter: a dotted config path and the values it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub path: String,
    pub values: Vec<Value>,
}

/// Every subset of `losses` whose size is in `sizes`, each used as `aux.active`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxSubsets {
    pub losses: Vec<String>,
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Partial config applied over the `--config` base.
    #[serde(default)]
    pub base: Option<Value>,
    #[serde(default)]
    pub axes: Vec<Axis>,
    #[serde(default)]
    pub aux_subsets: Option<AuxSubsets>,
    /// Replaces the base config's seed list.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Upper bound on points × seeds; larger grids are rejected.
    pub max_runs: usize,
}

/// One grid point: its overrides and the resulting config.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub index: usize,
    pub overrides: Vec<(String, Value)>,
    #[serde(skip)]
    pub config: ExperimentConfig,
}

/// Subsets of `0..n` of size `k` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::new(), &mut out);
    }
    out
}

fn merge(into: &mut Value, patch: &Value) {
    match (into, patch) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Expands `spec` over `base` without running anything.
pub fn plan_sweep(spec: &SweepSpec, base: &ExperimentConfig) -> Result<(ExperimentConfig, Vec<SweepPoint>)> {
    let mut base = base.clone();
    if let Some(patch) = &spec.base {
        let mut v = serde_json::to_value(&base)?;
        merge(&mut v, patch);
        base = ExperimentConfig::from_json(&v.to_string())?;
    }
    if let Some(s) = &spec.seeds {
        base.seeds = s.clone();
    }
    let mut dims: Vec<Vec<(String, Value)>> = Vec::new();
    for a in &spec.axes {
        if a.values.is_empty() {
            return Err(CliError::Config(format!("axis {} has no values", a.path)));
        }
        dims.push(a.values.iter().map(|v| (a.path.clone(), v.clone())).collect());
    }
    if let Some(s) = &spec.aux_subsets {
        let known = moe_route::config::known_aux_losses();
        if let Some(bad) = s.losses.iter().find(|l| !known.contains(l)) {
            return Err(CliError::Config(format!("unknown aux loss {bad:?}")));
        }
        let mut subsets = Vec::new();
        for &k in &s.sizes {
            for c in combinations(s.losses.len(), k) {
                let names: Vec<Value> = c.iter().map(|&i| Value::String(s.losses[i].clone())).collect();
                subsets.push(("aux.active".to_string(), Value::Array(names)));
            }
        }
        if subsets.is_empty() {
            return Err(CliError::Config("aux_subsets yields no subsets".into()));
        }
        dims.push(subsets);
    }
    let total: usize = dims.iter().map(Vec::len).product::<usize>() * base.seeds.len();
    if total > spec.max_runs {
        return Err(CliError::Config(format!("sweep has {total} runs, above max_runs {}", spec.max_runs)));
    }
    let mut points = vec![Vec::new()];
    for d in &dims {
        points = points.into_iter().flat_map(|p: Vec<(String, Value)>| d.iter().map(move |o| [p.clone(), vec![o.clone()]].concat())).collect();
    }
    let mut out = Vec::with_capacity(points.len());
    for (index, overrides) in points.into_iter().enumerate() {
        let mut cfg = base.clone();
        for (p, v) in &overrides {
            cfg = cfg.with_override(p, v.clone())?;
        }
        cfg.validate()?;
        out.push(SweepPoint { index, overrides, config: cfg });
    }
    Ok((base, out))
}

pub fn point_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("point_{index:04}"))
}

/// Result of one (point, seed) job.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub point: usize,
    pub seed: u64,
    pub outcome: std::result::Result<RunSummary, String>,
}

fn override_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(a) => a.iter().map(override_label).collect::<Vec<_>>().join("+"),
        v => v.to_string(),
    }
}

/// For each loss: best point accuracy among subsets with it and without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxAblationRow {
    pub loss: String,
    pub best_with: Option<f64>,
    pub best_without: Option<f64>,
    pub points_with: usize,
    pub points_without: usize,
}

pub fn aux_ablation(losses: &[String], points: &[(Vec<String>, f64)]) -> Vec<AuxAblationRow> {
    losses
        .iter()
        .map(|l| {
            let (with, without): (Vec<_>, Vec<_>) = points.iter().partition(|(active, _)| active.contains(l));
            let best = |v: &[&(Vec<String>, f64)]| v.iter().map(|p| p.1).fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
            AuxAblationRow {
                loss: l.clone(),
                best_with: best(&with),
                best_without: best(&without),
                points_with: with.len(),
                points_without: without.len(),
            }
        })
        .collect()
}

/// Reads a `results.csv` and returns each point's `aux.active` set with its
/// mean `eval_accuracy` over the rows whose status is `ok`.
pub fn read_point_scores(path: &Path) -> Result<Vec<(Vec<String>, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| CliError::Other(format!("{} has no {name} column", path.display())))
    };
    let (point, status, active, acc) = (col("point")?, col("status")?, col("aux.active")?, col("eval_accuracy")?);
    let mut by_point: BTreeMap<usize, (Vec<String>, f64, usize)> = BTreeMap::new();
    for row in r.records() {
        let row = row?;
        if &row[status] != "ok" {
            continue;
        }
        let p: usize = row[point].parse().map_err(|_| CliError::Other(format!("bad point {:?}", &row[point])))?;
        let a: f64 = row[acc].parse().map_err(|_| CliError::Other(format!("bad accuracy {:?}", &row[acc])))?;
        let names = row[active].split('+').filter(|s| !s.is_empty()).map(String::from).collect();
        let e = by_point.entry(p).or_insert((names, 0.0, 0));
        e.1 += a;
        e.2 += 1;
    }
    Ok(by_point.into_values().map(|(names, s, n)| (names, s / n as f64)).collect())
}

pub fn write_aux_ablation(path: &Path, rows: &[AuxAblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["loss", "best_with", "best_without", "points_with", "points_without"])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([r.loss.clone(), opt(r.best_with), opt(r.best_without), r.points_with.to_string(), r.points_without.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub points: Vec<SweepPoint>,
    pub runs: Vec<SweepRun>,
    pub aux_ablation: Option<Vec<AuxAblationRow>>,
}

impl SweepOutcome {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.outcome.is_err()).count()
    }
}

/// Runs the sweep with at most `jobs` concurrent trainings. Failed runs are
/// recorded in the results table; the caller decides the exit status.
pub fn cmd_sweep(spec: &SweepSpec, base: &ExperimentConfig, out: &Path, jobs: usize) -> Result<SweepOutcome> {
    let (base, points) = plan_sweep(spec, base)?;
    std::fs::create_dir_all(out)?;
    let plan = serde_json::json!({
        "schema_version": crate::analyze::SCHEMA_VERSION,
        "spec": spec,
        "base": base,
        "points": points,
    });
    std::fs::write(out.join(PLAN_FILE), serde_json::to_string_pretty(&plan)? + "\n")?;

    let work: Vec<(usize, u64)> = points.iter().flat_map(|p| base.seeds.iter().map(move |&s| (p.index, s))).collect();
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<Option<SweepRun>>> = Mutex::new(vec![None; work.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, work.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(point, seed)) = work.get(i) else { break };
                let cfg = &points[point].config;
                let outcome = train_one(cfg, seed, &run_dir(&point_dir(out, point), seed)).map_err(|e| e.to_string());
                done.lock().expect("worker panicked")[i] = Some(SweepRun { point, seed, outcome });
            });
        }
    });
    let runs: Vec<SweepRun> = done.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every job ran")).collect();

    let paths: Vec<String> = {
        let mut p: Vec<String> = spec.axes.iter().map(|a| a.path.clone()).collect();
        if spec.aux_subsets.is_some() {
            p.push("aux.active".into());
        }
        p
    };
    let mut w = csv::Writer::from_path(out.join(RESULTS_FILE))?;
    let mut header: Vec<String> = vec!["point".into(), "status".into(), "error".into()];
    header.extend(paths.iter().cloned());
    header.extend(SUMMARY_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in &runs {
        let mut row = vec![r.point.to_string()];
        match &r.outcome {
            Ok(_) => row.extend(["ok".to_string(), String::new()]),
            Err(e) => row.extend(["failed".to_string(), e.clone()]),
        }
        row.extend(points[r.point].overrides.iter().map(|(_, v)| override_label(v)));
        match &r.outcome {
            Ok(s) => row.extend(summary_row(s)),
            Err(_) => {
                row.push(r.seed.to_string());
                row.extend(std::iter::repeat_n(String::new(), SUMMARY_COLUMNS.len() - 1));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    // Aggregated from the table just written so the CSV is the single source.
    let aux_ablation = match &spec.aux_subsets {
        Some(s) => {
            let rows = aux_ablation(&s.losses, &read_point_scores(&out.join(RESULTS_FILE))?);
            write_aux_ablation(&out.join(AUX_ABLATION_FILE), &rows)?;
            Some(rows)
        }
        None => None,
    };
    Ok(SweepOutcome { points, runs, aux_ablation })
}
