// SPDX-License-Identifier: Apache-2.0

//! `analyze`: CSV tables, SVG figures and a short report computed only from
//! the persisted JSONL streams of a run.

use std::path::Path;

use moe_route::analytics::LayerAnalytics;
use moe_route::routing::Modality;
use moe_route::training::sink::{read_jsonl, ANALYTICS_FILE, METRICS_FILE};
use moe_route::training::{AnalyticsRecord, StepRecord};
use serde::{Deserialize, Serialize};

use crate::svg::{bar_chart, line_chart};
use crate::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessFlag {
    pub step: u64,
    pub layer: usize,
    pub modality: Modality,
    pub success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub analytics_records: usize,
    pub metric_records: usize,
    pub final_step: u64,
    /// Served / attempted pairs per layer and modality at the final record.
    pub final_success: Vec<SuccessFlag>,
    /// Entries of `final_success` below 1.
    pub flags: Vec<SuccessFlag>,
    pub files: Vec<String>,
}

fn success_of(l: &LayerAnalytics, m: Modality) -> Option<f64> {
    let c = l.get(m)?;
    let attempted: usize = c.attempted.iter().sum();
    Some(if attempted == 0 { 1.0 } else { c.served.iter().sum::<usize>() as f64 / attempted as f64 })
}

struct Out<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Out<'_> {
    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }
    fn svg(&mut self, name: &str, body: String) -> Result<()> {
        std::fs::write(self.dir.join(name), body)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn layer_name(l: &LayerAnalytics) -> String {
    match l.tower {
        Some(t) => format!("{}_{t}", l.layer),
        None => l.layer.to_string(),
    }
}

fn usage_rows(records: &[AnalyticsRecord]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in records {
        for l in &r.layers {
            let cap: usize = l.capacity.iter().sum();
            for m in Modality::ALL {
                let Some(c) = l.get(m) else { continue };
                for e in 0..l.num_experts {
                    rows.push(vec![
                        r.step.to_string(),
                        l.layer.to_string(),
                        l.tower.map(|t| t.to_string()).unwrap_or_default(),
                        m.to_string(),
                        e.to_string(),
                        c.attempted[e].to_string(),
                        c.served[e].to_string(),
                        c.dropped[e].to_string(),
                        cap.to_string(),
                    ]);
                }
            }
        }
    }
    rows
}

fn priority_rows(records: &[AnalyticsRecord]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in records {
        for l in &r.layers {
            for m in Modality::ALL {
                let Some(c) = l.get(m) else { continue };
                for (b, (&n, &d)) in c.priority_hist.iter().zip(&c.dropped_priority_hist).enumerate() {
                    rows.push(vec![
                        r.step.to_string(),
                        l.layer.to_string(),
                        l.tower.map(|t| t.to_string()).unwrap_or_default(),
                        m.to_string(),
                        b.to_string(),
                        c.priority_hist.len().to_string(),
                        n.to_string(),
                        d.to_string(),
                    ]);
                }
            }
        }
    }
    rows
}

fn flow_rows(records: &[AnalyticsRecord]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in records {
        for (i, l) in r.layers.iter().enumerate() {
            for (m, flow) in &l.flows {
                // The previous MoE layer of the same tower.
                let from = r.layers[..i].iter().rev().find(|p| p.tower == l.tower).map(|p| p.layer);
                for (a, row) in flow.iter().enumerate() {
                    for (b, &n) in row.iter().enumerate() {
                        rows.push(vec![
                            r.step.to_string(),
                            from.map(|f| f.to_string()).unwrap_or_default(),
                            l.layer.to_string(),
                            l.tower.map(|t| t.to_string()).unwrap_or_default(),
                            m.to_string(),
                            a.to_string(),
                            b.to_string(),
                            n.to_string(),
                        ]);
                    }
                }
            }
        }
    }
    rows
}

fn step_layer_rows(steps: &[StepRecord], f: impl Fn(&moe_route::analytics::ModalitySummary) -> Vec<f64>) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for s in steps {
        for l in &s.layers {
            for m in Modality::ALL {
                if let Some(sum) = l.get(m) {
                    let mut row = vec![
                        s.step.to_string(),
                        l.layer.to_string(),
                        l.tower.map(|t| t.to_string()).unwrap_or_default(),
                        m.to_string(),
                    ];
                    row.extend(f(sum).into_iter().map(|v| v.to_string()));
                    rows.push(row);
                }
            }
        }
    }
    rows
}

type Series = Vec<(String, Vec<(f64, f64)>)>;

fn step_series(steps: &[StepRecord], f: impl Fn(&moe_route::analytics::ModalitySummary) -> f64) -> Series {
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for s in steps {
        for l in &s.layers {
            for m in Modality::ALL {
                if let Some(sum) = l.get(m) {
                    let name = match l.tower {
                        Some(t) => format!("L{} {t} tower {m}", l.layer),
                        None => format!("L{} {m}", l.layer),
                    };
                    let pos = match out.iter().position(|x| x.0 == name) {
                        Some(p) => p,
                        None => {
                            out.push((name, Vec::new()));
                            out.len() - 1
                        }
                    };
                    out[pos].1.push((s.step as f64, f(sum)));
                }
            }
        }
    }
    out
}

/// Analyzes the streams in `run` and writes everything into `out`.
pub fn cmd_analyze(run: &Path, out: &Path) -> Result<AnalysisReport> {
    let path = run.join(ANALYTICS_FILE);
    if !path.exists() {
        return Err(CliError::Other(format!("{} not found", path.display())));
    }
    let records: Vec<AnalyticsRecord> = read_jsonl(&path)?;
    let last = records.last().ok_or_else(|| CliError::Other(format!("{} is empty", path.display())))?;
    let metrics_path = run.join(METRICS_FILE);
    let steps: Vec<StepRecord> = if metrics_path.exists() { read_jsonl(&metrics_path)? } else { Vec::new() };

    std::fs::create_dir_all(out)?;
    let mut o = Out { dir: out, files: Vec::new() };

    o.csv(
        "usage.csv",
        &["step", "layer", "tower", "modality", "expert", "attempted", "served", "dropped", "capacity"],
        usage_rows(&records),
    )?;
    o.csv(
        "priority.csv",
        &["step", "layer", "tower", "modality", "bin", "bins", "tokens", "dropped_tokens"],
        priority_rows(&records),
    )?;
    o.csv(
        "flows.csv",
        &["step", "from_layer", "to_layer", "tower", "modality", "from_expert", "to_expert", "tokens"],
        flow_rows(&records),
    )?;

    for l in &last.layers {
        let cats: Vec<String> = (0..l.num_experts).map(|e| e.to_string()).collect();
        let series: Vec<(String, Vec<f64>)> = Modality::ALL
            .iter()
            .filter_map(|&m| l.get(m).map(|c| (format!("{m} served"), c.served.iter().map(|&x| x as f64).collect())))
            .collect();
        let cap = l.capacity.iter().sum::<usize>() as f64;
        let title = format!("expert usage, layer {}, step {}", layer_name(l), last.step);
        o.svg(&format!("usage_layer{}.svg", layer_name(l)), bar_chart(&title, &cats, &series, Some(cap)))?;

        let bins = l.image.as_ref().or(l.text.as_ref()).map_or(0, |c| c.priority_hist.len());
        let cats: Vec<String> = (0..bins).map(|b| b.to_string()).collect();
        let series: Vec<(String, Vec<f64>)> = Modality::ALL
            .iter()
            .filter_map(|&m| l.get(m).map(|c| (m.to_string(), c.priority_hist.iter().map(|&x| x as f64).collect())))
            .collect();
        let title = format!("dispatch position, layer {}, step {}", layer_name(l), last.step);
        o.svg(&format!("priority_layer{}.svg", layer_name(l)), bar_chart(&title, &cats, &series, None))?;
    }

    if !steps.is_empty() {
        o.csv(
            "timeseries.csv",
            &["step", "layer", "tower", "modality", "success", "global_entropy", "local_entropy"],
            step_layer_rows(&steps, |s| vec![s.success, s.global_entropy, s.local_entropy]),
        )?;
        o.csv(
            "pmax.csv",
            &["step", "layer", "tower", "modality", "p_max_mean", "p_max_std"],
            step_layer_rows(&steps, |s| vec![s.p_max_mean, s.p_max_std]),
        )?;
        o.csv(
            "loss.csv",
            &["step", "loss", "contrastive", "aux", "lr", "logit_scale"],
            steps.iter().map(|s| {
                vec![
                    s.step.to_string(),
                    s.loss.to_string(),
                    s.contrastive.to_string(),
                    s.aux.as_ref().map(|a| a.total.to_string()).unwrap_or_default(),
                    s.lr.to_string(),
                    s.logit_scale.to_string(),
                ]
            }),
        )?;
        o.svg("success.svg", line_chart("success rate", &step_series(&steps, |s| s.success)))?;
        o.svg("global_entropy.svg", line_chart("global routing entropy", &step_series(&steps, |s| s.global_entropy)))?;
        o.svg("local_entropy.svg", line_chart("local routing entropy", &step_series(&steps, |s| s.local_entropy)))?;
        o.svg("pmax.svg", line_chart("mean p_max", &step_series(&steps, |s| s.p_max_mean)))?;
        o.svg(
            "loss.svg",
            line_chart("loss", &[("total".into(), steps.iter().map(|s| (s.step as f64, s.loss)).collect())]),
        )?;
    }

    let mut final_success = Vec::new();
    for l in &last.layers {
        for m in Modality::ALL {
            if let Some(success) = success_of(l, m) {
                final_success.push(SuccessFlag { step: last.step, layer: l.layer, modality: m, success });
            }
        }
    }
    let flags = final_success.iter().filter(|f| f.success < 1.0).cloned().collect();
    o.files.push(REPORT_FILE.to_string());
    let report = AnalysisReport {
        schema_version: SCHEMA_VERSION,
        analytics_records: records.len(),
        metric_records: steps.len(),
        final_step: last.step,
        final_success,
        flags,
        files: o.files,
    };
    std::fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
