// SPDX-License-Identifier: Apache-2.0

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use moe_route::analytics::{ExpertCounts, LayerAnalytics};
use moe_route::routing::Modality;
use moe_route::training::AnalyticsRecord;
use moe_route_cli::analyze::cmd_analyze;
use moe_route_cli::run::{cmd_train, run_dir};

fn counts(served: Vec<usize>, dropped: Vec<usize>) -> ExpertCounts {
    let attempted = served.iter().zip(&dropped).map(|(a, b)| a + b).collect();
    ExpertCounts { attempted, served, dropped, priority_hist: vec![1, 1], dropped_priority_hist: vec![0, 0] }
}

fn layer(layer: usize, image: ExpertCounts, text: ExpertCounts, flows: BTreeMap<Modality, Vec<Vec<usize>>>) -> LayerAnalytics {
    LayerAnalytics {
        layer,
        tower: None,
        num_experts: 4,
        top_k: 1,
        capacity: vec![2],
        groups: 1,
        image: Some(image),
        text: Some(text),
        flows,
    }
}

fn write_stream(dir: &Path, records: &[AnalyticsRecord]) {
    std::fs::create_dir_all(dir).unwrap();
    let mut f = std::fs::File::create(dir.join("analytics.jsonl")).unwrap();
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).unwrap()).unwrap();
    }
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(p).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn balanced_fixture_has_flat_usage_and_no_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let l = layer(1, counts(vec![1; 4], vec![0; 4]), counts(vec![1; 4], vec![0; 4]), BTreeMap::new());
    write_stream(tmp.path(), &[AnalyticsRecord { step: 0, layers: vec![l] }]);
    let rep = cmd_analyze(tmp.path(), &tmp.path().join("out")).unwrap();
    assert!(rep.flags.is_empty());
    assert!(rep.final_success.iter().all(|f| f.success == 1.0));
    assert_eq!(rep.final_success.len(), 2);
    let usage = csv_rows(&tmp.path().join("out/usage.csv"));
    assert_eq!(usage.len(), 8);
    assert!(usage.iter().all(|r| r[6] == "1" && r[8] == "2"));
    // Without a metrics stream only the analytics products exist.
    assert!(!tmp.path().join("out/timeseries.csv").exists());
    assert!(tmp.path().join("out/usage_layer1.svg").exists());
}

#[test]
fn collapse_fixture_flags_text_at_the_offending_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = layer(1, counts(vec![1; 4], vec![0; 4]), counts(vec![1; 4], vec![0; 4]), BTreeMap::new());
    // All four text tokens chose expert 0 with room for two.
    let bad = layer(2, counts(vec![1; 4], vec![0; 4]), counts(vec![2, 0, 0, 0], vec![2, 0, 0, 0]), BTreeMap::new());
    write_stream(tmp.path(), &[AnalyticsRecord { step: 9, layers: vec![ok, bad] }]);
    let rep = cmd_analyze(tmp.path(), &tmp.path().join("out")).unwrap();
    assert_eq!(rep.flags.len(), 1);
    let f = &rep.flags[0];
    assert_eq!((f.step, f.layer, f.modality, f.success), (9, 2, Modality::Text, 0.5));
}

#[test]
fn flow_rows_match_hand_trace() {
    // Four text tokens with top-1 experts (0, 1, 1, 3) at layer 1 and
    // (2, 2, 1, 3) at layer 2.
    let mut hand = vec![vec![0usize; 4]; 4];
    for (a, b) in [(0, 2), (1, 2), (1, 1), (3, 3)] {
        hand[a][b] += 1;
    }
    let first = layer(1, counts(vec![0; 4], vec![0; 4]), counts(vec![1, 2, 0, 1], vec![0; 4]), BTreeMap::new());
    let second = layer(2, counts(vec![0; 4], vec![0; 4]), counts(vec![0, 1, 2, 1], vec![0; 4]), BTreeMap::from([(Modality::Text, hand)]));
    let tmp = tempfile::tempdir().unwrap();
    write_stream(tmp.path(), &[AnalyticsRecord { step: 0, layers: vec![first, second] }]);
    cmd_analyze(tmp.path(), &tmp.path().join("out")).unwrap();
    let rows = csv_rows(&tmp.path().join("out/flows.csv"));
    assert_eq!(rows.len(), 16);
    let nonzero: Vec<(String, String, String, String, String)> = rows
        .iter()
        .filter(|r| r[7] != "0")
        .map(|r| (r[1].clone(), r[2].clone(), r[5].clone(), r[6].clone(), r[7].clone()))
        .collect();
    let s = |a: &str, b: &str, c: &str, d: &str, e: &str| (a.into(), b.into(), c.into(), d.into(), e.into());
    assert_eq!(nonzero, vec![s("1", "2", "0", "2", "1"), s("1", "2", "1", "1", "1"), s("1", "2", "1", "2", "1"), s("1", "2", "3", "3", "1")]);
}

#[test]
fn missing_stream_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(cmd_analyze(tmp.path(), &tmp.path().join("out")).is_err());
    std::fs::write(tmp.path().join("analytics.jsonl"), "").unwrap();
    assert!(cmd_analyze(tmp.path(), &tmp.path().join("out")).is_err());
}

#[test]
fn analysis_of_a_real_run_is_reproducible_from_the_streams() {
    let tmp = tempfile::tempdir().unwrap();
    cmd_train(&common::tiny(25), &[0], tmp.path()).unwrap();
    let run = run_dir(tmp.path(), 0);
    let a = cmd_analyze(&run, &tmp.path().join("a")).unwrap();
    // Remove everything except the streams before the second pass.
    for f in ["final.ckpt", "summary.json", "summary.csv", "config.json"] {
        std::fs::remove_file(run.join(f)).unwrap();
    }
    let b = cmd_analyze(&run, &tmp.path().join("b")).unwrap();
    assert_eq!(a, b);
    for f in &a.files {
        assert_eq!(common::read(&tmp.path().join("a").join(f)), common::read(&tmp.path().join("b").join(f)), "{f}");
    }
    let ts = csv_rows(&tmp.path().join("a/timeseries.csv"));
    // 25 steps, 2 MoE layers, 2 modalities.
    assert_eq!(ts.len(), 100);
}
