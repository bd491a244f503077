// SPDX-License-Identifier: Apache-2.0

mod common;

use common::{bin, read, tiny, write_config};
use moe_route::pruning::{PruneMode, PruneTarget, UsageBasis};
use moe_route::routing::Modality;
use moe_route::training::sink::{ANALYTICS_FILE, FINAL_CHECKPOINT, METRICS_FILE};
use moe_route_cli::eval::{cmd_eval, EvalArgs};
use moe_route_cli::prune::{cmd_prune, PruneArgs};
use moe_route_cli::run::{cmd_train, run_dir, SUMMARY_CSV, SUMMARY_JSON};
use moe_route_cli::soup::cmd_soup;

fn lines(p: &std::path::Path) -> usize {
    String::from_utf8(read(p)).unwrap().lines().count()
}

#[test]
fn smoke_run_writes_one_metric_record_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cmd_train(&tiny(50), &[0], tmp.path()).unwrap();
    assert_eq!(out.len(), 1);
    let dir = run_dir(tmp.path(), 0);
    assert_eq!(lines(&dir.join(METRICS_FILE)), 50);
    // Every tenth step plus the last.
    assert_eq!(lines(&dir.join(ANALYTICS_FILE)), 6);
    for f in [FINAL_CHECKPOINT, SUMMARY_JSON, SUMMARY_CSV, "config.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    assert_eq!(lines(&dir.join(SUMMARY_CSV)), 2);
}

#[test]
fn seed_list_gives_sibling_run_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny(5));
    let out = tmp.path().join("runs");
    let st = bin().args(["train", "--seed", "1,2,3", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let mut dirs: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    dirs.sort();
    assert_eq!(dirs, ["seed_1", "seed_2", "seed_3"]);
    assert_ne!(read(&out.join("seed_1").join(METRICS_FILE)), read(&out.join("seed_2").join(METRICS_FILE)));
}

#[test]
fn rerun_into_fresh_dir_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(20);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cmd_train(&cfg, &[4], &a).unwrap();
    cmd_train(&cfg, &[4], &b).unwrap();
    for f in [METRICS_FILE, ANALYTICS_FILE, FINAL_CHECKPOINT, SUMMARY_JSON, SUMMARY_CSV, "config.json"] {
        assert_eq!(read(&run_dir(&a, 4).join(f)), read(&run_dir(&b, 4).join(f)), "{f}");
    }
}

#[test]
fn eval_reads_config_from_checkpoint_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let s = cmd_train(&tiny(20), &[0], tmp.path()).unwrap().remove(0);
    let ckpt = run_dir(tmp.path(), 0).join(FINAL_CHECKPOINT);
    let r = cmd_eval(&ckpt, None, &EvalArgs::default()).unwrap();
    assert_eq!(r, s.eval);
    assert_eq!(r.batches, 2);
    let more = cmd_eval(&ckpt, None, &EvalArgs { batches: Some(3), ..Default::default() }).unwrap();
    assert_eq!(more.batches, 3);
    // A config with another architecture is rejected.
    let mut other = tiny(20);
    other.model.width = 16;
    assert!(cmd_eval(&ckpt, Some(&other), &EvalArgs::default()).is_err());
}

#[test]
fn larger_slack_serves_more_in_unimodal_eval() {
    let tmp = tempfile::tempdir().unwrap();
    cmd_train(&tiny(100), &[0], tmp.path()).unwrap();
    let ckpt = run_dir(tmp.path(), 0).join(FINAL_CHECKPOINT);
    let at = |slack| cmd_eval(&ckpt, None, &EvalArgs { unimodal: true, slack: Some(slack), ..Default::default() }).unwrap();
    let (low, high) = (at(1.0), at(16.0));
    for m in Modality::ALL {
        assert!(high.success[&m] >= low.success[&m], "{m}");
        assert_eq!(high.success[&m], 1.0);
    }
    let total = |r: &moe_route::training::eval::EvalReport| r.success.values().sum::<f64>();
    assert!(total(&high) > total(&low), "{:?} vs {:?}", low.success, high.success);
}

#[test]
fn prune_keep_all_matches_unpruned_eval() {
    let tmp = tempfile::tempdir().unwrap();
    cmd_train(&tiny(30), &[0], tmp.path()).unwrap();
    let run = run_dir(tmp.path(), 0);
    for mode in [PruneMode::RouterDrop, PruneMode::RouterPred] {
        let args = PruneArgs {
            modality: Modality::Text,
            target: PruneTarget::Keep(4),
            mode,
            window: 0.5,
            basis: UsageBasis::Served,
            evaluate: true,
        };
        let rep = cmd_prune(&run, &args, &tmp.path().join("prune")).unwrap();
        assert!(rep.prune.layers.values().all(|s| s.is_empty()));
        assert_eq!(rep.pruned, rep.unpruned);
    }
    let args = PruneArgs {
        modality: Modality::Text,
        target: PruneTarget::Keep(1),
        mode: PruneMode::RouterDrop,
        window: 0.5,
        basis: UsageBasis::Served,
        evaluate: false,
    };
    let rep = cmd_prune(&run, &args, &tmp.path().join("prune")).unwrap();
    assert!(rep.prune.layers.values().all(|s| s.len() == 3));
    assert!(tmp.path().join("prune").join("prune_text_router_drop.json").exists());
}

#[test]
fn soup_of_one_run_equals_that_run() {
    let tmp = tempfile::tempdir().unwrap();
    let s = cmd_train(&tiny(20), &[0], tmp.path()).unwrap().remove(0);
    let rep = cmd_soup(&[run_dir(tmp.path(), 0)], 4, &tmp.path().join("soup")).unwrap();
    assert_eq!(rep.result.counts, vec![1]);
    assert_eq!(rep.eval, s.eval);
    let again = cmd_eval(&tmp.path().join("soup").join("soup.ckpt"), None, &EvalArgs::default()).unwrap();
    assert_eq!(again, s.eval);
}

#[test]
fn soup_of_two_runs_writes_member_counts() {
    let tmp = tempfile::tempdir().unwrap();
    cmd_train(&tiny(20), &[0, 1], tmp.path()).unwrap();
    let runs = [run_dir(tmp.path(), 0), run_dir(tmp.path(), 1)];
    let rep = cmd_soup(&runs, 3, &tmp.path().join("soup")).unwrap();
    assert!(rep.result.counts.iter().sum::<usize>() >= 1);
    assert_eq!(rep.result.counts.len(), 2);
}
