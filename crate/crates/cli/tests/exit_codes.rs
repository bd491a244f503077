// SPDX-License-Identifier: Apache-2.0

mod common;

use common::{bin, tiny, write_config};

#[test]
fn invalid_config_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    std::fs::write(&p, r#"{"model": {"widht": 8}}"#).unwrap();
    let st = bin().args(["train", "--config"]).arg(&p).arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&st.stderr).contains("widht"));

    let cfg = write_config(tmp.path(), &tiny(3));
    let st = bin().args(["train", "--set", "model.router.top_k=7", "--config"]).arg(&cfg).arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    let st = bin().args(["train", "--seed", "x"]).arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    let st = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
}

#[test]
fn divergent_run_exits_2_and_leaves_a_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny(5));
    let out = tmp.path().join("runs");
    let st = bin().args(["train", "--set", "train.optimizer.lr=1e300", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(st.status.code(), Some(2), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(out.join("seed_0/abort.json").exists());
    assert!(out.join("seed_0/abort_snapshot.ckpt").exists());
}

#[test]
fn successful_commands_exit_0_and_print_json() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny(10));
    let out = tmp.path().join("runs");
    let st = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(st.status.success());
    let v: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(v[0]["steps"], 10);

    let run = out.join("seed_0");
    let st = bin().arg("analyze").arg(&run).output().unwrap();
    assert!(st.status.success());
    assert!(run.join("analysis/report.json").exists());

    let st = bin().args(["prune", "--modality", "text", "--keep", "2", "--window", "1"]).arg(&run).output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let prune = run.join("prune/prune_text_router_drop.json");
    let st = bin().args(["eval", "--unimodal", "--prune"]).arg(&prune).arg(run.join("final.ckpt")).arg("--out").arg(tmp.path().join("ev")).output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(tmp.path().join("ev/eval.json").exists());

    let st = bin().args(["soup", "--max-size", "2"]).arg(&run).arg("--out").arg(tmp.path().join("soup")).output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(tmp.path().join("soup/soup.json").exists());

    let st = bin().args(["prune", "--modality", "text", "--keep", "9"]).arg(&run).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
}
