// SPDX-License-Identifier: Apache-2.0

use super::*;
use crate::routing::RouterConfig;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model = crate::model::ModelConfig {
        width: 8,
        depth: 2,
        heads: 2,
        mlp_hidden: 16,
        moe_layers: vec![2],
        router: RouterConfig::joint(4, 1),
        output_dim: 8,
        vocab_size: 16,
        image_token_dim: 4,
        seq_len_image: 4,
        seq_len_text: 2,
        ..Default::default()
    };
    cfg.aux.tau_image = 4f64.ln() - 0.2;
    cfg.aux.tau_text = 2f64.ln();
    cfg.data.num_classes = 16;
    cfg.train.steps = 8;
    cfg.train.batch_size = 8;
    cfg.train.analytics_every = 3;
    cfg.train.eval_batch_size = 8;
    cfg
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut cfg = tiny();
    cfg.train.optimizer.lr = 0.0;
    let t = Trainer::new(cfg).unwrap();
    let init = t.init_state(3);
    let end = t.train(3, &mut NullSink).unwrap();
    assert_eq!(end.params, init.params);
    assert_eq!(end.step, 8);
}

#[test]
fn records_cover_every_step() {
    let t = Trainer::new(tiny()).unwrap();
    let mut sink = MemorySink::default();
    t.train(0, &mut sink).unwrap();
    assert_eq!(sink.steps.len(), 8);
    assert_eq!(sink.steps.iter().map(|r| r.step).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
    // Every third step plus the last one.
    assert_eq!(sink.analytics.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 3, 6, 7]);
    let r = &sink.steps[0];
    assert_eq!(r.layers.len(), 1);
    assert!(r.aux.as_ref().unwrap().losses.contains_key("load"));
    assert!((r.logit_scale - 10.0).abs() < 0.1);
}

#[test]
fn same_seed_same_stream_different_seed_differs() {
    let t = Trainer::new(tiny()).unwrap();
    let run = |seed| {
        let mut s = MemorySink::default();
        t.train(seed, &mut s).unwrap();
        s.steps
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let t = Trainer::new(tiny()).unwrap();
    let mut full = MemorySink::default();
    let end = t.train(2, &mut full).unwrap();

    let mut first = MemorySink::default();
    let mut state = t.init_state(2);
    t.run(&mut state, 2, 3, &mut first).unwrap();
    let mut bytes = Vec::new();
    state.to_checkpoint(2, Some(&t.cfg)).write_to(&mut bytes).unwrap();
    let ckpt = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    let (mut resumed, seed, cfg) = TrainState::from_checkpoint(&ckpt).unwrap();
    assert_eq!(seed, 2);
    assert_eq!(cfg.as_ref(), Some(&t.cfg));
    assert_eq!(resumed, state);
    let mut second = MemorySink::default();
    t.run(&mut resumed, 2, 8, &mut second).unwrap();

    assert_eq!(resumed, end);
    let mut joined = first.steps.clone();
    joined.extend(second.steps);
    assert_eq!(joined, full.steps);
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let t = Trainer::new(tiny()).unwrap();
    let mut state = t.init_state(0);
    state.params.get_mut("head/log_scale").unwrap().data_mut()[0] = f64::NAN;
    let mut sink = MemorySink::default();
    let err = t.run(&mut state, 0, 4, &mut sink).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { step: 0, .. }), "{err}");
    let (snap, reason) = sink.aborted.unwrap();
    assert_eq!(snap.step, 0);
    assert!(reason.contains("non-finite"));
}

#[test]
fn dir_sink_writes_streams_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.checkpoint_every = 4;
    let t = Trainer::new(cfg).unwrap();
    let end = t.train(1, &mut DirSink::create(dir.path()).unwrap()).unwrap();
    let steps: Vec<StepRecord> = sink::read_jsonl(&dir.path().join(sink::METRICS_FILE)).unwrap();
    assert_eq!(steps.len(), 8);
    let analytics: Vec<AnalyticsRecord> = sink::read_jsonl(&dir.path().join(sink::ANALYTICS_FILE)).unwrap();
    assert_eq!(analytics.len(), 4);
    assert!(dir.path().join("step_000004.ckpt").exists());
    let (state, seed, _) = TrainState::load(&dir.path().join(sink::FINAL_CHECKPOINT)).unwrap();
    assert_eq!((state, seed), (end, 1));
}

#[test]
fn evaluation_runs_and_is_deterministic() {
    let t = Trainer::new(tiny()).unwrap();
    let state = t.init_state(0);
    let batches: Vec<_> = (0..2).map(|i| t.task.eval_batch(i, 8)).collect();
    let a = eval::evaluate(&t.model, &state.params, &batches, &eval::EvalOptions::default(), 0).unwrap();
    let b = eval::evaluate(&t.model, &state.params, &batches, &eval::EvalOptions::default(), 0).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.accuracy));
    assert_eq!(a.layer_success.len(), 1);
    let uni = eval::EvalOptions { unimodal: true, slack: Some(100.0), ..Default::default() };
    let u = eval::evaluate(&t.model, &state.params, &batches, &uni, 0).unwrap();
    assert_eq!(u.success[&crate::routing::Modality::Text], 1.0);
    assert_eq!(u.success[&crate::routing::Modality::Image], 1.0);
}

#[test]
fn average_of_states() {
    let t = Trainer::new(tiny()).unwrap();
    let a = t.init_state(0).params;
    let b = t.init_state(1).params;
    let avg = average_params(&[&a, &b], &[1, 1]).unwrap();
    let (x, y, z) = (a.get("head/image").unwrap(), b.get("head/image").unwrap(), avg.get("head/image").unwrap());
    for ((x, y), z) in x.data().iter().zip(y.data()).zip(z.data()) {
        assert!((0.5 * (x + y) - z).abs() < 1e-15);
    }
    assert!(average_params(&[&a], &[0]).is_err());
}
