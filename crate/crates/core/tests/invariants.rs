//! Structural properties of the student, the training loop and the buffer.

mod common;

use common::{is_backbone, is_gate, is_old_expert, snapshot, tiny, unchanged};
use moe_distill::continual::{
    anneal_lambda, run_protocol, run_protocol_observed, with_replay_share, LambdaSchedule, Sample, StageEvent, Strategy,
};
use moe_distill::model::{ForwardOptions, ModelConfig, StudentModel, WindowBatch};
use moe_distill::numerics::{Graph, Tensor};
use moe_distill::replay::ReplayBuffer;
use moe_distill::teachers::Trajectory;
use proptest::prelude::*;

fn model(seed: u64) -> StudentModel {
    StudentModel::new(ModelConfig {
        hidden_dim: 16,
        depth: 2,
        experts_per_layer: 3,
        top_k: 2,
        mlp_multiplier: 2,
        heads: 2,
        seq_len: 6,
        init_seed: seed,
        ..Default::default()
    })
    .unwrap()
}

fn window(seed: u64, len: usize) -> Vec<Vec<f64>> {
    (0..len)
        .map(|t| {
            (0..4)
                .map(|j| ((seed as f64 + 1.3) * (t * 4 + j + 1) as f64).sin())
                .collect()
        })
        .collect()
}

fn actions(m: &StudentModel, w: &[Vec<f64>], z: &[f64]) -> Tensor {
    let batch = WindowBatch::new(&m.config, &[w], &[z]).unwrap();
    let mut g = Graph::new();
    let bind = g.bind(&m.params).unwrap();
    let out = m.forward(&mut g, &bind, &batch, &ForwardOptions::default()).unwrap();
    g.value(out.actions).clone()
}

#[test]
fn outputs_ignore_later_positions() {
    let m = model(1);
    let z = vec![0.25; 16];
    let w = window(2, 6);
    let base = actions(&m, &w, &z);
    for t in 0..6 {
        let mut changed = w.clone();
        for s in changed.iter_mut().skip(t) {
            s[0] += 0.7;
            s[3] -= 0.4;
        }
        let out = actions(&m, &changed, &z);
        for r in 0..t {
            assert_eq!(out.row(r), base.row(r), "position {r} saw a change at {t}");
        }
        assert_ne!(out.row(t), base.row(t));
    }
}

#[test]
fn prediction_is_deterministic() {
    let m = model(3);
    let w = window(4, 5);
    let z = vec![-0.25; 16];
    assert_eq!(m.predict_action(&w, &z).unwrap(), m.predict_action(&w, &z).unwrap());
    assert_eq!(
        model(3).predict_action(&w, &z).unwrap(),
        m.predict_action(&w, &z).unwrap()
    );
}

#[test]
fn routing_counts_match_top_k() {
    let m = model(5);
    let ws: Vec<Vec<Vec<f64>>> = (0..4).map(|s| window(s, 6)).collect();
    let views: Vec<&[Vec<f64>]> = ws.iter().map(Vec::as_slice).collect();
    let z = vec![0.25; 16];
    let batch = WindowBatch::new(&m.config, &views, &[z.as_slice(); 4]).unwrap();
    for s in m.routing_stats(&batch).unwrap() {
        assert_eq!(s.loads.iter().sum::<f64>(), (2 * s.tokens) as f64);
        assert!((s.importance.iter().sum::<f64>() - s.tokens as f64).abs() < 1e-9);
        assert!(s.importance.iter().all(|&p| p >= 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, 5), 1..6)) {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&rows).unwrap()).unwrap();
        let p = g.softmax(x).unwrap();
        let p = g.value(p);
        for r in 0..p.rows() {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn lambda_never_increases(t in 0u64..2_000_000, dt in 1u64..10_000) {
        let s = LambdaSchedule::default();
        prop_assert!(anneal_lambda(&s, t + dt) <= anneal_lambda(&s, t));
        prop_assert!(anneal_lambda(&s, t) >= s.floor);
    }

    #[test]
    fn buffer_never_exceeds_budget(steps in proptest::collection::vec((1usize..200, 0usize..40), 1..8)) {
        let mut buf = ReplayBuffer::new(0.1).unwrap();
        for (k, (seen, picks)) in steps.into_iter().enumerate() {
            let selected: Vec<Trajectory> = (0..picks)
                .map(|i| Trajectory {
                    task_id: k,
                    seed: i as u64,
                    states: vec![vec![0.0; 4]; 2],
                    actions: vec![vec![0.0; 2]],
                    rewards: vec![0.0],
                    success: false,
                })
                .collect();
            let before = buf.clone();
            if buf.update(seen, selected).is_err() {
                prop_assert_eq!(&buf, &before);
            }
            prop_assert!(buf.len() <= buf.capacity_for(buf.seen));
        }
    }

    #[test]
    fn replay_share_keeps_every_window(fresh in 1usize..200, replayed in 1usize..50, share in 0.0f64..0.9) {
        let samples: Vec<Sample> = (0..fresh + replayed).map(|i| Sample { traj: i, start: 0 }).collect();
        let out = with_replay_share(samples, fresh, fresh, share);
        let counts: Vec<usize> = (fresh..fresh + replayed)
            .map(|i| out.iter().filter(|s| s.traj == i).count())
            .collect();
        prop_assert!(counts.iter().all(|&c| c >= 1 && c == counts[0]));
        prop_assert_eq!(out.iter().filter(|s| s.traj < fresh).count(), fresh);
        let got = (replayed * counts[0]) as f64 / out.len() as f64;
        prop_assert!(got + 1e-12 >= share);
    }
}

#[test]
fn masks_hold_across_a_stage_two_run() {
    let mut cfg = tiny(Strategy::Ours, 2);
    cfg.training.steps_per_stage = None;
    cfg.training.epochs = 2;
    cfg.training.distill_episodes = 4;
    let mut stage1_end = None;
    let mut epoch_start = None;
    let mut checks = Vec::new();
    run_protocol_observed(&cfg, None, &mut |stage, event, m| match (stage, event) {
        (1, StageEvent::EpochEnd(1)) => stage1_end = Some(snapshot(m, is_backbone)),
        (2, StageEvent::EpochStart(0)) => epoch_start = Some(snapshot(m, is_old_expert(2))),
        (2, StageEvent::EpochEnd(0)) => {
            checks.push(("old experts in phase 1", unchanged(epoch_start.as_ref().unwrap(), m)));
            epoch_start = Some(snapshot(m, is_gate));
        }
        (2, StageEvent::EpochEnd(1)) => {
            checks.push(("gate in phase 2", unchanged(epoch_start.as_ref().unwrap(), m)));
            checks.push(("backbone after stage 1", unchanged(stage1_end.as_ref().unwrap(), m)));
        }
        _ => {}
    })
    .unwrap();
    assert_eq!(checks.len(), 3);
    for (what, ok) in checks {
        assert!(ok, "{what} changed");
    }
}

#[test]
fn finetune_never_touches_expansion_or_replay() {
    let run = run_protocol(&tiny(Strategy::Finetune, 3), None).unwrap();
    let c = &run.learner.counters;
    assert_eq!((c.expansions, c.replay_selections, c.replay_batches), (0, 0, 0));
    assert!(run.learner.buffer.is_empty());
    assert_eq!(run.learner.student.experts_per_layer(), vec![2, 2]);
    assert!(run.learner.student.params.iter().all(|(_, g)| g.trainable));

    let ours = run_protocol(&tiny(Strategy::Ours, 3), None).unwrap();
    let c = &ours.learner.counters;
    assert_eq!((c.expansions, c.replay_selections), (2, 3));
    assert!(c.replay_batches > 0);
    assert_eq!(ours.learner.student.experts_per_layer(), vec![4, 4]);
}

#[test]
fn pretrained_encoder_ignores_student_steps() {
    let encoded = |pretrain: Option<usize>, steps: usize| {
        let mut cfg = tiny(Strategy::Ours, 1);
        cfg.training.encoder_pretrain_steps = pretrain;
        cfg.training.steps_per_stage = Some(steps);
        let run = run_protocol(&cfg, None).unwrap();
        let support = &run.learner.supports[&0];
        run.learner.encoder.encode(&support[0]).unwrap()
    };
    assert_eq!(encoded(Some(4), 2), encoded(Some(4), 9));
    assert_ne!(encoded(None, 2), encoded(None, 9));
    assert_ne!(encoded(Some(4), 2), encoded(Some(0), 2));
}
