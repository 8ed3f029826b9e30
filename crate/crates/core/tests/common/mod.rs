#![allow(dead_code)]

use moe_distill::continual::{distill_loss, make_batch, Batch, ProtocolConfig, Sample, Strategy};
use moe_distill::model::{GroupRole, ModelConfig, StudentModel};
use moe_distill::numerics::{eval_with_gradients, Bindings, Graph, ParamStore, Tensor, Var};
use moe_distill::teachers::{collect, suite};
use moe_distill::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A protocol small enough to run every stage in well under a second.
pub fn tiny(strategy: Strategy, stages: usize) -> ProtocolConfig {
    let mut cfg = ProtocolConfig {
        strategy,
        ..Default::default()
    };
    cfg.suite.stages = stages;
    cfg.model = ModelConfig {
        hidden_dim: 8,
        depth: 2,
        experts_per_layer: 2,
        mlp_multiplier: 2,
        top_k: 1,
        seq_len: 10,
        heads: 2,
        ..Default::default()
    };
    let t = &mut cfg.training;
    t.batch_size = 8;
    t.lr = 1e-3;
    t.distill_episodes = 8;
    t.eval_episodes = 4;
    t.steps_per_stage = Some(3);
    t.support_size = 4;
    t.encoder_batch = 8;
    t.replay_m = 2;
    t.replay_budget = 0.25;
    t.fisher_batches = 2;
    t.context_refresh = 2;
    cfg
}

/// Names and values of the groups whose role satisfies `keep`.
pub fn snapshot(model: &StudentModel, keep: impl Fn(GroupRole) -> bool) -> Vec<(String, Tensor)> {
    model
        .group_roles()
        .into_iter()
        .filter(|(_, r)| keep(*r))
        .map(|(id, _)| {
            let g = model.params.get(id);
            (g.name.clone(), g.tensor.clone())
        })
        .collect()
}

/// Whether every group of `before` holds bit-identical values in `after`.
pub fn unchanged(before: &[(String, Tensor)], after: &StudentModel) -> bool {
    before.iter().all(|(name, t)| {
        let id = after.params.id(name).expect("group still present");
        after
            .params
            .tensor(id)
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    })
}

pub fn is_backbone(r: GroupRole) -> bool {
    matches!(r, GroupRole::Backbone)
}

pub fn is_gate(r: GroupRole) -> bool {
    matches!(r, GroupRole::Gate { .. })
}

/// Experts that existed before `stage`.
pub fn is_old_expert(stage: usize) -> impl Fn(GroupRole) -> bool {
    move |r| matches!(r, GroupRole::Expert { added_at_stage, .. } if added_at_stage < stage)
}

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

/// Worst relative error between backprop and central differences over every
/// trainable entry of `store`.
pub fn max_rel_error<F>(store: &ParamStore, build: F) -> f64
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let (_, grads) = eval_with_gradients(store, &build).unwrap();
    let value = |s: &ParamStore| eval_with_gradients(s, &build).unwrap().0;
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for (id, group) in store.iter() {
        if !group.trainable {
            continue;
        }
        let analytic = grads.get(id).unwrap();
        for i in 0..group.tensor.len() {
            let x = group.tensor.data()[i];
            probe.get_mut(id).tensor.data_mut()[i] = x + H;
            let up = value(&probe);
            probe.get_mut(id).tensor.data_mut()[i] = x - H;
            let down = value(&probe);
            probe.get_mut(id).tensor.data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Worst gradient error of distillation plus balance loss on a hidden-16 student.
pub fn gradcheck_student(seed: u64) -> f64 {
    let cfg = ModelConfig {
        hidden_dim: 16,
        depth: 2,
        experts_per_layer: 2,
        mlp_multiplier: 2,
        heads: 2,
        seq_len: 4,
        init_seed: seed,
        ..Default::default()
    };
    let model = StudentModel::new(cfg.clone()).unwrap();
    let task = &suite(40, 0.05)[0];
    let data = collect(task, 2, seed, 1).unwrap();
    let pool: Vec<_> = data.iter().collect();
    let samples = [Sample { traj: 0, start: 3 }, Sample { traj: 1, start: 20 }];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..16).map(|_| rng.random_range(-0.25..0.25)).collect();
    let batch: Batch = make_batch(&cfg, &pool, &samples, |_| Ok(z.clone())).unwrap();
    max_rel_error(&model.params, |g, b| Ok(distill_loss(&model, g, b, &batch, 0.01)?.0))
}
