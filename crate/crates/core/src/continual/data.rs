//! Training windows and minibatches.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, WindowBatch};
use crate::numerics::Tensor;
use crate::teachers::Trajectory;

/// A window of `seq_len` consecutive steps of one trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    /// Index into the pool the sample was cut from.
    pub traj: usize,
    pub start: usize,
}

/// Window starts `phase, phase + stride, ...` plus the last full window.
pub fn window_starts(horizon: usize, len: usize, stride: usize, phase: usize) -> Vec<usize> {
    if horizon < len {
        return Vec::new();
    }
    let last = horizon - len;
    let mut starts: Vec<usize> = (phase.min(last)..=last).step_by(stride.max(1)).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Windows of every trajectory; trajectory `i` starts at phase `i % stride`
/// so that the pool covers every offset within a stride.
pub fn cut_windows(pool: &[&Trajectory], len: usize, stride: usize) -> Vec<Sample> {
    pool.iter()
        .enumerate()
        .flat_map(|(i, t)| {
            window_starts(t.horizon(), len, stride, i % stride.max(1))
                .into_iter()
                .map(move |start| Sample { traj: i, start })
        })
        .collect()
}

/// Model input and per-token teacher actions for a set of samples.
pub struct Batch {
    pub input: WindowBatch,
    /// `[batch * len, action_dim]`
    pub targets: Tensor,
    pub tasks: Vec<usize>,
}

/// Assembles samples of `pool` with each sample's task context.
pub fn make_batch(
    config: &ModelConfig,
    pool: &[&Trajectory],
    samples: &[Sample],
    context: impl Fn(usize) -> Result<Vec<f64>>,
) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let len = config.seq_len;
    let mut windows = Vec::with_capacity(samples.len());
    let mut contexts = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len() * len * config.action_dim);
    let mut tasks = Vec::with_capacity(samples.len());
    for s in samples {
        let t = pool[s.traj];
        windows.push(&t.states[s.start..s.start + len]);
        contexts.push(context(t.task_id)?);
        tasks.push(t.task_id);
        for a in &t.actions[s.start..s.start + len] {
            targets.extend_from_slice(a);
        }
    }
    let ctx: Vec<&[f64]> = contexts.iter().map(Vec::as_slice).collect();
    let input = WindowBatch::new(config, &windows, &ctx)?;
    let targets = Tensor::new(vec![samples.len() * len, config.action_dim], targets)?;
    Ok(Batch { input, targets, tasks })
}
