use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{TaskSpec, Trajectory};
use crate::error::{Error, Result};

/// Maps observation histories to actions, for many episodes in lockstep.
pub trait Policy: Sync {
    /// `histories[i]` holds every observation of episode `i` so far.
    fn act(&self, task: &TaskSpec, histories: &[&[Vec<f64>]]) -> Result<Vec<Vec<f64>>>;
}

/// The scripted expert of each task.
pub struct TeacherPolicy;

impl Policy for TeacherPolicy {
    fn act(&self, task: &TaskSpec, histories: &[&[Vec<f64>]]) -> Result<Vec<Vec<f64>>> {
        Ok(histories
            .iter()
            .map(|h| task.expert_action(h.last().expect("nonempty history")))
            .collect())
    }
}

/// Runs one expert episode, adding `task.teacher_noise` to executed actions.
pub fn rollout(task: &TaskSpec, seed: u64) -> Result<Trajectory> {
    let mut state = task.reset(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED));
    let noise = (task.teacher_noise > 0.0).then(|| Normal::new(0.0, task.teacher_noise).expect("positive std"));
    let mut traj = Trajectory {
        task_id: task.id,
        seed,
        states: vec![state.clone()],
        actions: Vec::with_capacity(task.horizon),
        rewards: Vec::with_capacity(task.horizon),
        success: false,
    };
    for _ in 0..task.horizon {
        let mut a = task.expert_action(&state);
        if let Some(n) = &noise {
            for v in &mut a {
                *v = (*v + n.sample(&mut noise_rng)).clamp(-1.0, 1.0);
            }
        }
        let (next, r) = task.step(&state, &a);
        if !next.iter().chain(&a).all(|v| v.is_finite()) {
            return Err(Error::Episode {
                seed,
                reason: "non-finite state".into(),
            });
        }
        traj.actions.push(a);
        traj.rewards.push(r);
        traj.states.push(next.clone());
        state = next;
    }
    traj.success = task.succeeded(&state);
    Ok(traj)
}

fn rollout_with_retry(task: &TaskSpec, seed: u64) -> Result<Trajectory> {
    match rollout(task, seed) {
        Ok(t) => Ok(t),
        Err(_) => rollout(task, seed).map_err(|e| Error::Episode {
            seed,
            reason: e.to_string(),
        }),
    }
}

/// Collects `n` expert episodes with seeds `base_seed + i`, using up to
/// `workers` threads. The result is ordered by episode index.
pub fn collect(task: &TaskSpec, n: usize, base_seed: u64, workers: usize) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::Input("need at least one episode".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let workers = workers.clamp(1, n);
    if workers == 1 {
        return seeds.iter().map(|&s| rollout_with_retry(task, s)).collect();
    }
    let chunk = n.div_ceil(workers);
    let parts: Vec<Result<Vec<Trajectory>>> = thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&s| rollout_with_retry(task, s)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Input("collection worker panicked".into())))
            })
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Fraction of `n` episodes (seeds `seed + i`) ending within `delta` of the
/// target. Episodes run in lockstep so the policy sees one batch per step.
pub fn evaluate_policy(policy: &dyn Policy, task: &TaskSpec, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Input("need at least one episode".into()));
    }
    let mut histories: Vec<Vec<Vec<f64>>> = (0..n as u64).map(|i| vec![task.reset(seed.wrapping_add(i))]).collect();
    for _ in 0..task.horizon {
        let views: Vec<&[Vec<f64>]> = histories.iter().map(Vec::as_slice).collect();
        let actions = policy.act(task, &views)?;
        for (h, a) in histories.iter_mut().zip(&actions) {
            let (next, _) = task.step(h.last().expect("nonempty"), a);
            h.push(next);
        }
    }
    let wins = histories
        .iter()
        .filter(|h| task.succeeded(h.last().expect("nonempty")))
        .count();
    Ok(wins as f64 / n as f64)
}
