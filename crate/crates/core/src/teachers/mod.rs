//! Synthetic task suite on a 2-D point mass with scripted expert controllers.
//!
//! Observations are `(x, y, goal_x, goal_y)`. A task fixes a signed
//! permutation `D` mapping actions to motion, `s' = s + 0.1 * D * clip(a)`,
//! and a rule deriving the point to reach from the episode goal. Every
//! expert drives toward that point with `clip(kappa * D^T (target - pos))`.

mod collect;
mod io;

pub use collect::{collect, evaluate_policy, rollout, Policy, TeacherPolicy};
pub use io::{read_trajectories, write_trajectories};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OBS_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;
const STEP_SCALE: f64 = 0.1;
const START_RANGE: f64 = 0.8;
const GOAL_RANGE: f64 = 0.5;

/// How the point to reach is derived from the sampled goal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetRule {
    Goal,
    Offset {
        dx: f64,
        dy: f64,
    },
    /// Reflection through the origin.
    Mirror,
    /// Reflection across the vertical axis.
    MirrorX,
    /// Approach from `goal - standoff * dir` until laterally aligned with the
    /// push direction, then drive through to the goal.
    Push {
        dir_x: f64,
        dir_y: f64,
        standoff: f64,
        align_tol: f64,
    },
}

/// Reward as a function of the distance to the target; zero at the target
/// and strictly decreasing in the distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shaping {
    Linear,
    Quadratic,
    Log,
}

impl Shaping {
    pub fn reward(self, dist: f64) -> f64 {
        match self {
            Shaping::Linear => -dist,
            Shaping::Quadratic => -dist * dist,
            Shaping::Log => -(1.0 + dist / 0.1).ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub horizon: usize,
    /// Success threshold on the terminal distance to the target.
    pub delta: f64,
    /// Row-major 2x2 signed permutation applied to actions.
    pub dynamics: [f64; 4],
    pub target: TargetRule,
    pub shaping: Shaping,
    /// Recorded for completeness; the scripted experts do not use it.
    pub gamma: f64,
    pub kappa: f64,
    /// Std of Gaussian noise added to the expert's action during collection.
    pub teacher_noise: f64,
}

const ROT90: [f64; 4] = [0.0, -1.0, 1.0, 0.0];
const IDENTITY: [f64; 4] = [1.0, 0.0, 0.0, 1.0];
const NEGATE: [f64; 4] = [-1.0, 0.0, 0.0, -1.0];
const SWAP: [f64; 4] = [0.0, 1.0, 1.0, 0.0];

/// The ten task families of the suite, in suite order.
pub fn suite(horizon: usize, delta: f64) -> Vec<TaskSpec> {
    let push = TargetRule::Push {
        dir_x: 1.0,
        dir_y: 0.0,
        standoff: 0.3,
        align_tol: 0.05,
    };
    let rows: [(&str, [f64; 4], TargetRule, Shaping); 10] = [
        ("reach", IDENTITY, TargetRule::Goal, Shaping::Linear),
        ("mirror", IDENTITY, TargetRule::Mirror, Shaping::Linear),
        ("reach-rotated", ROT90, TargetRule::Goal, Shaping::Quadratic),
        (
            "offset-reach-right",
            IDENTITY,
            TargetRule::Offset { dx: 0.3, dy: 0.0 },
            Shaping::Linear,
        ),
        ("push", IDENTITY, push, Shaping::Linear),
        ("mirror-x", IDENTITY, TargetRule::MirrorX, Shaping::Log),
        ("reach-flipped", NEGATE, TargetRule::Goal, Shaping::Linear),
        (
            "offset-reach-down",
            IDENTITY,
            TargetRule::Offset { dx: 0.0, dy: -0.3 },
            Shaping::Quadratic,
        ),
        ("reach-swapped", SWAP, TargetRule::Goal, Shaping::Log),
        (
            "offset-reach-rotated",
            ROT90,
            TargetRule::Offset { dx: -0.3, dy: 0.3 },
            Shaping::Linear,
        ),
    ];
    rows.into_iter()
        .enumerate()
        .map(|(id, (name, dynamics, target, shaping))| TaskSpec {
            id,
            name: name.to_string(),
            horizon,
            delta,
            dynamics,
            target,
            shaping,
            gamma: 0.99,
            kappa: 5.0,
            teacher_noise: 0.0,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub stages: usize,
    pub tasks_per_stage: usize,
    pub horizon: usize,
    pub delta: f64,
    pub teacher_noise: f64,
    /// Shuffle the suite order with the stream seed.
    pub shuffle: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            stages: 5,
            tasks_per_stage: 2,
            horizon: 40,
            delta: 0.05,
            teacher_noise: 0.0,
            shuffle: false,
        }
    }
}

/// Ordered stages of tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub stages: Vec<Vec<TaskSpec>>,
}

impl TaskStream {
    pub fn tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.stages.iter().flatten()
    }

    /// Stage (1-based) at which each task id is introduced.
    pub fn intro_stage(&self, task: usize) -> Option<usize> {
        self.stages
            .iter()
            .position(|s| s.iter().any(|t| t.id == task))
            .map(|i| i + 1)
    }
}

pub fn make_task_stream(cfg: &SuiteConfig, seed: u64) -> Result<TaskStream> {
    if cfg.stages == 0 || cfg.tasks_per_stage == 0 {
        return Err(Error::Config("stream needs at least one stage and one task".into()));
    }
    if !(cfg.delta > 0.0) || cfg.horizon == 0 {
        return Err(Error::Config("delta and horizon must be positive".into()));
    }
    let mut tasks = suite(cfg.horizon, cfg.delta);
    let need = cfg.stages * cfg.tasks_per_stage;
    if need > tasks.len() {
        return Err(Error::Config(format!(
            "{} stages x {} tasks exceeds the suite of {}",
            cfg.stages,
            cfg.tasks_per_stage,
            tasks.len()
        )));
    }
    if cfg.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..tasks.len()).rev() {
            tasks.swap(i, rng.random_range(0..=i));
        }
    }
    for t in &mut tasks {
        t.teacher_noise = cfg.teacher_noise;
    }
    tasks.truncate(need);
    Ok(TaskStream {
        stages: tasks.chunks(cfg.tasks_per_stage).map(<[_]>::to_vec).collect(),
    })
}

fn apply(m: &[f64; 4], v: [f64; 2]) -> [f64; 2] {
    [m[0] * v[0] + m[1] * v[1], m[2] * v[0] + m[3] * v[1]]
}

fn apply_t(m: &[f64; 4], v: [f64; 2]) -> [f64; 2] {
    [m[0] * v[0] + m[2] * v[1], m[1] * v[0] + m[3] * v[1]]
}

fn clip(a: f64) -> f64 {
    a.clamp(-1.0, 1.0)
}

impl TaskSpec {
    /// Initial observation for an episode seed.
    pub fn reset(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (self.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut u = |r: f64| rng.random_range(-r..=r);
        let (x, y) = (u(START_RANGE), u(START_RANGE));
        let (gx, gy) = (u(GOAL_RANGE), u(GOAL_RANGE));
        vec![x, y, gx, gy]
    }

    /// The point the episode must end at.
    pub fn final_target(&self, state: &[f64]) -> [f64; 2] {
        let g = [state[2], state[3]];
        match self.target {
            TargetRule::Goal | TargetRule::Push { .. } => g,
            TargetRule::Offset { dx, dy } => [g[0] + dx, g[1] + dy],
            TargetRule::Mirror => [-g[0], -g[1]],
            TargetRule::MirrorX => [-g[0], g[1]],
        }
    }

    /// The point the expert currently steers toward.
    pub fn waypoint(&self, state: &[f64]) -> [f64; 2] {
        let g = self.final_target(state);
        if let TargetRule::Push {
            dir_x,
            dir_y,
            standoff,
            align_tol,
        } = self.target
        {
            let (ex, ey) = (state[0] - g[0], state[1] - g[1]);
            let lateral = (ex * -dir_y + ey * dir_x).abs();
            if lateral > align_tol {
                return [g[0] - standoff * dir_x, g[1] - standoff * dir_y];
            }
        }
        g
    }

    pub fn distance(&self, state: &[f64]) -> f64 {
        let t = self.final_target(state);
        (state[0] - t[0]).hypot(state[1] - t[1])
    }

    /// Applies one action; `done` is set by the caller's step count.
    pub fn step(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
        let a = [clip(action[0]), clip(action[1])];
        let d = apply(&self.dynamics, a);
        let next = vec![
            state[0] + STEP_SCALE * d[0],
            state[1] + STEP_SCALE * d[1],
            state[2],
            state[3],
        ];
        let r = self.shaping.reward(self.distance(&next));
        (next, r)
    }

    pub fn expert_action(&self, state: &[f64]) -> Vec<f64> {
        let w = self.waypoint(state);
        let err = [w[0] - state[0], w[1] - state[1]];
        let a = apply_t(&self.dynamics, err);
        vec![clip(self.kappa * a[0]), clip(self.kappa * a[1])]
    }

    pub fn succeeded(&self, state: &[f64]) -> bool {
        self.distance(state) < self.delta
    }
}

/// One episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task_id: usize,
    pub seed: u64,
    /// `horizon + 1` observations.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub success: bool,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.actions.len();
        if h == 0 || self.states.len() != h + 1 || self.rewards.len() != h {
            return Err(Error::Input(format!(
                "inconsistent trajectory lengths: {} states, {} actions, {} rewards",
                self.states.len(),
                h,
                self.rewards.len()
            )));
        }
        Ok(())
    }
}
