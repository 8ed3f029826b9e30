use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpansionConfig, ModelConfig};
use crate::replay::SelectStrategy;
use crate::taskctx::EncoderConfig;
use crate::teachers::SuiteConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Expert expansion, two-phase masking and replay.
    Ours,
    /// Plain sequential training.
    Finetune,
    /// Quadratic penalty weighted by a diagonal Fisher estimate.
    Ewc,
    /// Penalty on the action-mean shift from the previous stage's model.
    Kl,
    ReplayOnly,
    ExpertOnly,
    /// A fresh student for every stage.
    Independent,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Ours,
        Strategy::Finetune,
        Strategy::Ewc,
        Strategy::Kl,
        Strategy::ReplayOnly,
        Strategy::ExpertOnly,
        Strategy::Independent,
    ];

    pub fn expands(self) -> bool {
        matches!(self, Strategy::Ours | Strategy::ExpertOnly)
    }

    pub fn replays(self) -> bool {
        matches!(self, Strategy::Ours | Strategy::ReplayOnly)
    }

    /// Whether the stage-dependent trainability schedule applies.
    pub fn masks(self) -> bool {
        self.expands()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Ours => "ours",
            Strategy::Finetune => "finetune",
            Strategy::Ewc => "ewc",
            Strategy::Kl => "kl",
            Strategy::ReplayOnly => "replay_only",
            Strategy::ExpertOnly => "expert_only",
            Strategy::Independent => "independent",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s}")))
    }
}

/// Linearly decaying weight of the load-balancing term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LambdaSchedule {
    pub start: f64,
    pub decrement: f64,
    pub floor: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self {
            start: 0.01,
            decrement: 0.00005,
            floor: 0.0001,
        }
    }
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.decrement >= 0.0 && self.floor >= 0.0 && self.start >= self.floor) {
            return Err(Error::Config(
                "lambda schedule needs start >= floor >= 0 and decrement >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// `max(floor, start - t * decrement)`.
pub fn anneal_lambda(schedule: &LambdaSchedule, t: u64) -> f64 {
    (schedule.start - t as f64 * schedule.decrement).max(schedule.floor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Epochs run under the first masking phase at stages after the first.
    pub phase1_epochs: usize,
    /// When set, every stage runs exactly this many optimizer steps; epoch
    /// boundaries still fall after each full pass over the data.
    pub steps_per_stage: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub distill_episodes: usize,
    /// Start offset between consecutive training windows of one trajectory.
    pub window_stride: usize,
    pub replay_m: usize,
    pub replay_budget: f64,
    pub replay_strategy: SelectStrategy,
    /// Minimum fraction of each epoch's windows drawn from the replay
    /// buffer, reached by repeating it whole; unset means plain concatenation.
    pub replay_share: Option<f64>,
    pub eval_episodes: usize,
    /// Trajectories per task from which its context is inferred.
    pub support_size: usize,
    /// Optimizer steps between context recomputations.
    pub context_refresh: usize,
    pub encoder_batch: usize,
    /// Last stage in which the task encoder trains; unset means every stage.
    pub encoder_last_stage: Option<usize>,
    /// When set, a stage that trains the encoder first takes this many
    /// InfoNCE steps and then keeps the encoder fixed, so the student never
    /// sees contexts move. Unset means one encoder step per student step.
    pub encoder_pretrain_steps: Option<usize>,
    pub lambda_ewc: f64,
    pub fisher_batches: usize,
    pub kl_sigma: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            phase1_epochs: 1,
            steps_per_stage: None,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 0.01,
            distill_episodes: 131,
            window_stride: 1,
            replay_m: 10,
            replay_budget: 0.10,
            replay_strategy: SelectStrategy::Dpp,
            replay_share: None,
            eval_episodes: 50,
            support_size: 8,
            context_refresh: 50,
            encoder_batch: 32,
            encoder_last_stage: None,
            encoder_pretrain_steps: None,
            lambda_ewc: 100.0,
            fisher_batches: 8,
            kl_sigma: 1.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("distill_episodes", self.distill_episodes),
            ("window_stride", self.window_stride),
            ("eval_episodes", self.eval_episodes),
            ("support_size", self.support_size),
            ("context_refresh", self.context_refresh),
            ("encoder_batch", self.encoder_batch),
            ("fisher_batches", self.fisher_batches),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("training.{name} must be positive")));
        }
        if !(self.lr > 0.0 && self.kl_sigma > 0.0 && self.lambda_ewc >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and kl_sigma must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.replay_budget) {
            return Err(Error::Config("replay_budget must lie in [0, 1]".into()));
        }
        if self.replay_share.is_some_and(|r| !(0.0..1.0).contains(&r)) {
            return Err(Error::Config("replay_share must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Everything a protocol run depends on; stored as the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub seed: u64,
    pub strategy: Strategy,
    /// Threads for teacher collection.
    pub workers: usize,
    pub suite: SuiteConfig,
    pub model: ModelConfig,
    pub expansion: ExpansionConfig,
    pub encoder: EncoderConfig,
    pub lambda: LambdaSchedule,
    pub training: TrainingConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            strategy: Strategy::Ours,
            workers: 1,
            suite: SuiteConfig::default(),
            model: ModelConfig::default(),
            expansion: ExpansionConfig::default(),
            encoder: EncoderConfig::default(),
            lambda: LambdaSchedule::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.expansion.validate()?;
        self.lambda.validate()?;
        self.training.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        if self.model.obs_dim != crate::teachers::OBS_DIM || self.model.action_dim != crate::teachers::ACTION_DIM {
            return Err(Error::Config(format!(
                "the task suite needs obs_dim {} and action_dim {}",
                crate::teachers::OBS_DIM,
                crate::teachers::ACTION_DIM
            )));
        }
        if self.encoder.embed_dim != self.model.task_embed_dim {
            return Err(Error::Config(
                "encoder.embed_dim must equal model.task_embed_dim".into(),
            ));
        }
        if !self.suite.horizon.is_multiple_of(self.model.seq_len) {
            return Err(Error::Config(format!(
                "horizon {} is not a multiple of seq_len {}",
                self.suite.horizon, self.model.seq_len
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The settings of stage `stage` (1-based) teaching `task_ids`.
    pub fn stage_config(&self, stage: usize, task_ids: Vec<usize>) -> StageConfig {
        StageConfig {
            stage,
            task_ids,
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            lr: self.training.lr,
            distill_episodes: self.training.distill_episodes,
            replay_m: self.training.replay_m,
            strategy: self.strategy,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-stage view of the protocol configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: usize,
    pub task_ids: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub distill_episodes: usize,
    pub replay_m: usize,
    pub strategy: Strategy,
}
