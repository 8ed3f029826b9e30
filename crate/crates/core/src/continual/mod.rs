//! Stage-wise continual distillation, baselines and the run protocol.

mod config;
mod data;
mod penalty;
mod protocol;
mod stage;

pub use config::{anneal_lambda, LambdaSchedule, ProtocolConfig, StageConfig, Strategy, TrainingConfig};
pub use data::{cut_windows, make_batch, window_starts, Batch, Sample};
pub use penalty::{fisher_from_gradients, kl_penalty, EwcEntry, EwcState};
pub use protocol::{
    eval_seed, routing_tsv, run_protocol, run_protocol_observed, stage_data, stage_dir, teacher_rates, ProtocolRun,
};
pub use stage::{
    batch_loss_and_grads, derive_seed, distill_loss, with_replay_share, Counters, Learner, StageEvent, StageOutcome,
    StudentPolicy,
};
