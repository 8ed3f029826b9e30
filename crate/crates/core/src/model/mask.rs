//! Trainability schedule across stages.
//!
//! Stage 1 trains everything. From stage 2 on the shared backbone (token and
//! position embeddings, layer norms, attention, final norm and action head)
//! stays frozen. Phase 1 trains the gate and the experts born this stage;
//! phase 2 freezes the gate and trains every expert.

use super::StudentModel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupRole {
    Backbone,
    Gate {
        layer: usize,
    },
    Expert {
        layer: usize,
        expert: usize,
        added_at_stage: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

/// The outcome of a schedule application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// Whether the task encoder may be updated under this assignment.
    pub encoder_trainable: bool,
}

/// Sets every group's trainable flag for `(stage, phase)`.
pub fn apply_mask_schedule(model: &mut StudentModel, stage: usize, phase: Phase) -> Result<MaskPlan> {
    if stage == 0 {
        return Err(Error::Schedule("stages are numbered from 1".into()));
    }
    if stage == 1 && phase == Phase::Two {
        return Err(Error::Schedule("stage 1 has no second phase".into()));
    }
    for (id, role) in model.group_roles() {
        let trainable = match (stage, phase, role) {
            (1, _, _) => true,
            (_, _, GroupRole::Backbone) => false,
            (_, Phase::One, GroupRole::Gate { .. }) => true,
            (_, Phase::One, GroupRole::Expert { added_at_stage, .. }) => added_at_stage == stage,
            (_, Phase::Two, GroupRole::Gate { .. }) => false,
            (_, Phase::Two, GroupRole::Expert { .. }) => true,
        };
        model.params.set_trainable(id, trainable);
    }
    Ok(MaskPlan {
        encoder_trainable: phase == Phase::One,
    })
}

/// Marks every group trainable (baselines without masking).
pub fn unfreeze_all(model: &mut StudentModel) {
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        model.params.set_trainable(id, true);
    }
}
