use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the student network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub depth: usize,
    pub experts_per_layer: usize,
    pub mlp_multiplier: usize,
    pub top_k: usize,
    pub seq_len: usize,
    pub obs_dim: usize,
    pub task_embed_dim: usize,
    pub action_dim: usize,
    pub heads: usize,
    pub causal: bool,
    pub use_aux: bool,
    pub aux_eps: f64,
    pub ln_eps: f64,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            depth: 5,
            experts_per_layer: 8,
            mlp_multiplier: 4,
            top_k: 1,
            seq_len: 20,
            obs_dim: 4,
            task_embed_dim: 16,
            action_dim: 2,
            heads: 8,
            causal: true,
            use_aux: true,
            aux_eps: 1e-9,
            ln_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Width of one input token: an observation concatenated with the task context.
    pub fn input_width(&self) -> usize {
        self.obs_dim + self.task_embed_dim
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("depth", self.depth),
            ("experts_per_layer", self.experts_per_layer),
            ("mlp_multiplier", self.mlp_multiplier),
            ("top_k", self.top_k),
            ("seq_len", self.seq_len),
            ("obs_dim", self.obs_dim),
            ("task_embed_dim", self.task_embed_dim),
            ("action_dim", self.action_dim),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.top_k > self.experts_per_layer {
            return Err(Error::Config(format!(
                "top_k {} exceeds experts_per_layer {}",
                self.top_k, self.experts_per_layer
            )));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if !(self.aux_eps > 0.0 && self.ln_eps > 0.0) {
            return Err(Error::Config("epsilons must be positive".into()));
        }
        Ok(())
    }
}

/// How new experts are added at a stage boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    pub experts_added_per_stage: usize,
    pub init_noise_std: f64,
    pub cold_start_bias: f64,
    pub gate_noise_std: f64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            experts_added_per_stage: 1,
            init_noise_std: 1e-2,
            cold_start_bias: -5.0,
            gate_noise_std: 1e-2,
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cold_start_bias < 0.0) {
            return Err(Error::Config("cold_start_bias must be negative".into()));
        }
        if !(self.init_noise_std >= 0.0 && self.gate_noise_std >= 0.0) {
            return Err(Error::Config("noise std must be non-negative".into()));
        }
        Ok(())
    }
}
