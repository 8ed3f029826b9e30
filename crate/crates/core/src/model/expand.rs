//! Stage-boundary growth of the expert pool.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{normal_tensor, ExpansionConfig, ExpertParams, StudentModel};
use crate::error::Result;
use crate::numerics::Tensor;

fn perturbed(rng: &mut ChaCha8Rng, src: &Tensor, std: f64) -> Tensor {
    let mut t = src.clone();
    if std > 0.0 {
        let dist = Normal::new(0.0, std).expect("positive std");
        for v in t.data_mut() {
            *v += dist.sample(rng);
        }
    }
    t
}

impl StudentModel {
    /// Adds `cfg.experts_added_per_stage` experts to every layer.
    ///
    /// Each new expert copies a uniformly drawn existing expert of its layer
    /// plus Gaussian noise of std `init_noise_std`. Its gate column starts at
    /// small noise and its bias at `cold_start_bias`, so the router initially
    /// prefers the old experts. New groups are trainable.
    pub fn expand_experts(&mut self, cfg: &ExpansionConfig, stage: usize, seed: u64) -> Result<()> {
        cfg.validate()?;
        if cfg.experts_added_per_stage == 0 {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..self.blocks.len() {
            let existing = self.blocks[l].moe.len();
            for _ in 0..cfg.experts_added_per_stage {
                let e = self.blocks[l].moe.len();
                let src = self.blocks[l].moe.experts[rng.random_range(0..existing)].clone();
                let p = format!("block{l}.moe");
                let copy = |rng: &mut ChaCha8Rng, id| perturbed(rng, self.params.tensor(id), cfg.init_noise_std);
                let (w1, b1, w2, b2) = (
                    copy(&mut rng, src.w1),
                    copy(&mut rng, src.b1),
                    copy(&mut rng, src.w2),
                    copy(&mut rng, src.b2),
                );
                let gate = normal_tensor(&mut rng, &[self.config.hidden_dim, 1], cfg.gate_noise_std);
                let params = &mut self.params;
                let gw = params.add(format!("{p}.gate{e}.w"), gate, true)?;
                let gb = params.add(format!("{p}.gate{e}.b"), Tensor::scalar(cfg.cold_start_bias), true)?;
                let expert = ExpertParams {
                    w1: params.add(format!("{p}.expert{e}.w1"), w1, true)?,
                    b1: params.add(format!("{p}.expert{e}.b1"), b1, true)?,
                    w2: params.add(format!("{p}.expert{e}.w2"), w2, true)?,
                    b2: params.add(format!("{p}.expert{e}.b2"), b2, true)?,
                    added_at_stage: stage,
                };
                let moe = &mut self.blocks[l].moe;
                moe.gate_w.push(gw);
                moe.gate_b.push(gb);
                moe.experts.push(expert);
            }
        }
        self.stage = stage;
        Ok(())
    }

    /// Per layer, the experts created at `stage`.
    pub fn experts_added_at(&self, stage: usize) -> Vec<Vec<usize>> {
        self.blocks
            .iter()
            .map(|b| {
                (0..b.moe.len())
                    .filter(|&e| b.moe.experts[e].added_at_stage == stage)
                    .collect()
            })
            .collect()
    }
}
