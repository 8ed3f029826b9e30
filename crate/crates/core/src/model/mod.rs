//! The student policy: a decoder-only pre-norm Transformer whose feed-forward
//! sublayers are sparse mixtures of experts.
//!
//! Every token is one observation concatenated with the task context vector,
//! linearly embedded and offset by a learned position embedding. Each block
//! computes
//!
//! ```text
//! h' = MSA(LN(h)) + h
//! h  = MoE(LN(h')) + h'
//! ```
//!
//! and a linear head on the final-normalized last token gives the action mean.

mod config;
mod expand;
mod mask;
pub mod moe;
mod persist;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{ExpansionConfig, ModelConfig};
pub use mask::{apply_mask_schedule, unfreeze_all, GroupRole, MaskPlan, Phase};
pub use moe::{top_k_indices, ExpertParams, GatingStats, MoELayer};

use crate::error::{Error, Result};
use crate::numerics::{Bindings, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub attn: AttentionParams,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub moe: MoELayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Index of the stage the model was last trained or expanded for.
    pub stage: usize,
}

/// A batch of equal-length observation windows, each paired with a context.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub batch: usize,
    pub len: usize,
    /// `[batch * len, obs_dim + task_embed_dim]`
    pub tokens: Tensor,
}

impl WindowBatch {
    /// Concatenates every observation with its window's context vector.
    pub fn new(config: &ModelConfig, windows: &[&[Vec<f64>]], contexts: &[&[f64]]) -> Result<Self> {
        if windows.is_empty() || windows.len() != contexts.len() {
            return Err(Error::Input("need one context per window".into()));
        }
        let len = windows[0].len();
        if len == 0 {
            return Err(Error::Input("empty window".into()));
        }
        if len > config.seq_len {
            return Err(Error::Truncation {
                len,
                max: config.seq_len,
            });
        }
        let width = config.input_width();
        let mut data = Vec::with_capacity(windows.len() * len * width);
        for (w, z) in windows.iter().zip(contexts) {
            if w.len() != len {
                return Err(Error::Input("windows in one batch must share a length".into()));
            }
            if z.len() != config.task_embed_dim {
                return Err(Error::Dimension(format!(
                    "context of width {} for task_embed_dim {}",
                    z.len(),
                    config.task_embed_dim
                )));
            }
            for s in w.iter() {
                if s.len() != config.obs_dim {
                    return Err(Error::Dimension(format!(
                        "observation of width {} for obs_dim {}",
                        s.len(),
                        config.obs_dim
                    )));
                }
                data.extend_from_slice(s);
                data.extend_from_slice(z);
            }
        }
        Ok(Self {
            batch: windows.len(),
            len,
            tokens: Tensor::new(vec![windows.len() * len, width], data)?,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Per layer, experts that may not be routed to (their logits are masked).
    pub excluded: Vec<Vec<usize>>,
    /// Build the load-balancing penalty into the graph.
    pub with_aux: bool,
}

pub struct ForwardOutput {
    /// Action means for every token: `[batch * len, action_dim]`.
    pub actions: Var,
    pub stats: Vec<GatingStats>,
    /// Load-balancing penalty summed over layers.
    pub aux: Option<Var>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if std > 0.0 {
        let dist = Normal::new(0.0, std).expect("positive std");
        for v in t.data_mut() {
            *v = dist.sample(rng);
        }
    }
    t
}

impl StudentModel {
    /// Randomly initialized model; initialization is seeded by `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let h = config.hidden_dim;
        let inner = h * config.mlp_multiplier;
        let width = config.input_width();
        let residual_std = 1.0 / ((2 * config.depth) as f64).sqrt();

        let embed_w = params.add(
            "embed.w",
            normal_tensor(&mut rng, &[width, h], 1.0 / (width as f64).sqrt()),
            true,
        )?;
        let embed_b = params.add("embed.b", Tensor::zeros(&[h]), true)?;
        let pos = params.add("embed.pos", normal_tensor(&mut rng, &[config.seq_len, h], 0.02), true)?;

        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = format!("block{l}");
            let ln1_gain = params.add(format!("{p}.ln1.gain"), Tensor::filled(&[h], 1.0), true)?;
            let ln1_bias = params.add(format!("{p}.ln1.bias"), Tensor::zeros(&[h]), true)?;
            let s = 1.0 / (h as f64).sqrt();
            let attn = AttentionParams {
                wq: params.add(format!("{p}.attn.wq"), normal_tensor(&mut rng, &[h, h], s), true)?,
                wk: params.add(format!("{p}.attn.wk"), normal_tensor(&mut rng, &[h, h], s), true)?,
                wv: params.add(format!("{p}.attn.wv"), normal_tensor(&mut rng, &[h, h], s), true)?,
                wo: params.add(
                    format!("{p}.attn.wo"),
                    normal_tensor(&mut rng, &[h, h], s * residual_std),
                    true,
                )?,
                bo: params.add(format!("{p}.attn.bo"), Tensor::zeros(&[h]), true)?,
            };
            let ln2_gain = params.add(format!("{p}.ln2.gain"), Tensor::filled(&[h], 1.0), true)?;
            let ln2_bias = params.add(format!("{p}.ln2.bias"), Tensor::zeros(&[h]), true)?;
            let mut moe = MoELayer {
                gate_w: Vec::new(),
                gate_b: Vec::new(),
                experts: Vec::new(),
            };
            for e in 0..config.experts_per_layer {
                moe.gate_w.push(params.add(
                    format!("{p}.moe.gate{e}.w"),
                    normal_tensor(&mut rng, &[h, 1], 0.02),
                    true,
                )?);
                moe.gate_b
                    .push(params.add(format!("{p}.moe.gate{e}.b"), Tensor::zeros(&[1]), true)?);
                moe.experts.push(ExpertParams {
                    w1: params.add(
                        format!("{p}.moe.expert{e}.w1"),
                        normal_tensor(&mut rng, &[h, inner], s),
                        true,
                    )?,
                    b1: params.add(format!("{p}.moe.expert{e}.b1"), Tensor::zeros(&[inner]), true)?,
                    w2: params.add(
                        format!("{p}.moe.expert{e}.w2"),
                        normal_tensor(&mut rng, &[inner, h], residual_std / (inner as f64).sqrt()),
                        true,
                    )?,
                    b2: params.add(format!("{p}.moe.expert{e}.b2"), Tensor::zeros(&[h]), true)?,
                    added_at_stage: 1,
                });
            }
            blocks.push(BlockParams {
                ln1_gain,
                ln1_bias,
                attn,
                ln2_gain,
                ln2_bias,
                moe,
            });
        }
        let final_gain = params.add("final_ln.gain", Tensor::filled(&[h], 1.0), true)?;
        let final_bias = params.add("final_ln.bias", Tensor::zeros(&[h]), true)?;
        let head_w = params.add(
            "head.w",
            normal_tensor(&mut rng, &[h, config.action_dim], 1.0 / (h as f64).sqrt()),
            true,
        )?;
        let head_b = params.add("head.b", Tensor::zeros(&[config.action_dim]), true)?;
        Ok(Self {
            config,
            params,
            embed_w,
            embed_b,
            pos,
            blocks,
            final_gain,
            final_bias,
            head_w,
            head_b,
            stage: 1,
        })
    }

    pub fn experts_per_layer(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.moe.len()).collect()
    }

    pub fn total_experts(&self) -> usize {
        self.experts_per_layer().iter().sum()
    }

    /// Token embedding `h_0`: `[batch * len, hidden]`.
    pub fn embed_input(&self, g: &mut Graph, bind: &Bindings, batch: &WindowBatch) -> Result<Var> {
        let x = g.input(batch.tokens.clone())?;
        let h = g.matmul(x, bind.var(self.embed_w))?;
        let h = g.add(h, bind.var(self.embed_b))?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.len).collect();
        let p = g.gather_rows(bind.var(self.pos), &positions)?;
        g.add(h, p)
    }

    fn attention(
        &self,
        g: &mut Graph,
        bind: &Bindings,
        attn: &AttentionParams,
        x: Var,
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let dh = self.config.head_dim();
        let q = g.matmul(x, bind.var(attn.wq))?;
        let k = g.matmul(x, bind.var(attn.wk))?;
        let v = g.matmul(x, bind.var(attn.wv))?;
        let mut heads = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let split = |g: &mut Graph, t: Var| -> Result<Var> {
                let s = g.slice_cols(t, head * dh, dh)?;
                g.reshape(s, vec![batch, len, dh])
            };
            let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
            let scores = g.batch_matmul(qh, kh, true)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let weights = if self.config.causal {
                g.causal_softmax(scores, len)?
            } else {
                g.softmax(scores)?
            };
            let out = g.batch_matmul(weights, vh, false)?;
            heads.push(g.reshape(out, vec![batch * len, dh])?);
        }
        let o = g.concat_cols(&heads)?;
        let o = g.matmul(o, bind.var(attn.wo))?;
        g.add(o, bind.var(attn.bo))
    }

    /// One Transformer-MoE block on tokens `h` laid out as `[batch * len, hidden]`.
    pub fn block_forward(
        &self,
        g: &mut Graph,
        bind: &Bindings,
        layer: usize,
        h: Var,
        batch: usize,
        len: usize,
        opts: &ForwardOptions,
    ) -> Result<(Var, GatingStats, Option<Var>)> {
        let block = &self.blocks[layer];
        let cfg = &self.config;
        let inner = |g: &mut Graph| -> Result<(Var, GatingStats, Option<Var>)> {
            let a = g.layer_norm(h, bind.var(block.ln1_gain), bind.var(block.ln1_bias), cfg.ln_eps)?;
            let a = self.attention(g, bind, &block.attn, a, batch, len)?;
            let h1 = g.add(a, h)?;
            let m = g.layer_norm(h1, bind.var(block.ln2_gain), bind.var(block.ln2_bias), cfg.ln_eps)?;
            let excluded = opts.excluded.get(layer).map(Vec::as_slice).unwrap_or(&[]);
            let aux_eps = (opts.with_aux && cfg.use_aux).then_some(cfg.aux_eps);
            let routed = moe::route(g, bind, &block.moe, m, cfg.top_k, excluded, aux_eps)?;
            let out = g.add(routed.output, h1)?;
            Ok((out, routed.stats, routed.aux))
        };
        inner(g).map_err(|e| e.within(format_args!("block {layer}")))
    }

    /// Full forward pass; actions are produced for every token.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Bindings,
        batch: &WindowBatch,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let mut h = self.embed_input(g, bind, batch)?;
        let mut stats = Vec::with_capacity(self.blocks.len());
        let mut aux: Option<Var> = None;
        for l in 0..self.blocks.len() {
            let (out, s, a) = self.block_forward(g, bind, l, h, batch.batch, batch.len, opts)?;
            h = out;
            stats.push(s);
            if let Some(a) = a {
                aux = Some(match aux {
                    None => a,
                    Some(acc) => g.add(acc, a)?,
                });
            }
        }
        let h = g.layer_norm(
            h,
            bind.var(self.final_gain),
            bind.var(self.final_bias),
            self.config.ln_eps,
        )?;
        let y = g.matmul(h, bind.var(self.head_w))?;
        let actions = g.add(y, bind.var(self.head_b))?;
        Ok(ForwardOutput { actions, stats, aux })
    }

    /// Action means for a batch of equal-length windows, read at each window's
    /// last token.
    pub fn predict_batch(
        &self,
        windows: &[&[Vec<f64>]],
        contexts: &[&[f64]],
        opts: &ForwardOptions,
    ) -> Result<Vec<Vec<f64>>> {
        let batch = WindowBatch::new(&self.config, windows, contexts)?;
        let mut g = Graph::new();
        let bind = g.bind(&self.params)?;
        let out = self.forward(&mut g, &bind, &batch, opts)?;
        let actions = g.value(out.actions);
        Ok((0..batch.batch)
            .map(|b| actions.row(b * batch.len + batch.len - 1).to_vec())
            .collect())
    }

    /// Action mean `mu_theta` for the last `<= seq_len` observations of one
    /// episode under task context `z`.
    pub fn predict_action(&self, window: &[Vec<f64>], z: &[f64]) -> Result<Vec<f64>> {
        if window.is_empty() {
            return Err(Error::Input("window must contain at least one observation".into()));
        }
        let mut out = self.predict_batch(&[window], &[z], &ForwardOptions::default())?;
        Ok(out.pop().expect("one window"))
    }

    /// Routing statistics of every layer on a batch.
    pub fn routing_stats(&self, batch: &WindowBatch) -> Result<Vec<GatingStats>> {
        let mut g = Graph::new();
        let bind = g.bind(&self.params)?;
        Ok(self.forward(&mut g, &bind, batch, &ForwardOptions::default())?.stats)
    }

    /// Role of every parameter group, in store order.
    pub fn group_roles(&self) -> Vec<(ParamId, GroupRole)> {
        let mut roles: Vec<(ParamId, GroupRole)> =
            self.params.iter().map(|(id, _)| (id, GroupRole::Backbone)).collect();
        for (l, b) in self.blocks.iter().enumerate() {
            for id in b.moe.gate_ids() {
                roles[id.index()].1 = GroupRole::Gate { layer: l };
            }
            for (e, ex) in b.moe.experts.iter().enumerate() {
                for id in ex.ids() {
                    roles[id.index()].1 = GroupRole::Expert {
                        layer: l,
                        expert: e,
                        added_at_stage: ex.added_at_stage,
                    };
                }
            }
        }
        roles
    }
}
