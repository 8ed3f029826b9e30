//! Model checkpoints: the parameter container plus a `model.toml` header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttentionParams, BlockParams, ExpertParams, MoELayer, ModelConfig, StudentModel};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore};

#[derive(Serialize, Deserialize)]
struct Header {
    stage: usize,
    experts_per_layer: Vec<usize>,
    /// Per layer, the stage at which each expert was created.
    expert_birth_stages: Vec<Vec<usize>>,
    config: ModelConfig,
}

fn lookup(store: &ParamStore, name: &str, path: &Path) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::parse(path, format!("checkpoint lacks group {name}")))
}

impl StudentModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir, "params")?;
        let header = Header {
            stage: self.stage,
            experts_per_layer: self.experts_per_layer(),
            expert_birth_stages: self
                .blocks
                .iter()
                .map(|b| b.moe.experts.iter().map(|e| e.added_at_stage).collect())
                .collect(),
            config: self.config.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
        let path = dir.join("model.toml");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: Header = toml::from_str(&text).map_err(|e| Error::parse(&path, e))?;
        header.config.validate()?;
        if header.experts_per_layer.len() != header.config.depth
            || header.expert_birth_stages.len() != header.config.depth
        {
            return Err(Error::parse(&path, "per-layer lists do not match depth"));
        }
        let params = ParamStore::load(dir, "params")?;
        let pm = dir.join("params.manifest");
        let id = |name: &str| lookup(&params, name, &pm);

        let mut blocks = Vec::with_capacity(header.config.depth);
        for l in 0..header.config.depth {
            let p = format!("block{l}");
            let n = header.experts_per_layer[l];
            let births = &header.expert_birth_stages[l];
            if births.len() != n {
                return Err(Error::parse(&path, format!("layer {l}: birth list length")));
            }
            let mut moe = MoELayer {
                gate_w: Vec::with_capacity(n),
                gate_b: Vec::with_capacity(n),
                experts: Vec::with_capacity(n),
            };
            for (e, &born) in births.iter().enumerate() {
                moe.gate_w.push(id(&format!("{p}.moe.gate{e}.w"))?);
                moe.gate_b.push(id(&format!("{p}.moe.gate{e}.b"))?);
                moe.experts.push(ExpertParams {
                    w1: id(&format!("{p}.moe.expert{e}.w1"))?,
                    b1: id(&format!("{p}.moe.expert{e}.b1"))?,
                    w2: id(&format!("{p}.moe.expert{e}.w2"))?,
                    b2: id(&format!("{p}.moe.expert{e}.b2"))?,
                    added_at_stage: born,
                });
            }
            blocks.push(BlockParams {
                ln1_gain: id(&format!("{p}.ln1.gain"))?,
                ln1_bias: id(&format!("{p}.ln1.bias"))?,
                attn: AttentionParams {
                    wq: id(&format!("{p}.attn.wq"))?,
                    wk: id(&format!("{p}.attn.wk"))?,
                    wv: id(&format!("{p}.attn.wv"))?,
                    wo: id(&format!("{p}.attn.wo"))?,
                    bo: id(&format!("{p}.attn.bo"))?,
                },
                ln2_gain: id(&format!("{p}.ln2.gain"))?,
                ln2_bias: id(&format!("{p}.ln2.bias"))?,
                moe,
            });
        }
        Ok(Self {
            embed_w: id("embed.w")?,
            embed_b: id("embed.b")?,
            pos: id("embed.pos")?,
            final_gain: id("final_ln.gain")?,
            final_bias: id("final_ln.bias")?,
            head_w: id("head.w")?,
            head_b: id("head.b")?,
            blocks,
            config: header.config,
            stage: header.stage,
            params,
        })
    }
}
