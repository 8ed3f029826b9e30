//! Contrastive task embedding.
//!
//! A trajectory is summarized by the means of (state, action, reward) over a
//! fixed number of consecutive chunks. A two-layer encoder maps the summary
//! to a unit vector; InfoNCE pulls together embeddings of the same task.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    adamw_step, eval_with_gradients, AdamWConfig, Graph, OptimState, ParamId, ParamStore, Tensor, Var,
};
use crate::teachers::Trajectory;

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub chunks: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    pub lr: f64,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            chunks: 8,
            hidden: 64,
            embed_dim: 16,
            temperature: 0.1,
            lr: 1e-3,
            init_seed: 0,
        }
    }
}

/// Encoder input for one trajectory: `chunks` blocks of
/// `(mean state, mean action, mean reward)`, reward last in each block.
pub fn traj_stats(traj: &Trajectory, chunks: usize) -> Result<Vec<f64>> {
    let h = traj.actions.len();
    if h == 0 || traj.states.len() < h {
        return Err(Error::Input("empty trajectory".into()));
    }
    let (sd, ad) = (traj.states[0].len(), traj.actions[0].len());
    let mut out = Vec::with_capacity(chunks * (sd + ad + 1));
    for c in 0..chunks {
        let start = (c * h / chunks).min(h - 1);
        let end = ((c + 1) * h / chunks).clamp(start + 1, h);
        let n = (end - start) as f64;
        let mut block = vec![0.0; sd + ad + 1];
        for t in start..end {
            for (b, v) in block.iter_mut().zip(&traj.states[t]) {
                *b += v;
            }
            for (b, v) in block[sd..].iter_mut().zip(&traj.actions[t]) {
                *b += v;
            }
            block[sd + ad] += traj.rewards[t];
        }
        out.extend(block.into_iter().map(|v| v / n));
    }
    Ok(out)
}

/// InfoNCE over the rows of `z` (normalized inside), with positives sharing
/// a label. Anchors without a positive are left out of the mean.
pub fn infonce_loss(g: &mut Graph, z: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let b = labels.len();
    if b < 2 || g.value(z).rows() != b {
        return Err(Error::Input("InfoNCE needs at least two labelled embeddings".into()));
    }
    let anchors: Vec<usize> = (0..b)
        .filter(|&i| (0..b).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Err(Error::Input("no anchor in the batch has a positive".into()));
    }
    let d = g.value(z).cols();
    let zn = g.l2_normalize(z, NORM_EPS)?;
    let z3 = g.reshape(zn, vec![1, b, d])?;
    let sim = g.batch_matmul(z3, z3, true)?;
    let sim = g.reshape(sim, vec![b, b])?;
    let logits = g.scale(sim, 1.0 / tau)?;
    // shift by the constant 1/tau (the largest possible cosine) to keep exp bounded
    let shift = g.input(Tensor::scalar(-1.0 / tau))?;
    let logits = g.add(logits, shift)?;
    let e = g.exp(logits)?;
    let mut pos = vec![0.0; b * b];
    let mut others = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            if i != j {
                others[i * b + j] = 1.0;
                if labels[i] == labels[j] {
                    pos[i * b + j] = 1.0;
                }
            }
        }
    }
    let pos = g.input(Tensor::new(vec![b, b], pos)?)?;
    let others = g.input(Tensor::new(vec![b, b], others)?)?;
    let num = g.mul(e, pos)?;
    let num = g.sum_last(num)?;
    let den = g.mul(e, others)?;
    let den = g.sum_last(den)?;
    let num = g.gather_rows(num, &anchors)?;
    let den = g.gather_rows(den, &anchors)?;
    let ln = g.log(num)?;
    let ld = g.log(den)?;
    let per = g.sub(ld, ln)?;
    let total = g.sum_all(per)?;
    g.scale(total, 1.0 / anchors.len() as f64)
}

/// Value of [`infonce_loss`] on fixed embeddings.
pub fn infonce_value(z: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let zt = g.input(Tensor::from_rows(z)?)?;
    let loss = infonce_loss(&mut g, zt, labels, tau)?;
    Ok(g.value(loss).item())
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > NORM_EPS) {
        return Err(Error::Context("cannot normalize a zero vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Normalized mean of support embeddings.
pub fn task_context(support: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = support
        .first()
        .ok_or_else(|| Error::Context("no support trajectories".into()))?;
    let mut mean = vec![0.0; first.len()];
    for z in support {
        for (m, v) in mean.iter_mut().zip(z) {
            *m += v;
        }
    }
    let n = support.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    normalize(&mut mean)?;
    Ok(mean)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEncoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
    pub optim: OptimState,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl TaskEncoder {
    pub fn new(config: EncoderConfig, obs_dim: usize, action_dim: usize) -> Result<Self> {
        if config.chunks == 0 || config.hidden == 0 || config.embed_dim == 0 || !(config.temperature > 0.0) {
            return Err(Error::Config("encoder sizes and temperature must be positive".into()));
        }
        let input = config.chunks * (obs_dim + action_dim + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut normal = |shape: &[usize], std: f64| {
            let d = Normal::new(0.0, std).expect("positive std");
            let mut t = Tensor::zeros(shape);
            t.data_mut().iter_mut().for_each(|v| *v = d.sample(&mut rng));
            t
        };
        let mut params = ParamStore::new();
        let w1 = params.add(
            "encoder.w1",
            normal(&[input, config.hidden], 1.0 / (input as f64).sqrt()),
            true,
        )?;
        let b1 = params.add("encoder.b1", Tensor::zeros(&[config.hidden]), true)?;
        let w2 = params.add(
            "encoder.w2",
            normal(&[config.hidden, config.embed_dim], 1.0 / (config.hidden as f64).sqrt()),
            true,
        )?;
        let b2 = params.add("encoder.b2", Tensor::zeros(&[config.embed_dim]), true)?;
        let optim = OptimState::new(AdamWConfig {
            lr: config.lr,
            weight_decay: 0.0,
            ..Default::default()
        });
        Ok(Self {
            config,
            params,
            optim,
            w1,
            b1,
            w2,
            b2,
        })
    }

    fn stats_tensor(&self, trajs: &[&Trajectory]) -> Result<Tensor> {
        let rows = trajs
            .iter()
            .map(|t| traj_stats(t, self.config.chunks))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    /// Unnormalized encoder output for a batch of trajectory summaries.
    fn forward(&self, g: &mut Graph, bind: &crate::numerics::Bindings, x: Tensor) -> Result<Var> {
        let x = g.input(x)?;
        let h = g.matmul(x, bind.var(self.w1))?;
        let h = g.add(h, bind.var(self.b1))?;
        let h = g.gelu(h)?;
        let y = g.matmul(h, bind.var(self.w2))?;
        g.add(y, bind.var(self.b2))
    }

    pub fn encode_batch(&self, trajs: &[&Trajectory]) -> Result<Vec<Vec<f64>>> {
        if trajs.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.stats_tensor(trajs)?;
        let mut g = Graph::new();
        let bind = g.bind(&self.params)?;
        let y = self.forward(&mut g, &bind, x)?;
        let z = g.l2_normalize(y, NORM_EPS)?;
        let z = g.value(z);
        Ok((0..trajs.len()).map(|r| z.row(r).to_vec()).collect())
    }

    /// Unit-norm embedding of one trajectory.
    pub fn encode(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[traj])?.pop().expect("one row"))
    }

    /// Context for a task: the normalized mean embedding of its support set.
    pub fn context_for(&self, support: &[&Trajectory]) -> Result<Vec<f64>> {
        if support.is_empty() {
            return Err(Error::Context("no support trajectories".into()));
        }
        task_context(&self.encode_batch(support)?)
    }

    pub fn loss_and_grads(&self, trajs: &[&Trajectory], labels: &[usize]) -> Result<(f64, crate::numerics::Gradients)> {
        let x = self.stats_tensor(trajs)?;
        let tau = self.config.temperature;
        eval_with_gradients(&self.params, |g, bind| {
            let y = self.forward(g, bind, x)?;
            infonce_loss(g, y, labels, tau)
        })
    }

    /// One InfoNCE update on a labelled batch; returns the loss before the step.
    pub fn train_step(&mut self, trajs: &[&Trajectory], labels: &[usize]) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(trajs, labels)?;
        adamw_step(&mut self.params, &grads, &mut self.optim)?;
        Ok(loss)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for id in [self.w1, self.b1, self.w2, self.b2] {
            self.params.set_trainable(id, trainable);
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir, "encoder")?;
        crate::numerics::save_state(&self.optim, &self.params, dir, "encoder_optimizer")?;
        let path = dir.join("encoder.toml");
        let text = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, obs_dim: usize, action_dim: usize) -> Result<Self> {
        let path = dir.join("encoder.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: EncoderConfig = toml::from_str(&text).map_err(|e| Error::parse(&path, e))?;
        let mut enc = Self::new(config, obs_dim, action_dim)?;
        let stored = ParamStore::load(dir, "encoder")?;
        for (id, group) in enc.params.clone().iter() {
            let src = stored
                .id(&group.name)
                .ok_or_else(|| Error::parse(dir.join("encoder.manifest"), format!("missing {}", group.name)))?;
            let src = stored.get(src);
            if src.tensor.shape() != group.tensor.shape() {
                return Err(Error::Dimension(format!("encoder group {} shape", group.name)));
            }
            *enc.params.get_mut(id) = src.clone();
        }
        enc.optim = crate::numerics::load_state(&enc.params, dir, "encoder_optimizer")?;
        Ok(enc)
    }
}

/// Cached contexts keyed by `(stage, task)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextCache {
    entries: BTreeMap<(usize, usize), Vec<f64>>,
}

impl ContextCache {
    pub fn get(&self, stage: usize, task: usize) -> Option<&Vec<f64>> {
        self.entries.get(&(stage, task))
    }

    pub fn insert(&mut self, stage: usize, task: usize, z: Vec<f64>) {
        self.entries.insert((stage, task), z);
    }

    /// Most recent context for `task` at or before `stage`.
    pub fn latest(&self, stage: usize, task: usize) -> Option<&Vec<f64>> {
        self.entries
            .range(..=(stage, usize::MAX))
            .rev()
            .find(|((_, t), _)| *t == task)
            .map(|(_, z)| z)
    }

    /// Contexts recorded for `stage`, by task id.
    pub fn stage(&self, stage: usize) -> BTreeMap<usize, Vec<f64>> {
        self.entries
            .range((stage, 0)..=(stage, usize::MAX))
            .map(|((_, t), z)| (*t, z.clone()))
            .collect()
    }
}

/// Writes `task_id<TAB>z_1<TAB>...` rows.
pub fn write_embeddings(path: &Path, rows: &BTreeMap<usize, Vec<f64>>) -> Result<()> {
    let mut text = String::new();
    for (task, z) in rows {
        write!(text, "{task}").expect("write to string");
        for v in z {
            write!(text, "\t{v}").expect("write to string");
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<BTreeMap<usize, Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = || Error::parse(path, format!("line {}", i + 1));
        let mut fields = line.split('\t');
        let task: usize = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let z: Vec<f64> = fields
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        out.insert(task, z);
    }
    Ok(out)
}
