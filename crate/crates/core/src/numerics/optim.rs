//! AdamW with decoupled weight decay and per-group freeze flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{read_entries, write_entries};

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Updates applied to this group; drives bias correction.
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    /// Optimizer steps taken, across all groups.
    pub step: u64,
    moments: Vec<Option<Moments>>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.moments.get(id.index()).and_then(Option::as_ref)
    }

    pub fn set_moments(&mut self, id: ParamId, moments: Moments) {
        if self.moments.len() <= id.index() {
            self.moments.resize(id.index() + 1, None);
        }
        self.moments[id.index()] = Some(moments);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Moments)> {
        self.moments
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.as_ref().map(|m| (i, m)))
    }
}

/// One AdamW update of every trainable group. Frozen groups are not read or
/// written; their moments (if any) are left as they were.
pub fn adamw_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptimState) -> Result<()> {
    let ids: Vec<ParamId> = store.iter().filter(|(_, g)| g.trainable).map(|(id, _)| id).collect();
    for &id in &ids {
        let group = store.get(id);
        let grad = grads
            .get(id)
            .ok_or_else(|| Error::Input(format!("no gradient for trainable group {}", group.name)))?;
        if grad.shape() != group.tensor.shape() {
            return Err(Error::Dimension(format!(
                "gradient {:?} for group {} of shape {:?}",
                grad.shape(),
                group.name,
                group.tensor.shape()
            )));
        }
        if let Some(m) = state.moments(id) {
            if m.m.shape() != group.tensor.shape() {
                return Err(Error::Dimension(format!(
                    "optimizer moments {:?} for group {} of shape {:?}",
                    m.m.shape(),
                    group.name,
                    group.tensor.shape()
                )));
            }
        }
    }

    let cfg = state.config.clone();
    for id in ids {
        let grad = grads.get(id).expect("checked above");
        let shape = store.tensor(id).shape().to_vec();
        if state.moments(id).is_none() {
            state.set_moments(
                id,
                Moments {
                    m: Tensor::zeros(&shape),
                    v: Tensor::zeros(&shape),
                    steps: 0,
                },
            );
        }
        let moments = state.moments[id.index()].as_mut().expect("just inserted");
        moments.steps += 1;
        let t = moments.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let params = store.get_mut(id).tensor.data_mut();
        let (m, v) = (moments.m.data_mut(), moments.v.data_mut());
        for i in 0..params.len() {
            let g = grad.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= cfg.lr * cfg.weight_decay * params[i];
            params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    config: AdamWConfig,
    /// Per-group update counts, keyed by group name.
    group_steps: BTreeMap<String, u64>,
}

/// Writes moments as `<stem>.manifest`/`<stem>.bin` (groups `name#m`, `name#v`)
/// and counters plus hyperparameters as `<stem>.toml`.
pub fn save_state(state: &OptimState, store: &ParamStore, dir: &Path, stem: &str) -> Result<()> {
    let mut names = Vec::new();
    let mut group_steps = BTreeMap::new();
    for (i, m) in state.iter() {
        let name = &store.get(ParamId::from_index(i)).name;
        names.push((format!("{name}#m"), &m.m));
        names.push((format!("{name}#v"), &m.v));
        group_steps.insert(name.clone(), m.steps);
    }
    write_entries(dir, stem, names.iter().map(|(n, t)| (n.as_str(), *t, true)))?;
    let header = StateHeader {
        step: state.step,
        config: state.config.clone(),
        group_steps,
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(format!("{stem}.toml"));
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Inverse of [`save_state`]; moments are matched to `store` by group name.
pub fn load_state(store: &ParamStore, dir: &Path, stem: &str) -> Result<OptimState> {
    let path = dir.join(format!("{stem}.toml"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: StateHeader = toml::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    let mut tensors: BTreeMap<String, Tensor> = read_entries(dir, stem)?
        .into_iter()
        .map(|e| (e.name, e.tensor))
        .collect();
    let mut state = OptimState::new(header.config);
    state.step = header.step;
    for (name, steps) in header.group_steps {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::parse(&path, format!("moments for unknown group {name}")))?;
        let missing = || Error::parse(&path, format!("moments of {name} missing"));
        let m = tensors.remove(&format!("{name}#m")).ok_or_else(missing)?;
        let v = tensors.remove(&format!("{name}#v")).ok_or_else(missing)?;
        if m.shape() != store.tensor(id).shape() || v.shape() != m.shape() {
            return Err(Error::Dimension(format!("optimizer moments of {name}")));
        }
        state.set_moments(id, Moments { m, v, steps });
    }
    Ok(state)
}
