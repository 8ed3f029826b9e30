//! One stage of continual distillation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::thread;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{anneal_lambda, ProtocolConfig, StageConfig, Strategy};
use super::data::{cut_windows, make_batch, Batch, Sample};
use super::penalty::{fisher_from_gradients, kl_penalty, EwcEntry, EwcState};
use crate::error::{Error, Result};
use crate::model::{apply_mask_schedule, unfreeze_all, ForwardOptions, GatingStats, Phase, StudentModel};
use crate::numerics::checkpoint::{read_entries, write_entries};
use crate::numerics::{
    adamw_step, eval_with_gradients, load_state, save_state, AdamWConfig, Bindings, Gradients, Graph, OptimState,
    Tensor, Var,
};
use crate::replay::{featurize_pool, prepare_features, read_audit, select, write_audit, AuditRow, ReplayBuffer};
use crate::taskctx::{ContextCache, TaskEncoder};
use crate::teachers::{evaluate_policy, read_trajectories, write_trajectories, Policy, TaskSpec, Trajectory};

/// Mixes a run seed with a purpose tag and indices (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ a.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ b.wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const TAG_DISTILL: u64 = 1;
pub(crate) const TAG_EVAL: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_EXPAND: u64 = 4;
const TAG_ENCODER: u64 = 5;
const TAG_SELECT: u64 = 6;
const TAG_FISHER: u64 = 7;
pub(crate) const TAG_INIT: u64 = 8;

/// How often the code paths specific to some strategies ran.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub expansions: usize,
    pub replay_selections: usize,
    /// Batches that contained at least one replayed sample.
    pub replay_batches: usize,
    pub fisher_estimates: usize,
}

/// Points in a stage at which an observer sees the student.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageEvent {
    /// Before the first step of an epoch (0-based), after masks are set.
    EpochStart(usize),
    EpochEnd(usize),
}

#[derive(Clone, Debug, Default)]
pub struct StageOutcome {
    /// Success rate of every evaluated task.
    pub rates: BTreeMap<usize, f64>,
    pub losses: Vec<f64>,
    /// Per-layer routing statistics on a probe batch of this stage's data.
    pub routing: Vec<GatingStats>,
    pub steps: usize,
}

/// Windows, spread evenly over a stage's new data, on which routing is measured.
const PROBE_WINDOWS: usize = 256;

/// Repeats every replayed window (pool index `>= distill_len`) as a whole
/// until replay makes up at least `share` of the epoch. Each replayed window
/// appears the same number of times.
pub fn with_replay_share(samples: Vec<Sample>, distill_len: usize, fresh: usize, share: f64) -> Vec<Sample> {
    let replay: Vec<Sample> = samples.iter().filter(|s| s.traj >= distill_len).copied().collect();
    if replay.is_empty() || share <= 0.0 {
        return samples;
    }
    let need = (share / (1.0 - share) * fresh as f64).ceil() as usize;
    let copies = need.div_ceil(replay.len()).max(1);
    let mut out: Vec<Sample> = samples.into_iter().filter(|s| s.traj < distill_len).collect();
    for _ in 0..copies {
        out.extend_from_slice(&replay);
    }
    out
}

/// Mean squared error between the student's action means and the teacher's
/// actions (summed over action dims, averaged over tokens) plus `lambda`
/// times the load-balancing penalty summed over layers.
pub fn distill_loss(
    model: &StudentModel,
    g: &mut Graph,
    bind: &Bindings,
    batch: &Batch,
    lambda: f64,
) -> Result<(Var, Var)> {
    let opts = ForwardOptions {
        excluded: Vec::new(),
        with_aux: lambda > 0.0,
    };
    let out = model.forward(g, bind, &batch.input, &opts)?;
    let target = g.input(batch.targets.clone())?;
    let mse = g.mse(out.actions, target)?;
    let loss = match out.aux {
        Some(aux) if lambda > 0.0 => {
            let a = g.scale(aux, lambda)?;
            g.add(mse, a)?
        }
        _ => mse,
    };
    Ok((loss, out.actions))
}

/// Acts with the student under a fixed task context.
pub struct StudentPolicy<'a> {
    pub model: &'a StudentModel,
    pub context: &'a [f64],
}

impl Policy for StudentPolicy<'_> {
    fn act(&self, _task: &TaskSpec, histories: &[&[Vec<f64>]]) -> Result<Vec<Vec<f64>>> {
        let len = self.model.config.seq_len;
        let windows: Vec<&[Vec<f64>]> = histories.iter().map(|h| &h[h.len().saturating_sub(len)..]).collect();
        let contexts = vec![self.context; windows.len()];
        self.model
            .predict_batch(&windows, &contexts, &ForwardOptions::default())
    }
}

/// The state carried from stage to stage.
#[derive(Clone, Debug)]
pub struct Learner {
    pub config: ProtocolConfig,
    pub student: StudentModel,
    pub encoder: TaskEncoder,
    pub optim: OptimState,
    pub buffer: ReplayBuffer,
    /// Trajectories each task's context is inferred from.
    pub supports: BTreeMap<usize, Vec<Trajectory>>,
    pub contexts: ContextCache,
    pub ewc: Option<EwcState>,
    /// Stage-end snapshot for the KL penalty.
    pub previous: Option<StudentModel>,
    /// Optimizer steps across all stages; drives the lambda schedule.
    pub global_step: u64,
    pub counters: Counters,
    pub audit: Vec<AuditRow>,
}

fn student_optim(cfg: &ProtocolConfig) -> OptimState {
    OptimState::new(AdamWConfig {
        lr: cfg.training.lr,
        weight_decay: cfg.training.weight_decay,
        ..Default::default()
    })
}

impl Learner {
    pub fn new(config: ProtocolConfig) -> Result<Self> {
        config.validate()?;
        let student = Self::fresh_student(&config, 1)?;
        let mut enc_cfg = config.encoder.clone();
        enc_cfg.init_seed = derive_seed(config.seed, TAG_INIT, 1, enc_cfg.init_seed);
        let encoder = TaskEncoder::new(enc_cfg, config.model.obs_dim, config.model.action_dim)?;
        Ok(Self {
            optim: student_optim(&config),
            buffer: ReplayBuffer::new(config.training.replay_budget)?,
            student,
            encoder,
            supports: BTreeMap::new(),
            contexts: ContextCache::default(),
            ewc: None,
            previous: None,
            global_step: 0,
            counters: Counters::default(),
            audit: Vec::new(),
            config,
        })
    }

    fn fresh_student(config: &ProtocolConfig, stage: usize) -> Result<StudentModel> {
        let mut m = config.model.clone();
        m.init_seed = derive_seed(config.seed, TAG_INIT, 0, m.init_seed ^ stage as u64);
        let mut s = StudentModel::new(m)?;
        s.stage = stage;
        Ok(s)
    }

    /// Context of `task` under the current encoder.
    pub fn context(&self, task: usize) -> Result<Vec<f64>> {
        let support = self
            .supports
            .get(&task)
            .ok_or_else(|| Error::Context(format!("no support trajectories for task {task}")))?;
        let refs: Vec<&Trajectory> = support.iter().collect();
        self.encoder.context_for(&refs)
    }

    /// Contexts of every task with support trajectories.
    pub fn all_contexts(&self) -> Result<BTreeMap<usize, Vec<f64>>> {
        self.supports.keys().map(|&t| Ok((t, self.context(t)?))).collect()
    }

    /// Trains on `data` (this stage's distillation trajectories) under the
    /// strategy, then evaluates every task in `eval_tasks`.
    pub fn run_stage(
        &mut self,
        stage: &StageConfig,
        data: &[Trajectory],
        eval_tasks: &[TaskSpec],
        observer: &mut dyn FnMut(StageEvent, &StudentModel),
    ) -> Result<StageOutcome> {
        let cfg = self.config.clone();
        let tc = &cfg.training;
        let k = stage.stage;
        let strategy = stage.strategy;
        if k == 0 {
            return Err(Error::Schedule("stages are numbered from 1".into()));
        }
        for &task in &stage.task_ids {
            let support: Vec<Trajectory> = data
                .iter()
                .filter(|t| t.task_id == task)
                .take(tc.support_size)
                .cloned()
                .collect();
            if support.is_empty() {
                return Err(Error::Context(format!("no distillation data for task {task}")));
            }
            self.supports.insert(task, support);
        }

        if strategy == Strategy::Independent && k > 1 {
            self.student = Self::fresh_student(&cfg, k)?;
            self.optim = student_optim(&cfg);
        }
        if strategy.expands() && k > 1 {
            self.student
                .expand_experts(&cfg.expansion, k, derive_seed(cfg.seed, TAG_EXPAND, k as u64, 0))?;
            self.counters.expansions += 1;
        }
        self.student.stage = k;
        self.optim.config.lr = stage.lr;

        let mut pool: Vec<&Trajectory> = data.iter().collect();
        let distill_len = pool.len();
        let replayed: Vec<Trajectory> = if strategy.replays() {
            self.buffer.trajectories().cloned().collect()
        } else {
            Vec::new()
        };
        pool.extend(replayed.iter());
        let mut samples = cut_windows(&pool, cfg.model.seq_len, tc.window_stride);
        if let Some(share) = tc.replay_share {
            let fresh = samples.iter().filter(|s| s.traj < distill_len).count();
            samples = with_replay_share(samples, distill_len, fresh, share);
        }
        if samples.is_empty() {
            return Err(Error::Input("no training windows".into()));
        }
        let per_epoch = samples.len().div_ceil(stage.batch_size);
        let total_steps = tc.steps_per_stage.unwrap_or(stage.epochs * per_epoch);

        let masked = strategy.masks() && k > 1;
        let encoder_stage = tc.encoder_last_stage.is_none_or(|last| k <= last);
        let plan_allows = if masked {
            apply_mask_schedule(&mut self.student, k, Phase::One)?.encoder_trainable
        } else {
            unfreeze_all(&mut self.student);
            true
        };
        let mut enc_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_ENCODER, k as u64, 0));
        let joint = match tc.encoder_pretrain_steps {
            Some(n) if encoder_stage && plan_allows => {
                self.encoder.set_trainable(true);
                for _ in 0..n {
                    self.encoder_step(&pool, &mut enc_rng)?;
                }
                false
            }
            Some(_) => false,
            None => encoder_stage,
        };
        let mut encoder_on = joint && plan_allows;
        self.encoder.set_trainable(encoder_on);

        let mut outcome = StageOutcome::default();
        let mut contexts = self.all_contexts()?;
        let mut order: Vec<Sample> = Vec::new();
        let mut epoch = 0;
        for step in 0..total_steps {
            let pos = step % per_epoch;
            if pos == 0 {
                epoch = step / per_epoch;
                if masked && epoch == tc.phase1_epochs {
                    let plan = apply_mask_schedule(&mut self.student, k, Phase::Two)?;
                    encoder_on = joint && plan.encoder_trainable;
                    self.encoder.set_trainable(encoder_on);
                }
                order = samples.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_SHUFFLE, k as u64, epoch as u64));
                order.shuffle(&mut rng);
                observer(StageEvent::EpochStart(epoch), &self.student);
            }
            if step % tc.context_refresh == 0 {
                contexts = self.all_contexts()?;
            }
            let chunk = &order[pos * stage.batch_size..((pos + 1) * stage.batch_size).min(order.len())];
            if chunk.iter().any(|s| s.traj >= distill_len) {
                self.counters.replay_batches += 1;
            }
            let batch = make_batch(&cfg.model, &pool, chunk, |t| {
                contexts
                    .get(&t)
                    .cloned()
                    .ok_or_else(|| Error::Context(format!("no context for task {t}")))
            })?;
            let loss = self.train_step(&batch, strategy)?;
            outcome.losses.push(loss);
            if encoder_on {
                self.encoder_step(&pool, &mut enc_rng)?;
            }
            self.global_step += 1;
            outcome.steps += 1;
            if pos + 1 == per_epoch || step + 1 == total_steps {
                observer(StageEvent::EpochEnd(epoch), &self.student);
            }
        }

        let fresh: Vec<Sample> = samples.iter().filter(|s| s.traj < distill_len).copied().collect();
        let probe: Vec<Sample> = (0..PROBE_WINDOWS.min(fresh.len()))
            .map(|i| fresh[i * fresh.len() / PROBE_WINDOWS.min(fresh.len())])
            .collect();
        contexts = self.all_contexts()?;
        let probe = make_batch(&cfg.model, &pool, &probe, |t| Ok(contexts[&t].clone()))?;
        outcome.routing = self.student.routing_stats(&probe.input)?;

        if strategy == Strategy::Ewc {
            self.estimate_fisher(k, data)?;
        }
        if strategy == Strategy::Kl {
            self.previous = Some(self.student.clone());
        }
        if strategy.replays() {
            self.select_replay(stage, data)?;
        } else {
            self.buffer.seen += data.len();
        }
        for (t, z) in &contexts {
            self.contexts.insert(k, *t, z.clone());
        }
        outcome.rates = self.evaluate(eval_tasks, &contexts)?;
        Ok(outcome)
    }

    fn train_step(&mut self, batch: &Batch, strategy: Strategy) -> Result<f64> {
        let lambda = anneal_lambda(&self.config.lambda, self.global_step);
        let old_actions = match (strategy, &self.previous) {
            (Strategy::Kl, Some(prev)) => {
                let mut g = Graph::new();
                let bind = g.bind(&prev.params)?;
                let out = prev.forward(&mut g, &bind, &batch.input, &ForwardOptions::default())?;
                Some(g.value(out.actions).clone())
            }
            _ => None,
        };
        let student = &self.student;
        let ewc = if strategy == Strategy::Ewc {
            self.ewc.as_ref()
        } else {
            None
        };
        let sigma = self.config.training.kl_sigma;
        let (loss, grads) = eval_with_gradients(&student.params, |g, bind| {
            let (mut loss, actions) = distill_loss(student, g, bind, batch, lambda)?;
            if let Some(e) = ewc {
                if let Some(p) = e.penalty(g, bind, &student.params)? {
                    loss = g.add(loss, p)?;
                }
            }
            if old_actions.is_some() {
                let p = kl_penalty(g, actions, old_actions.as_ref(), sigma)?;
                loss = g.add(loss, p)?;
            }
            Ok(loss)
        })?;
        adamw_step(&mut self.student.params, &grads, &mut self.optim)?;
        Ok(loss)
    }

    /// One InfoNCE step on an equal number of trajectories of every task in the pool.
    fn encoder_step(&mut self, pool: &[&Trajectory], rng: &mut ChaCha8Rng) -> Result<()> {
        let mut by_task: BTreeMap<usize, Vec<&Trajectory>> = BTreeMap::new();
        for t in pool {
            by_task.entry(t.task_id).or_default().push(t);
        }
        let per = (self.config.training.encoder_batch / by_task.len()).max(2);
        let mut batch = Vec::new();
        let mut labels = Vec::new();
        for (task, trajs) in &by_task {
            if trajs.len() < 2 {
                continue;
            }
            for t in trajs.choose_multiple(rng, per.min(trajs.len())) {
                batch.push(*t);
                labels.push(*task);
            }
        }
        if batch.len() >= 2 {
            self.encoder.train_step(&batch, &labels)?;
        }
        Ok(())
    }

    fn estimate_fisher(&mut self, k: usize, data: &[Trajectory]) -> Result<()> {
        let cfg = self.config.clone();
        let pool: Vec<&Trajectory> = data.iter().collect();
        let mut samples = cut_windows(&pool, cfg.model.seq_len, cfg.training.window_stride);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_FISHER, k as u64, 0));
        samples.shuffle(&mut rng);
        let contexts = self.all_contexts()?;
        unfreeze_all(&mut self.student);
        let lambda = anneal_lambda(&cfg.lambda, self.global_step);
        let mut grads: Vec<Gradients> = Vec::new();
        for chunk in samples
            .chunks(cfg.training.batch_size)
            .take(cfg.training.fisher_batches)
        {
            let batch = make_batch(&cfg.model, &pool, chunk, |t| Ok(contexts[&t].clone()))?;
            let student = &self.student;
            let (_, g) = eval_with_gradients(&student.params, |g, bind| {
                Ok(distill_loss(student, g, bind, &batch, lambda)?.0)
            })?;
            grads.push(g);
        }
        let fisher = fisher_from_gradients(&grads)?;
        self.ewc = Some(EwcState::anchor(&self.student.params, fisher, cfg.training.lambda_ewc));
        self.counters.fisher_estimates += 1;
        Ok(())
    }

    fn select_replay(&mut self, stage: &StageConfig, data: &[Trajectory]) -> Result<()> {
        let cfg = &self.config;
        let seen = self.buffer.seen + data.len();
        let room = self.buffer.capacity_for(seen).saturating_sub(self.buffer.len());
        let m = stage.replay_m.min(room / stage.task_ids.len().max(1));
        let mut selected = Vec::new();
        for &task in &stage.task_ids {
            let pool: Vec<&Trajectory> = data.iter().filter(|t| t.task_id == task).collect();
            let m = m.min(pool.len());
            let seed = derive_seed(cfg.seed, TAG_SELECT, stage.stage as u64, task as u64);
            let features = prepare_features(&featurize_pool(&pool, cfg.model.seq_len)?)?;
            let sel = select(&features, m, cfg.training.replay_strategy, seed)?;
            self.audit.push(AuditRow {
                stage: stage.stage,
                task,
                strategy: cfg.training.replay_strategy,
                seed,
                chosen: sel.indices.iter().map(|&i| pool[i].seed).collect(),
                log_det: sel.log_det,
            });
            selected.extend(sel.indices.iter().map(|&i| pool[i].clone()));
        }
        self.buffer.update(data.len(), selected)?;
        self.counters.replay_selections += 1;
        Ok(())
    }

    /// Success rates of the current student, tasks evaluated concurrently.
    pub fn evaluate(&self, tasks: &[TaskSpec], contexts: &BTreeMap<usize, Vec<f64>>) -> Result<BTreeMap<usize, f64>> {
        let n = self.config.training.eval_episodes;
        let seed = self.config.seed;
        let student = &self.student;
        let results: Vec<Result<(usize, f64)>> = thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .iter()
                .map(|task| {
                    scope.spawn(move || {
                        let context = contexts
                            .get(&task.id)
                            .ok_or_else(|| Error::Context(format!("no context for task {}", task.id)))?;
                        let policy = StudentPolicy {
                            model: student,
                            context,
                        };
                        let rate = evaluate_policy(&policy, task, n, derive_seed(seed, TAG_EVAL, task.id as u64, 0))?;
                        Ok((task.id, rate))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Input("evaluation worker panicked".into())))
                })
                .collect()
        });
        results.into_iter().collect()
    }
}

/// Gradient-carrying loss of one batch.
pub fn batch_loss_and_grads(model: &StudentModel, batch: &Batch, lambda: f64) -> Result<(f64, Gradients)> {
    eval_with_gradients(&model.params, |g, bind| {
        Ok(distill_loss(model, g, bind, batch, lambda)?.0)
    })
}

#[derive(Serialize, Deserialize)]
struct LearnerHeader {
    global_step: u64,
    counters: Counters,
    ewc_lambda: Option<f64>,
    has_previous: bool,
}

impl Learner {
    /// Writes `model/`, `optimizer/`, `buffer/`, `encoder/`, `supports.jsonl`,
    /// `audit.tsv`, optional `ewc/` and `previous/`, and `learner.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.student.save(&dir.join("model"))?;
        let odir = dir.join("optimizer");
        fs::create_dir_all(&odir).map_err(|e| Error::io(&odir, e))?;
        save_state(&self.optim, &self.student.params, &odir, "optimizer")?;
        self.buffer.save(&dir.join("buffer"))?;
        self.encoder.save(&dir.join("encoder"))?;
        let supports: Vec<Trajectory> = self.supports.values().flatten().cloned().collect();
        write_trajectories(&dir.join("supports.jsonl"), &supports)?;
        write_audit(&dir.join("audit.tsv"), &self.audit)?;
        if let Some(ewc) = &self.ewc {
            let mut entries = Vec::new();
            for e in &ewc.entries {
                let name = &self.student.params.get(e.id).name;
                entries.push((format!("{name}#anchor"), &e.anchor));
                entries.push((format!("{name}#fisher"), &e.fisher));
            }
            write_entries(
                &dir.join("ewc"),
                "ewc",
                entries.iter().map(|(n, t)| (n.as_str(), *t, false)),
            )?;
        }
        if let Some(prev) = &self.previous {
            prev.save(&dir.join("previous"))?;
        }
        let header = LearnerHeader {
            global_step: self.global_step,
            counters: self.counters.clone(),
            ewc_lambda: self.ewc.as_ref().map(|e| e.lambda),
            has_previous: self.previous.is_some(),
        };
        let path = dir.join("learner.json");
        let text = serde_json::to_string_pretty(&header).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Inverse of [`Learner::save`].
    pub fn load(dir: &Path, config: ProtocolConfig) -> Result<Self> {
        config.validate()?;
        let path = dir.join("learner.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: LearnerHeader = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
        let student = StudentModel::load(&dir.join("model"))?;
        let optim = load_state(&student.params, &dir.join("optimizer"), "optimizer")?;
        let buffer = ReplayBuffer::load(&dir.join("buffer"))?;
        let encoder = TaskEncoder::load(&dir.join("encoder"), config.model.obs_dim, config.model.action_dim)?;
        let mut supports: BTreeMap<usize, Vec<Trajectory>> = BTreeMap::new();
        for t in read_trajectories(&dir.join("supports.jsonl"))? {
            supports.entry(t.task_id).or_default().push(t);
        }
        let audit = read_audit(&dir.join("audit.tsv"))?;
        let ewc = match header.ewc_lambda {
            Some(lambda) => {
                let mut tensors: BTreeMap<String, Tensor> = read_entries(&dir.join("ewc"), "ewc")?
                    .into_iter()
                    .map(|e| (e.name, e.tensor))
                    .collect();
                let mut entries = Vec::new();
                for (id, group) in student.params.iter() {
                    let (Some(anchor), Some(fisher)) = (
                        tensors.remove(&format!("{}#anchor", group.name)),
                        tensors.remove(&format!("{}#fisher", group.name)),
                    ) else {
                        continue;
                    };
                    entries.push(EwcEntry { id, anchor, fisher });
                }
                Some(EwcState { lambda, entries })
            }
            None => None,
        };
        let previous = if header.has_previous {
            Some(StudentModel::load(&dir.join("previous"))?)
        } else {
            None
        };
        Ok(Self {
            config,
            student,
            encoder,
            optim,
            buffer,
            supports,
            contexts: ContextCache::default(),
            ewc,
            previous,
            global_step: header.global_step,
            counters: header.counters,
            audit,
        })
    }
}
