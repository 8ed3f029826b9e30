//! The full staged protocol with checkpoints and run artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{ProtocolConfig, Strategy};
use super::stage::{derive_seed, Learner, StageEvent, StageOutcome, TAG_DISTILL, TAG_EVAL};
use crate::error::{Error, Result};
use crate::eval::MetricsMatrix;
use crate::model::{GatingStats, StudentModel};
use crate::replay::write_audit;
use crate::taskctx::write_embeddings;
use crate::teachers::{collect, evaluate_policy, make_task_stream, TaskSpec, TaskStream, TeacherPolicy, Trajectory};

const COMPLETE: &str = "COMPLETE";

/// Everything a finished run produced.
#[derive(Debug)]
pub struct ProtocolRun {
    pub metrics: MetricsMatrix,
    /// Teacher success rate per task on the student's evaluation episodes.
    pub teacher: BTreeMap<usize, f64>,
    /// Outcomes of the stages this invocation trained (resumed stages are absent).
    pub outcomes: Vec<(usize, StageOutcome)>,
    pub learner: Learner,
    pub stream: TaskStream,
}

impl ProtocolRun {
    /// Mean teacher success over every task of the stream.
    pub fn teacher_mean(&self) -> f64 {
        self.teacher.values().sum::<f64>() / self.teacher.len() as f64
    }
}

/// The distillation trajectories of one stage, task by task.
pub fn stage_data(cfg: &ProtocolConfig, tasks: &[TaskSpec]) -> Result<Vec<Trajectory>> {
    let mut data = Vec::new();
    for task in tasks {
        let seed = derive_seed(cfg.seed, TAG_DISTILL, task.id as u64, 0);
        data.extend(collect(task, cfg.training.distill_episodes, seed, cfg.workers)?);
    }
    Ok(data)
}

/// Seed of the first evaluation episode of `task`.
pub fn eval_seed(cfg: &ProtocolConfig, task: usize) -> u64 {
    derive_seed(cfg.seed, TAG_EVAL, task as u64, 0)
}

pub fn teacher_rates(cfg: &ProtocolConfig, stream: &TaskStream) -> Result<BTreeMap<usize, f64>> {
    stream
        .tasks()
        .map(|t| {
            let rate = evaluate_policy(&TeacherPolicy, t, cfg.training.eval_episodes, eval_seed(cfg, t.id))?;
            Ok((t.id, rate))
        })
        .collect()
}

pub fn run_protocol(cfg: &ProtocolConfig, out: Option<&Path>) -> Result<ProtocolRun> {
    run_protocol_observed(cfg, out, &mut |_, _, _| {})
}

/// Runs every stage, calling `observer(stage, event, student)` at epoch
/// boundaries. With `out`, each finished stage is checkpointed under
/// `out/stage_k` and a later call with the same `out` resumes after the last
/// complete stage.
pub fn run_protocol_observed(
    cfg: &ProtocolConfig,
    out: Option<&Path>,
    observer: &mut dyn FnMut(usize, StageEvent, &StudentModel),
) -> Result<ProtocolRun> {
    cfg.validate()?;
    let stream = make_task_stream(&cfg.suite, cfg.seed)?;
    let ids: Vec<Vec<usize>> = stream.stages.iter().map(|s| s.iter().map(|t| t.id).collect()).collect();
    let teacher = teacher_rates(cfg, &stream)?;
    let mut metrics = MetricsMatrix::new(&ids);
    let mut learner = Learner::new(cfg.clone())?;
    let mut first = 1;
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_text(&out.join("config.toml"), &cfg.to_toml())?;
        if let Some(done) = last_complete(out, ids.len()) {
            let dir = stage_dir(out, done);
            learner = Learner::load(&dir, cfg.clone())?;
            metrics = MetricsMatrix::load(&dir.join("metrics").join("metrics.tsv"))?;
            first = done + 1;
        }
    }

    let mut outcomes = Vec::new();
    for k in first..=ids.len() {
        let tasks = &stream.stages[k - 1];
        let data = stage_data(cfg, tasks)?;
        let eval_tasks: Vec<TaskSpec> = if cfg.strategy == Strategy::Independent {
            tasks.clone()
        } else {
            stream.stages[..k].iter().flatten().cloned().collect()
        };
        let stage = cfg.stage_config(k, ids[k - 1].clone());
        let outcome = learner.run_stage(&stage, &data, &eval_tasks, &mut |e, m| observer(k, e, m))?;
        for (&task, &rate) in &outcome.rates {
            metrics.record(k, task, rate)?;
        }
        if cfg.strategy == Strategy::Independent {
            // Earlier students are discarded; each task keeps its own student's score.
            for (j, &task) in metrics.tasks.clone().iter().enumerate() {
                if metrics.intro[j] < k {
                    let rate = metrics.get(metrics.intro[j], task).expect("intro rate recorded");
                    metrics.record(k, task, rate)?;
                }
            }
        }
        if let Some(out) = out {
            write_stage(out, k, &learner, &metrics, &outcome)?;
        }
        outcomes.push((k, outcome));
    }
    if let Some(out) = out {
        metrics.save(&out.join("metrics.tsv"))?;
        write_audit(&out.join("audit.tsv"), &learner.audit)?;
        let mut text = String::from("task\tsuccess\n");
        for (t, r) in &teacher {
            writeln!(text, "{t}\t{r}").expect("write to string");
        }
        write_text(&out.join("teacher.tsv"), &text)?;
    }
    Ok(ProtocolRun {
        metrics,
        teacher,
        outcomes,
        learner,
        stream,
    })
}

pub fn stage_dir(out: &Path, stage: usize) -> PathBuf {
    out.join(format!("stage_{stage}"))
}

fn last_complete(out: &Path, stages: usize) -> Option<usize> {
    (1..=stages).rev().find(|&k| stage_dir(out, k).join(COMPLETE).exists())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_stage(out: &Path, k: usize, learner: &Learner, metrics: &MetricsMatrix, outcome: &StageOutcome) -> Result<()> {
    let dir = stage_dir(out, k);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    learner.save(&dir)?;
    let mdir = dir.join("metrics");
    fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
    metrics.save(&mdir.join("metrics.tsv"))?;
    write_text(&mdir.join("losses.tsv"), &losses_tsv(&outcome.losses))?;
    metrics.save(&out.join("metrics.tsv"))?;
    write_embeddings(
        &out.join(format!("embeddings_stage_{k}.tsv")),
        &learner.contexts.stage(k),
    )?;
    write_text(
        &out.join(format!("routing_stage_{k}.tsv")),
        &routing_tsv(&outcome.routing),
    )?;
    write_text(&dir.join(COMPLETE), "")
}

fn losses_tsv(losses: &[f64]) -> String {
    let mut text = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(text, "{i}\t{l}").expect("write to string");
    }
    text
}

/// `layer expert load importance` rows, one per expert.
pub fn routing_tsv(stats: &[GatingStats]) -> String {
    let mut text = String::from("layer\texpert\tload\timportance\n");
    for (l, s) in stats.iter().enumerate() {
        for (e, (load, imp)) in s.loads.iter().zip(&s.importance).enumerate() {
            writeln!(text, "{l}\t{e}\t{load}\t{imp}").expect("write to string");
        }
    }
    text
}
