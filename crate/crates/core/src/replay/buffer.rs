use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SelectStrategy;
use crate::error::{Error, Result};
use crate::teachers::{read_trajectories, write_trajectories, Trajectory};

/// Replayed trajectories of past tasks, capped at a fraction of every
/// distillation trajectory seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    pub budget: f64,
    /// Distillation trajectories seen across all stages.
    pub seen: usize,
    pub by_task: BTreeMap<usize, Vec<Trajectory>>,
}

#[derive(Serialize, Deserialize)]
struct BufferHeader {
    budget: f64,
    seen: usize,
}

impl ReplayBuffer {
    pub fn new(budget: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&budget) {
            return Err(Error::Config(format!("replay budget {budget} outside [0, 1]")));
        }
        Ok(Self {
            budget,
            seen: 0,
            by_task: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.by_task.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest buffer size allowed after `seen` distillation trajectories.
    pub fn capacity_for(&self, seen: usize) -> usize {
        (self.budget * seen as f64 + 1e-9).floor() as usize
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.by_task.values().flatten()
    }

    /// Accounts for `new_seen` distillation trajectories and appends the
    /// selected ones. Nothing changes when the budget would be exceeded.
    pub fn update(&mut self, new_seen: usize, selected: Vec<Trajectory>) -> Result<()> {
        let seen = self.seen + new_seen;
        let size = self.len() + selected.len();
        if size > self.capacity_for(seen) {
            return Err(Error::Buffer(format!(
                "{size} trajectories exceed {:.0}% of {seen}",
                self.budget * 100.0
            )));
        }
        self.seen = seen;
        for t in selected {
            self.by_task.entry(t.task_id).or_default().push(t);
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let all: Vec<Trajectory> = self.trajectories().cloned().collect();
        write_trajectories(&dir.join("buffer.jsonl"), &all)?;
        let header = BufferHeader {
            budget: self.budget,
            seen: self.seen,
        };
        let path = dir.join("buffer.toml");
        let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("buffer.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: BufferHeader = toml::from_str(&text).map_err(|e| Error::parse(&path, e))?;
        let mut buf = Self::new(header.budget)?;
        buf.seen = header.seen;
        for t in read_trajectories(&dir.join("buffer.jsonl"))? {
            buf.by_task.entry(t.task_id).or_default().push(t);
        }
        Ok(buf)
    }
}

/// One line of the selection audit.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub stage: usize,
    pub task: usize,
    pub strategy: SelectStrategy,
    pub seed: u64,
    /// Episode seeds of the chosen trajectories.
    pub chosen: Vec<u64>,
    pub log_det: f64,
}

pub fn write_audit(path: &Path, rows: &[AuditRow]) -> Result<()> {
    let mut text = String::from("stage\ttask\tstrategy\tseed\tchosen\tlog_det\n");
    for r in rows {
        let ids: Vec<String> = r.chosen.iter().map(u64::to_string).collect();
        writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.stage,
            r.task,
            r.strategy,
            r.seed,
            ids.join(","),
            r.log_det
        )
        .expect("write to string");
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |what: &str| Error::parse(path, format!("line {}: bad {what}", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        let [stage, task, strategy, seed, chosen, log_det] = f[..] else {
            return Err(bad("field count"));
        };
        rows.push(AuditRow {
            stage: stage.parse().map_err(|_| bad("stage"))?,
            task: task.parse().map_err(|_| bad("task"))?,
            strategy: strategy.parse().map_err(|_| bad("strategy"))?,
            seed: seed.parse().map_err(|_| bad("seed"))?,
            chosen: if chosen.is_empty() {
                Vec::new()
            } else {
                chosen
                    .split(',')
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("chosen ids"))?
            },
            log_det: log_det.parse().map_err(|_| bad("log_det"))?,
        });
    }
    Ok(rows)
}
