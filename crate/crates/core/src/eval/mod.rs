//! Stage-by-task success matrix, Acc/BWT, and PCA of task embeddings.

mod report;

pub use report::{render_report, RunReport, StageSummary};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// `a[k][j]`: success rate on task `j` after stage `k + 1`. Entries exist
/// only for tasks introduced at or before that stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsMatrix {
    /// Task ids in introduction order.
    pub tasks: Vec<usize>,
    /// Stage (1-based) at which each task in `tasks` was introduced.
    pub intro: Vec<usize>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl MetricsMatrix {
    pub fn new(stages: &[Vec<usize>]) -> Self {
        let mut m = Self::default();
        for (k, ids) in stages.iter().enumerate() {
            for &id in ids {
                m.tasks.push(id);
                m.intro.push(k + 1);
            }
        }
        m
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    fn column(&self, task: usize) -> Result<usize> {
        self.tasks
            .iter()
            .position(|&t| t == task)
            .ok_or_else(|| Error::Metrics(format!("unknown task {task}")))
    }

    /// Records the success rate of every task seen by `stage` (1-based).
    pub fn record(&mut self, stage: usize, task: usize, rate: f64) -> Result<()> {
        let j = self.column(task)?;
        if stage == 0 || self.intro[j] > stage {
            return Err(Error::Metrics(format!(
                "task {task} is not introduced by stage {stage}"
            )));
        }
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Metrics(format!("success rate {rate} outside [0, 1]")));
        }
        while self.rows.len() < stage {
            self.rows.push(vec![None; self.tasks.len()]);
        }
        self.rows[stage - 1][j] = Some(rate);
        Ok(())
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        let j = self.column(task).ok()?;
        self.rows.get(stage.checked_sub(1)?)?.get(j).copied().flatten()
    }

    fn entry(&self, stage: usize, j: usize) -> Result<f64> {
        self.rows
            .get(stage - 1)
            .and_then(|r| r[j])
            .ok_or_else(|| Error::Metrics(format!("missing entry for task {} at stage {stage}", self.tasks[j])))
    }

    fn seen_by(&self, stage: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.tasks.len()).filter(move |&j| self.intro[j] <= stage)
    }

    /// Mean success after `stage` over every task introduced so far.
    pub fn accuracy(&self, stage: usize) -> Result<f64> {
        if stage == 0 || stage > self.rows.len() {
            return Err(Error::Metrics(format!("no row for stage {stage}")));
        }
        let vals = self
            .seen_by(stage)
            .map(|j| self.entry(stage, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean change after `stage` relative to each earlier task's
    /// introduction-stage success.
    pub fn bwt(&self, stage: usize) -> Result<f64> {
        if stage < 2 {
            return Err(Error::Metrics("backward transfer is undefined at stage 1".into()));
        }
        if stage > self.rows.len() {
            return Err(Error::Metrics(format!("no row for stage {stage}")));
        }
        let diffs = (0..self.tasks.len())
            .filter(|&j| self.intro[j] < stage)
            .map(|j| Ok(self.entry(stage, j)? - self.entry(self.intro[j], j)?))
            .collect::<Result<Vec<_>>>()?;
        if diffs.is_empty() {
            return Err(Error::Metrics(format!("no task precedes stage {stage}")));
        }
        Ok(diffs.iter().sum::<f64>() / diffs.len() as f64)
    }

    /// Tab-separated: a header of task ids, then one row per stage with `-`
    /// for tasks not yet introduced.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("stage");
        for t in &self.tasks {
            write!(s, "\t{t}").expect("write to string");
        }
        s.push('\n');
        for (k, row) in self.rows.iter().enumerate() {
            write!(s, "{}", k + 1).expect("write to string");
            for v in row {
                match v {
                    Some(v) => write!(s, "\t{v}").expect("write to string"),
                    None => s.push_str("\t-"),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Metrics("empty metrics file".into()))?;
        let mut fields = header.split('\t');
        if fields.next() != Some("stage") {
            return Err(Error::Metrics("metrics header must start with `stage`".into()));
        }
        let tasks: Vec<usize> = fields
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Metrics("bad task id in header".into()))?;
        let mut m = MetricsMatrix {
            intro: vec![0; tasks.len()],
            tasks,
            rows: Vec::new(),
        };
        for (k, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != m.tasks.len() + 1 || cells[0] != (k + 1).to_string() {
                return Err(Error::Metrics(format!("malformed row for stage {}", k + 1)));
            }
            let mut row = Vec::with_capacity(m.tasks.len());
            for (j, c) in cells[1..].iter().enumerate() {
                if *c == "-" {
                    row.push(None);
                    continue;
                }
                let v: f64 = c.parse().map_err(|_| Error::Metrics(format!("bad entry {c}")))?;
                if m.intro[j] == 0 {
                    m.intro[j] = k + 1;
                }
                row.push(Some(v));
            }
            m.rows.push(row);
        }
        if m.intro.contains(&0) {
            // tasks never evaluated keep an introduction stage past the last row
            let next = m.rows.len() + 1;
            m.intro.iter_mut().filter(|i| **i == 0).for_each(|i| *i = next);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

/// Coordinates on the top two principal axes and the fraction of variance
/// each axis explains.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub explained: [f64; 2],
}

/// PCA on mean-centered vectors. Each axis is signed so that its
/// largest-magnitude loading is positive.
pub fn pca_project(points: &[Vec<f64>]) -> Result<Projection> {
    if points.len() < 2 {
        return Err(Error::Input("PCA needs at least two vectors".into()));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Dimension("PCA inputs differ in dimension".into()));
    }
    let n = points.len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut coords = vec![[0.0; 2]; n];
    let mut explained = [0.0; 2];
    for (axis, &k) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[k].max(0.0);
        if total <= 0.0 || lambda <= total * 1e-14 {
            continue;
        }
        explained[axis] = lambda / total;
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, c) in coords.iter_mut().enumerate() {
            c[axis] = (0..d).map(|j| x[(i, j)] * v[j]).sum();
        }
    }
    Ok(Projection { coords, explained })
}
