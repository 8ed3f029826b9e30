//! Read-only summaries of a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{pca_project, MetricsMatrix, Projection};
use crate::error::{Error, Result};
use crate::taskctx::read_embeddings;

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: usize,
    pub acc: f64,
    /// Absent at stage 1 and for runs without a shared student.
    pub bwt: Option<f64>,
}

/// One routing histogram row: layer, expert, load, importance.
pub type RoutingRow = (usize, usize, f64, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config: String,
    pub seed: Option<u64>,
    pub strategy: Option<String>,
    pub metrics: MetricsMatrix,
    pub stages: Vec<StageSummary>,
    /// Routing histogram of the last stage that has one.
    pub routing: Vec<RoutingRow>,
    /// Task ids with PCA coordinates of the last stage's task contexts.
    pub embeddings: Vec<(usize, [f64; 2])>,
    pub explained: [f64; 2],
}

fn toml_value(config: &str, key: &str) -> Option<String> {
    let table: toml::Table = config.parse().ok()?;
    match table.get(key)? {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        other => Some(other.to_string()),
    }
}

impl RunReport {
    /// Reads `metrics.tsv`, `config.toml`, `routing_stage_k.tsv` and
    /// `embeddings_stage_k.tsv` from a run directory. Nothing is written.
    pub fn load(run: &Path) -> Result<Self> {
        let metrics = MetricsMatrix::load(&run.join("metrics.tsv"))?;
        let config = fs::read_to_string(run.join("config.toml")).unwrap_or_default();
        let seed = toml_value(&config, "seed").and_then(|s| s.parse().ok());
        let strategy = toml_value(&config, "strategy");
        let shared = strategy.as_deref() != Some("independent");
        let mut stages = Vec::new();
        for k in 1..=metrics.stages() {
            stages.push(StageSummary {
                stage: k,
                acc: metrics.accuracy(k)?,
                bwt: if k >= 2 && shared { Some(metrics.bwt(k)?) } else { None },
            });
        }
        let mut routing = Vec::new();
        let mut embeddings = Vec::new();
        let mut explained = [0.0; 2];
        for k in (1..=metrics.stages()).rev() {
            let path = run.join(format!("routing_stage_{k}.tsv"));
            if path.exists() {
                routing = read_routing(&path)?;
                break;
            }
        }
        for k in (1..=metrics.stages()).rev() {
            let path = run.join(format!("embeddings_stage_{k}.tsv"));
            if !path.exists() {
                continue;
            }
            let rows = read_embeddings(&path)?;
            if rows.len() >= 2 {
                let vecs: Vec<Vec<f64>> = rows.values().cloned().collect();
                let Projection { coords, explained: ex } = pca_project(&vecs)?;
                embeddings = rows.keys().copied().zip(coords).collect();
                explained = ex;
            }
            break;
        }
        Ok(Self {
            config,
            seed,
            strategy,
            metrics,
            stages,
            routing,
            embeddings,
            explained,
        })
    }

    /// Writes `summary.tsv`, `routing.tsv` and `pca.tsv` into `dir`.
    pub fn write_plot_data(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut s = String::from("stage\tacc\tbwt\n");
        for st in &self.stages {
            let bwt = st.bwt.map_or("-".to_string(), |b| b.to_string());
            writeln!(s, "{}\t{}\t{bwt}", st.stage, st.acc).expect("write to string");
        }
        write(&dir.join("summary.tsv"), &s)?;
        let mut r = String::from("layer\texpert\tload\timportance\n");
        for (l, e, load, imp) in &self.routing {
            writeln!(r, "{l}\t{e}\t{load}\t{imp}").expect("write to string");
        }
        write(&dir.join("routing.tsv"), &r)?;
        let mut p = String::from("task\tpc1\tpc2\n");
        for (t, [x, y]) in &self.embeddings {
            writeln!(p, "{t}\t{x}\t{y}").expect("write to string");
        }
        write(&dir.join("pca.tsv"), &p)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_routing(path: &Path) -> Result<Vec<RoutingRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || {
            Error::parse(
                path,
                format!("line {}: expected layer, expert, load, importance", i + 1),
            )
        };
        let f: Vec<&str> = line.split('\t').collect();
        let [l, e, load, imp] = f[..] else { return Err(bad()) };
        rows.push((
            l.parse().map_err(|_| bad())?,
            e.parse().map_err(|_| bad())?,
            load.parse().map_err(|_| bad())?,
            imp.parse().map_err(|_| bad())?,
        ));
    }
    Ok(rows)
}

/// Plain-text table of Acc and BWT per stage, with routing balance and the
/// embedding projection summary.
pub fn render_report(report: &RunReport) -> String {
    let mut s = String::new();
    if let Some(strategy) = &report.strategy {
        writeln!(s, "strategy: {strategy}").expect("write to string");
    }
    if let Some(seed) = report.seed {
        writeln!(s, "seed: {seed}").expect("write to string");
    }
    writeln!(s, "{:>5}  {:>8}  {:>8}", "stage", "Acc", "BWT").expect("write to string");
    for st in &report.stages {
        let bwt = match (st.stage, st.bwt) {
            (_, Some(b)) => format!("{b:>8.4}"),
            (1, None) => format!("{:>8}", "-"),
            (_, None) => format!("{:>8}", "N/A"),
        };
        writeln!(s, "{:>5}  {:>8.4}  {bwt}", st.stage, st.acc).expect("write to string");
    }
    let layers = report.routing.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    for l in 0..layers {
        let loads: Vec<String> = report
            .routing
            .iter()
            .filter(|r| r.0 == l)
            .map(|r| format!("{:.0}", r.2))
            .collect();
        writeln!(s, "layer {l} loads: {}", loads.join(" ")).expect("write to string");
    }
    if !report.embeddings.is_empty() {
        writeln!(
            s,
            "task context PCA: {} tasks, explained {:.3} / {:.3}",
            report.embeddings.len(),
            report.explained[0],
            report.explained[1]
        )
        .expect("write to string");
    }
    s
}
