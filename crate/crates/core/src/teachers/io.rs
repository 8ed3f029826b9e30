//! Line-delimited trajectory files, one episode per line.
//!
//! Floats are written in scientific notation with 17 significant digits, so
//! reading a file back reproduces every value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::Trajectory;
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Record {
    task_id: usize,
    seed: u64,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    success: bool,
}

fn push_floats(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{v:.16e}").expect("write to string");
    }
    out.push(']');
}

fn push_rows(out: &mut String, rows: &[Vec<f64>]) {
    out.push('[');
    for (i, r) in rows.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_floats(out, r);
    }
    out.push(']');
}

pub fn to_line(t: &Trajectory) -> String {
    let mut s = format!("{{\"task_id\":{},\"seed\":{},\"states\":", t.task_id, t.seed);
    push_rows(&mut s, &t.states);
    s.push_str(",\"actions\":");
    push_rows(&mut s, &t.actions);
    s.push_str(",\"rewards\":");
    push_floats(&mut s, &t.rewards);
    write!(s, ",\"success\":{}}}", t.success).expect("write to string");
    s
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::new();
    for t in trajs {
        if t.states
            .iter()
            .chain(&t.actions)
            .flatten()
            .chain(&t.rewards)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Input(format!(
                "trajectory with seed {} has non-finite values",
                t.seed
            )));
        }
        text.push_str(&to_line(t));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: Record = serde_json::from_str(line).map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?;
        let t = Trajectory {
            task_id: r.task_id,
            seed: r.seed,
            states: r.states,
            actions: r.actions,
            rewards: r.rewards,
            success: r.success,
        };
        t.validate()
            .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?;
        out.push(t);
    }
    Ok(out)
}
