//! Browser bindings: replay selection on 2-D points, teacher rollouts of the
//! synthetic task suite, and the cold-start routing share of a new expert.

use moe_distill::replay::{prepare_features, select, SelectStrategy};
use moe_distill::teachers::{rollout, suite};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Chooses `m` of the points `(xs[i], ys[i])` with `strategy` (`dpp`,
/// `dpp_exact`, `ffs` or `random`). Returns the chosen indices.
#[wasm_bindgen]
pub fn select_points(xs: &[f64], ys: &[f64], m: usize, strategy: &str, seed: u64) -> Result<Vec<u32>, JsError> {
    if xs.len() != ys.len() {
        return Err(js_err("xs and ys differ in length"));
    }
    let strategy: SelectStrategy = strategy.parse().map_err(js_err)?;
    let points: Vec<Vec<f64>> = xs.iter().zip(ys).map(|(&x, &y)| vec![x, y]).collect();
    let features = prepare_features(&points).map_err(js_err)?;
    let sel = select(&features, m, strategy, seed).map_err(js_err)?;
    Ok(sel.indices.into_iter().map(|i| i as u32).collect())
}

/// Log-determinant of the linear kernel on the chosen points, as the
/// selector reports it.
#[wasm_bindgen]
pub fn selection_log_det(xs: &[f64], ys: &[f64], m: usize, strategy: &str, seed: u64) -> Result<f64, JsError> {
    let strategy: SelectStrategy = strategy.parse().map_err(js_err)?;
    let points: Vec<Vec<f64>> = xs.iter().zip(ys).map(|(&x, &y)| vec![x, y]).collect();
    let features = prepare_features(&points).map_err(js_err)?;
    Ok(select(&features, m, strategy, seed).map_err(js_err)?.log_det)
}

/// Names of the tasks in the synthetic suite, in id order.
#[wasm_bindgen]
pub fn task_names() -> Vec<String> {
    suite(40, 0.05).into_iter().map(|t| t.name).collect()
}

/// One teacher episode of task `task` as `[x0, y0, x1, y1, ...,
/// gx, gy, success]`, where `(gx, gy)` is the episode's goal.
#[wasm_bindgen]
pub fn teacher_rollout(task: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let tasks = suite(40, 0.05);
    let spec = tasks.get(task).ok_or_else(|| js_err(format!("no task {task}")))?;
    let traj = rollout(spec, seed).map_err(js_err)?;
    let mut out: Vec<f64> = traj.states.iter().flat_map(|s| [s[0], s[1]]).collect();
    let last = traj.states.last().expect("nonempty episode");
    let goal = spec.final_target(last);
    out.extend([goal[0], goal[1], f64::from(u8::from(traj.success))]);
    Ok(out)
}

/// Expected share of tokens routed to one new expert whose gate bias is
/// `bias`, when `existing` experts all have logit 0.
#[wasm_bindgen]
pub fn cold_start_share(existing: u32, bias: f64) -> f64 {
    let e = bias.exp();
    e / (f64::from(existing) + e)
}
