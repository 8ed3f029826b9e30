//! Diversity-aware replay selection.
//!
//! A trajectory is featurized by the means of its states over consecutive
//! non-overlapping slices. Selection maximizes the determinant of the chosen
//! principal minor of `L = V V^T` (greedy MAP, or exhaustive for small
//! pools), with farthest-first and uniform sampling as alternatives.

mod buffer;

pub use buffer::{read_audit, write_audit, AuditRow, ReplayBuffer};

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::teachers::Trajectory;

/// Below this residual variance a greedy DPP step no longer adds volume.
const RANK_TOL: f64 = 1e-10;
const EXACT_MAX_N: usize = 15;
const EXACT_MAX_M: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectStrategy {
    /// Greedy MAP inference.
    Dpp,
    /// Exhaustive search over all subsets; small pools only.
    DppExact,
    Ffs,
    Random,
}

impl fmt::Display for SelectStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectStrategy::Dpp => "dpp",
            SelectStrategy::DppExact => "dpp_exact",
            SelectStrategy::Ffs => "ffs",
            SelectStrategy::Random => "random",
        })
    }
}

impl FromStr for SelectStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpp" => Ok(SelectStrategy::Dpp),
            "dpp_exact" => Ok(SelectStrategy::DppExact),
            "ffs" => Ok(SelectStrategy::Ffs),
            "random" => Ok(SelectStrategy::Random),
            other => Err(Error::Config(format!("unknown selection strategy {other}"))),
        }
    }
}

/// Slice-mean feature of the first `H` states, `H / l` slices of `obs_dim`.
pub fn featurize(traj: &Trajectory, l: usize) -> Result<Vec<f64>> {
    let h = traj.actions.len();
    if l == 0 || h == 0 || !h.is_multiple_of(l) {
        return Err(Error::Pool(format!(
            "horizon {h} is not a positive multiple of slice length {l}"
        )));
    }
    let d = traj.states[0].len();
    let mut v = Vec::with_capacity(h / l * d);
    for chunk in traj.states[..h].chunks(l) {
        let mut mean = vec![0.0; d];
        for s in chunk {
            for (m, x) in mean.iter_mut().zip(s) {
                *m += x;
            }
        }
        v.extend(mean.into_iter().map(|m| m / l as f64));
    }
    Ok(v)
}

/// Featurizes a pool, rejecting mixed horizons.
pub fn featurize_pool(trajs: &[&Trajectory], l: usize) -> Result<Vec<Vec<f64>>> {
    if let Some(first) = trajs.first() {
        if trajs.iter().any(|t| t.actions.len() != first.actions.len()) {
            return Err(Error::Pool("trajectories in one pool must share a horizon".into()));
        }
    }
    trajs.iter().map(|t| featurize(t, l)).collect()
}

/// Centers features and scales them to unit average norm.
pub fn prepare_features(features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = check_dims(features)?;
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x / n;
        }
    }
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let avg_norm = centered
        .iter()
        .map(|f| f.iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum::<f64>()
        / n;
    if avg_norm == 0.0 {
        return Ok(centered);
    }
    Ok(centered
        .into_iter()
        .map(|f| f.into_iter().map(|x| x / avg_norm).collect())
        .collect())
}

fn check_dims(features: &[Vec<f64>]) -> Result<usize> {
    let d = features.first().ok_or_else(|| Error::Pool("empty pool".into()))?.len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Pool("features differ in dimension".into()));
    }
    Ok(d)
}

/// Gram matrix of the features, checked symmetric and positive semidefinite.
pub fn build_kernel(features: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    check_dims(features)?;
    let n = features.len();
    let l = DMatrix::from_fn(n, n, |i, j| {
        features[i].iter().zip(&features[j]).map(|(a, b)| a * b).sum::<f64>()
    });
    check_kernel(&l)?;
    Ok(l)
}

pub fn check_kernel(l: &DMatrix<f64>) -> Result<()> {
    let n = l.nrows();
    for i in 0..n {
        for j in 0..i {
            if (l[(i, j)] - l[(j, i)]).abs() > 1e-10 {
                return Err(Error::Pool(format!("kernel not symmetric at ({i}, {j})")));
            }
        }
    }
    let min = SymmetricEigen::new(l.clone()).eigenvalues.min();
    if min < -1e-8 {
        return Err(Error::Pool(format!("kernel has eigenvalue {min}")));
    }
    Ok(())
}

/// Determinant of the principal minor on `indices` (1 for the empty set).
pub fn subset_det(l: &DMatrix<f64>, indices: &[usize]) -> f64 {
    let mut idx = indices.to_vec();
    idx.sort_unstable();
    let k = idx.len();
    DMatrix::from_fn(k, k, |a, b| l[(idx[a], idx[b])]).determinant()
}

pub fn log_det(l: &DMatrix<f64>, indices: &[usize]) -> f64 {
    let d = subset_det(l, indices);
    if d > 0.0 {
        d.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn kernel_dist2(l: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    l[(i, i)] + l[(j, j)] - 2.0 * l[(i, j)]
}

/// Farthest remaining item from `chosen` in kernel distance.
fn farthest(l: &DMatrix<f64>, chosen: &[usize], remaining: &[bool]) -> usize {
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (i, _) in remaining.iter().enumerate().filter(|(_, r)| **r) {
        let d = chosen
            .iter()
            .map(|&c| kernel_dist2(l, i, c))
            .fold(f64::INFINITY, f64::min);
        if d > best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Greedy MAP: each step adds the item with the largest conditional
/// variance (fast incremental Cholesky). Once the residual variance of every
/// candidate vanishes the remaining picks are farthest-first.
pub fn greedy_dpp(l: &DMatrix<f64>, m: usize) -> Vec<usize> {
    let n = l.nrows();
    let mut d2: Vec<f64> = (0..n).map(|i| l[(i, i)]).collect();
    let mut c: Vec<Vec<f64>> = vec![Vec::with_capacity(m); n];
    let mut remaining = vec![true; n];
    let mut chosen = Vec::with_capacity(m);
    let scale = d2.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    while chosen.len() < m {
        let mut j = usize::MAX;
        for i in (0..n).filter(|&i| remaining[i]) {
            if j == usize::MAX || d2[i] > d2[j] {
                j = i;
            }
        }
        if d2[j] <= RANK_TOL * scale {
            let j = if chosen.is_empty() {
                j
            } else {
                farthest(l, &chosen, &remaining)
            };
            remaining[j] = false;
            chosen.push(j);
            continue;
        }
        let dj = d2[j].sqrt();
        let cj = c[j].clone();
        for i in (0..n).filter(|&i| remaining[i] && i != j) {
            let dot: f64 = cj.iter().zip(&c[i]).map(|(a, b)| a * b).sum();
            let e = (l[(j, i)] - dot) / dj;
            c[i].push(e);
            d2[i] -= e * e;
        }
        remaining[j] = false;
        chosen.push(j);
    }
    chosen
}

/// Exhaustive search for the subset of size `m` with the largest minor;
/// ties go to the lexicographically first subset.
pub fn exact_dpp(l: &DMatrix<f64>, m: usize) -> Vec<usize> {
    let n = l.nrows();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut idx: Vec<usize> = (0..m).collect();
    loop {
        let d = subset_det(l, &idx);
        if d > best.0 {
            best = (d, idx.clone());
        }
        // next combination in lexicographic order
        let mut i = m;
        while i > 0 && idx[i - 1] == n - m + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        idx[i - 1] += 1;
        for k in i..m {
            idx[k] = idx[k - 1] + 1;
        }
    }
    best.1
}

/// Farthest-first in Euclidean feature space, starting from the largest norm.
pub fn ffs(features: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = features.len();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let norm2 = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>();
    let mut first = 0;
    for i in 1..n {
        if norm2(&features[i]) > norm2(&features[first]) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    let mut mind: Vec<f64> = features.iter().map(|f| dist2(f, &features[first])).collect();
    mind[first] = f64::NEG_INFINITY;
    while chosen.len() < m {
        let mut j = usize::MAX;
        for i in 0..n {
            if mind[i] > f64::NEG_INFINITY && (j == usize::MAX || mind[i] > mind[j]) {
                j = i;
            }
        }
        chosen.push(j);
        mind[j] = f64::NEG_INFINITY;
        for i in 0..n {
            if mind[i] > f64::NEG_INFINITY {
                mind[i] = mind[i].min(dist2(&features[i], &features[j]));
            }
        }
    }
    chosen
}

pub fn random_subset(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, n, m).into_vec()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub log_det: f64,
}

/// Chooses `m` of the pool's items.
pub fn select(features: &[Vec<f64>], m: usize, strategy: SelectStrategy, seed: u64) -> Result<Selection> {
    let n = features.len();
    if m > n {
        return Err(Error::Selection(format!("cannot choose {m} of {n}")));
    }
    if m == 0 {
        return Ok(Selection {
            indices: Vec::new(),
            log_det: 0.0,
        });
    }
    let l = build_kernel(features)?;
    let indices = match strategy {
        SelectStrategy::Dpp => greedy_dpp(&l, m),
        SelectStrategy::DppExact => {
            if n > EXACT_MAX_N || m > EXACT_MAX_M {
                return Err(Error::Selection(format!(
                    "exact search limited to n <= {EXACT_MAX_N}, m <= {EXACT_MAX_M}"
                )));
            }
            exact_dpp(&l, m)
        }
        SelectStrategy::Ffs => ffs(features, m),
        SelectStrategy::Random => random_subset(n, m, seed),
    };
    Ok(Selection {
        log_det: log_det(&l, &indices),
        indices,
    })
}
