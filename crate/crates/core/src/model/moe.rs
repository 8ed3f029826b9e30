//! Sparse mixture-of-experts feed-forward layer.

use crate::error::Result;
use crate::numerics::{Bindings, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// Stage at whose start this expert was created (1 for the initial experts).
    pub added_at_stage: usize,
}

impl ExpertParams {
    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Gate columns and experts of one layer. Gate column `i` scores expert `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MoELayer {
    pub gate_w: Vec<ParamId>,
    pub gate_b: Vec<ParamId>,
    pub experts: Vec<ExpertParams>,
}

impl MoELayer {
    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn gate_frozen(&self, store: &ParamStore) -> bool {
        self.gate_ids().all(|id| !store.get(id).trainable)
    }

    pub fn expert_frozen(&self, store: &ParamStore, i: usize) -> bool {
        self.experts[i].ids().iter().all(|&id| !store.get(id).trainable)
    }

    pub fn gate_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.gate_w.iter().chain(&self.gate_b).copied()
    }
}

/// Per-layer routing statistics for one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GatingStats {
    /// Tokens assigned to each expert.
    pub loads: Vec<f64>,
    /// Gate probability mass received by each expert, summed over tokens.
    pub importance: Vec<f64>,
    pub tokens: usize,
}

impl GatingStats {
    /// Coefficient of variation of the loads.
    pub fn load_cv(&self) -> f64 {
        let n = self.loads.len() as f64;
        let mean = self.loads.iter().sum::<f64>() / n;
        if mean == 0.0 {
            return 0.0;
        }
        let var = self.loads.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
        var.sqrt() / mean
    }

    pub fn merge(&mut self, other: &GatingStats) {
        if self.loads.is_empty() {
            *self = other.clone();
            return;
        }
        for (a, b) in self.loads.iter_mut().zip(&other.loads) {
            *a += b;
        }
        for (a, b) in self.importance.iter_mut().zip(&other.importance) {
            *a += b;
        }
        self.tokens += other.tokens;
    }
}

/// Indices of the `k` largest logits, ties resolved toward the lower index.
/// Experts listed in `excluded` are never chosen.
pub fn top_k_indices(logits: &[f64], k: usize, excluded: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).filter(|i| !excluded.contains(i)).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Output of routing a batch of tokens through one MoE layer.
pub struct Routed {
    pub output: Var,
    pub probs: Var,
    pub stats: GatingStats,
    /// Load-balancing penalty of this layer, when requested.
    pub aux: Option<Var>,
}

/// Routes the rows of `x` (`[n, hidden]`) through `layer`.
///
/// Softmax is taken over every gate logit; the top-`k` experts by logit are
/// kept and their probabilities renormalized; the output is the
/// probability-weighted sum of the selected experts' outputs.
pub fn route(
    g: &mut Graph,
    bind: &Bindings,
    layer: &MoELayer,
    x: Var,
    k: usize,
    excluded: &[usize],
    aux_eps: Option<f64>,
) -> Result<Routed> {
    let n = g.value(x).rows();
    let n_experts = layer.len();

    let w_cols: Vec<Var> = layer.gate_w.iter().map(|&id| bind.var(id)).collect();
    let b_cols: Vec<Var> = layer.gate_b.iter().map(|&id| bind.var(id)).collect();
    let w = g.concat_cols(&w_cols)?;
    let b = g.concat_cols(&b_cols)?;
    let logits = g.matmul(x, w)?;
    let mut logits = g.add(logits, b)?;
    if !excluded.is_empty() {
        let mask: Vec<f64> = (0..n_experts)
            .map(|i| if excluded.contains(&i) { -1e30 } else { 0.0 })
            .collect();
        let mask = g.input(crate::numerics::Tensor::vector(mask))?;
        logits = g.add(logits, mask)?;
    }
    let probs = g.softmax(logits)?;

    let logit_values = g.value(logits).clone();
    let selected: Vec<Vec<usize>> = (0..n)
        .map(|r| top_k_indices(logit_values.row(r), k, excluded))
        .collect();
    let mut rows_for: Vec<Vec<usize>> = vec![Vec::new(); n_experts];
    for (r, sel) in selected.iter().enumerate() {
        for &e in sel {
            rows_for[e].push(r);
        }
    }
    let weights = g.topk_renorm(probs, selected)?;

    let mut output: Option<Var> = None;
    for (e, rows) in rows_for.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let ex = &layer.experts[e];
        let xe = g.gather_rows(x, rows)?;
        let h = g.matmul(xe, bind.var(ex.w1))?;
        let h = g.add(h, bind.var(ex.b1))?;
        let h = g.gelu(h)?;
        let y = g.matmul(h, bind.var(ex.w2))?;
        let y = g.add(y, bind.var(ex.b2))?;
        let we = g.gather_rows(weights, rows)?;
        let we = g.slice_cols(we, e, 1)?;
        let y = g.mul(y, we)?;
        let y = g.scatter_add_rows(y, rows, n)?;
        output = Some(match output {
            None => y,
            Some(acc) => g.add(acc, y)?,
        });
    }
    let output = output.expect("every token selects at least one expert");

    let loads: Vec<f64> = rows_for.iter().map(|r| r.len() as f64).collect();
    let importance_var = g.sum_rows(probs)?;
    let stats = GatingStats {
        loads: loads.clone(),
        importance: g.value(importance_var).data().to_vec(),
        tokens: n,
    };
    let aux = match aux_eps {
        Some(eps) => Some(g.balance_penalty(importance_var, &loads, eps)?),
        None => None,
    };
    Ok(Routed {
        output,
        probs,
        stats,
        aux,
    })
}
