//! Regularizers of the EWC and KL baselines.

use crate::error::{Error, Result};
use crate::numerics::{Bindings, Gradients, Graph, ParamId, ParamStore, Tensor, Var};

/// Anchor values and diagonal Fisher weights of the groups they cover.
#[derive(Clone, Debug, PartialEq)]
pub struct EwcState {
    pub lambda: f64,
    pub entries: Vec<EwcEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EwcEntry {
    pub id: ParamId,
    pub anchor: Tensor,
    pub fisher: Tensor,
}

/// Mean of squared per-batch gradients, for every group present in all of them.
pub fn fisher_from_gradients(batches: &[Gradients]) -> Result<Vec<(ParamId, Tensor)>> {
    let first = batches
        .first()
        .ok_or_else(|| Error::Input("Fisher estimate needs at least one batch".into()))?;
    let n = batches.len() as f64;
    let mut out = Vec::new();
    for (id, g0) in first.iter() {
        let mut acc = Tensor::zeros(g0.shape());
        for b in batches {
            let g = b
                .get(id)
                .ok_or_else(|| Error::State("gradient missing in one Fisher batch".into()))?;
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v * v / n;
            }
        }
        out.push((id, acc));
    }
    Ok(out)
}

impl EwcState {
    /// Anchors at the current values of `store` for every group in `fisher`.
    pub fn anchor(store: &ParamStore, fisher: Vec<(ParamId, Tensor)>, lambda: f64) -> Self {
        let entries = fisher
            .into_iter()
            .map(|(id, f)| EwcEntry {
                id,
                anchor: store.tensor(id).clone(),
                fisher: f,
            })
            .collect();
        Self { lambda, entries }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        for e in &self.entries {
            if e.id.index() >= store.len() || store.tensor(e.id).shape() != e.anchor.shape() {
                return Err(Error::State("EWC anchor does not match the model".into()));
            }
        }
        Ok(())
    }

    /// `(lambda / 2) * sum F (theta - theta*)^2` in the graph.
    pub fn penalty(&self, g: &mut Graph, bind: &Bindings, store: &ParamStore) -> Result<Option<Var>> {
        self.check(store)?;
        let mut total: Option<Var> = None;
        for e in self.entries.iter().filter(|e| store.get(e.id).trainable) {
            let anchor = g.input(e.anchor.clone())?;
            let fisher = g.input(e.fisher.clone())?;
            let d = g.sub(bind.var(e.id), anchor)?;
            let sq = g.mul(d, d)?;
            let w = g.mul(sq, fisher)?;
            let s = g.sum_all(w)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        total.map(|t| g.scale(t, self.lambda / 2.0)).transpose()
    }

    pub fn value(&self, store: &ParamStore) -> Result<f64> {
        self.check(store)?;
        let mut s = 0.0;
        for e in &self.entries {
            for ((p, a), f) in store
                .tensor(e.id)
                .data()
                .iter()
                .zip(e.anchor.data())
                .zip(e.fisher.data())
            {
                s += f * (p - a) * (p - a);
            }
        }
        Ok(self.lambda / 2.0 * s)
    }
}

/// `mean_rows |mu_new - mu_old|^2 / (2 sigma^2)`: the divergence between
/// Gaussians with a shared fixed variance.
pub fn kl_penalty(g: &mut Graph, new_actions: Var, old_actions: Option<&Tensor>, sigma: f64) -> Result<Var> {
    let old = old_actions.ok_or_else(|| Error::State("no previous-stage model for the KL penalty".into()))?;
    let old = g.input(old.clone())?;
    let m = g.mse(new_actions, old)?;
    g.scale(m, 1.0 / (2.0 * sigma * sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::scalar(v), true).unwrap();
        (s, id)
    }

    #[test]
    fn fisher_of_constant_gradient_is_its_square() {
        let mut g = Gradients::empty(1);
        let (_, id) = scalar_store(0.0);
        g.set(id, Tensor::scalar(-1.5));
        let f = fisher_from_gradients(&[g.clone(), g.clone(), g]).unwrap();
        assert_eq!(f[0].1.item(), 2.25);
        let mut z = Gradients::empty(1);
        z.set(id, Tensor::scalar(0.0));
        assert_eq!(fisher_from_gradients(&[z]).unwrap()[0].1.item(), 0.0);
    }

    #[test]
    fn ewc_examples() {
        let (mut store, id) = scalar_store(1.0);
        let state = EwcState::anchor(&store, vec![(id, Tensor::scalar(2.0))], 1.0);
        assert_eq!(state.value(&store).unwrap(), 0.0);
        store.get_mut(id).tensor = Tensor::scalar(1.5);
        assert!((state.value(&store).unwrap() - 0.25).abs() < 1e-15);
        let zero = EwcState::anchor(&store, vec![(id, Tensor::scalar(0.0))], 1.0);
        store.get_mut(id).tensor = Tensor::scalar(9.0);
        assert_eq!(zero.value(&store).unwrap(), 0.0);
        let mut g = Graph::new();
        let bind = g.bind(&store).unwrap();
        let p = state.penalty(&mut g, &bind, &store).unwrap().unwrap();
        assert!((g.value(p).item() - state.value(&store).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let new = g
            .input(Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap())
            .unwrap();
        let old = Tensor::zeros(&[1, 4]);
        let p = kl_penalty(&mut g, new, Some(&old), 1.0).unwrap();
        assert_eq!(g.value(p).item(), 0.5);
        let same = kl_penalty(
            &mut g,
            new,
            Some(&Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap()),
            1.0,
        )
        .unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let wide = kl_penalty(&mut g, new, Some(&old), 1e6).unwrap();
        assert!(g.value(wide).item() < 1e-12);
        assert!(matches!(kl_penalty(&mut g, new, None, 1.0), Err(Error::State(_))));
    }
}
