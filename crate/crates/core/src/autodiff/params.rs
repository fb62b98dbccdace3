//! Named parameter storage with per-parameter Adam state.
//!
//! Parameters are registered once at model construction in a fixed order;
//! `ParamId` is the registration index. Every numeric loop below iterates in
//! id order so that optimization is bitwise reproducible run to run.

use std::collections::BTreeMap;

use super::graph::Gradients;
use super::tensor::{Shape, Tensor};
use super::AutodiffError;

/// Stable handle to a registered parameter (its registration index).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    step: u64,
}

/// Adam hyperparameters. `lr` has no default; the caller owns it.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Flat store of named parameter tensors plus optimizer state.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId, AutodiffError> {
        if self.by_name.contains_key(name) {
            return Err(AutodiffError::DuplicateParam {
                name: name.to_string(),
            });
        }
        let id = self.entries.len();
        let len = value.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: vec![0.0; len],
            adam_m: vec![0.0; len],
            adam_v: vec![0.0; len],
            step: 0,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters across all tensors.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn shape(&self, id: ParamId) -> Shape {
        self.entries[id.0].value.shape()
    }

    pub fn set_value(&mut self, id: ParamId, data: Vec<f64>) {
        let entry = &mut self.entries[id.0];
        assert_eq!(entry.value.len(), data.len(), "set_value length mismatch");
        entry.value = Tensor::new(entry.value.shape(), data);
    }

    /// Add `delta` to one scalar component. Used by finite-difference probes
    /// and by tests that need hand-crafted parameter values.
    pub fn perturb(&mut self, id: ParamId, index: usize, delta: f64) {
        let entry = &mut self.entries[id.0];
        let mut data = entry.value.data().to_vec();
        data[index] += delta;
        entry.value = Tensor::new(entry.value.shape(), data);
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Accumulate `scale * grads` into the stored gradients. Reduction order
    /// across calls is the caller's responsibility (keep it fixed).
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.entries() {
            let slot = &mut self.entries[id.0].grad;
            debug_assert_eq!(slot.len(), g.len());
            for (dst, src) in slot.iter_mut().zip(g.iter()) {
                *dst += scale * src;
            }
        }
    }

    /// One Adam update with bias correction over every parameter, in id
    /// order. Gradients are zeroed afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), AutodiffError> {
        for e in &self.entries {
            if e.grad.iter().any(|g| !g.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient {
                    name: e.name.clone(),
                });
            }
        }
        for e in &mut self.entries {
            e.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(e.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(e.step as i32);
            let mut data = e.value.data().to_vec();
            for i in 0..data.len() {
                let g = e.grad[i];
                e.adam_m[i] = cfg.beta1 * e.adam_m[i] + (1.0 - cfg.beta1) * g;
                e.adam_v[i] = cfg.beta2 * e.adam_v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = e.adam_m[i] / bc1;
                let v_hat = e.adam_v[i] / bc2;
                data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            e.value = Tensor::new(e.value.shape(), data);
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.entries[id.0].step
    }

    pub fn adam_state(&self, id: ParamId) -> (&[f64], &[f64], u64) {
        let e = &self.entries[id.0];
        (&e.adam_m, &e.adam_v, e.step)
    }

    /// Restore optimizer state (checkpoint load).
    pub fn set_adam_state(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>, step: u64) {
        let e = &mut self.entries[id.0];
        assert_eq!(m.len(), e.value.len());
        assert_eq!(v.len(), e.value.len());
        e.adam_m = m;
        e.adam_v = v;
        e.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn duplicate_registration_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(1.0)).unwrap();
        let err = store.register("w", Tensor::scalar(2.0)).unwrap_err();
        assert!(matches!(err, AutodiffError::DuplicateParam { .. }));
    }

    #[test]
    fn zero_gradient_fresh_state_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::vector(vec![0.5, -1.5])).unwrap();
        store.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(store.value(id).data(), &[0.5, -1.5]);
    }

    #[test]
    fn first_adam_step_moves_by_roughly_lr() {
        // g=1 at step 1: m_hat = 1, v_hat = 1, delta = lr / (1 + eps).
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::scalar(2.0)).unwrap();
        {
            let mut g = Graph::new(&store);
            let w = g.param(id);
            let root = g.sum(w);
            let grads = g.backward(root).unwrap();
            store.accumulate(&grads, 1.0);
        }
        store.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        let got = store.value(id).item();
        assert!((got - 1.9).abs() < 1e-6, "got {got}");
        // Gradients are cleared by the step.
        assert_eq!(store.grad(id), &[0.0]);
    }

    #[test]
    fn identical_params_identical_updates() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::scalar(0.3)).unwrap();
        let b = store.register("b", Tensor::scalar(0.3)).unwrap();
        {
            let mut g = Graph::new(&store);
            let va = g.param(a);
            let vb = g.param(b);
            let combined = g0(&mut g, va, vb);
            let root = g.sum(combined);
            let grads = g.backward(root).unwrap();
            store.accumulate(&grads, 1.0);
        }
        store.adam_step(&AdamConfig::with_lr(0.05)).unwrap();
        assert_eq!(store.value(a).item(), store.value(b).item());
    }

    fn g0(g: &mut Graph, a: crate::autodiff::Var, b: crate::autodiff::Var) -> crate::autodiff::Var {
        let s = g.add(a, b);
        g.mul(s, s)
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        let id = store.register("bad.param", Tensor::scalar(1.0)).unwrap();
        {
            let mut g = Graph::new(&store);
            let w = g.param(id);
            let l = g.ln(w); // fine
            let root = g.sum(l);
            let grads = g.backward(root).unwrap();
            store.accumulate(&grads, f64::NAN);
        }
        let err = store.adam_step(&AdamConfig::with_lr(0.1)).unwrap_err();
        match err {
            AutodiffError::NonFiniteGradient { name } => assert_eq!(name, "bad.param"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
