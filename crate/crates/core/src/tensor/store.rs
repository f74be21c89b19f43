//! Flat registry of optimizable arrays with gradient buffers and Adam state.

use std::collections::BTreeMap;

use super::scalar::{sc, Scalar};
use super::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    m: Tensor<S>,
    v: Tensor<S>,
    pub step: u64,
    pub lr: f64,
    pub enabled: bool,
}

impl<S: Scalar> Param<S> {
    fn new(value: Tensor<S>, lr: f64) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: Tensor::zeros(shape.clone()),
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
            step: 0,
            lr,
            enabled: true,
        }
    }
}

/// Named optimizable tensors. Iteration order is the lexicographic name
/// order, which keeps every whole-store reduction deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<S> {
    params: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            params: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>, lr: f64) {
        assert!(
            !self.params.contains_key(name),
            "parameter {name} registered twice"
        );
        self.params.insert(name.to_string(), Param::new(value, lr));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    fn get(&self, name: &str) -> &Param<S> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn get_mut(&mut self, name: &str) -> &mut Param<S> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn param(&self, name: &str) -> &Param<S> {
        self.get(name)
    }

    pub fn value(&self, name: &str) -> &Tensor<S> {
        &self.get(name).value
    }

    pub fn slice(&self, name: &str) -> &[S] {
        self.get(name).value.data()
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor<S> {
        &mut self.get_mut(name).value
    }

    pub fn grad(&self, name: &str) -> &Tensor<S> {
        &self.get(name).grad
    }

    pub fn set_lr(&mut self, name: &str, lr: f64) {
        self.get_mut(name).lr = lr;
    }

    pub fn scale_all_lr(&mut self, factor: f64) {
        for p in self.params.values_mut() {
            p.lr *= factor;
        }
    }

    /// Enable/disable every parameter whose name starts with `prefix`.
    pub fn set_enabled(&mut self, prefix: &str, enabled: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.enabled = enabled;
            }
        }
    }

    pub fn set_all_enabled(&mut self, enabled: bool) {
        for p in self.params.values_mut() {
            p.enabled = enabled;
        }
    }

    pub fn enabled(&self, name: &str) -> bool {
        self.get(name).enabled
    }

    /// Accumulate a gradient contribution (same length as the value).
    pub fn add_grad(&mut self, name: &str, contribution: &[S]) {
        let p = self.get_mut(name);
        assert_eq!(
            p.grad.len(),
            contribution.len(),
            "gradient length mismatch for {name}"
        );
        for (g, c) in p.grad.data_mut().iter_mut().zip(contribution) {
            *g = *g + *c;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(S::zero());
        }
    }

    /// Global L2 norm of all enabled gradients (deterministic order).
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        for p in self.params.values() {
            if !p.enabled {
                continue;
            }
            for g in p.grad.data() {
                let g = g.to_f64_s();
                acc += g * g;
            }
        }
        acc.sqrt()
    }

    /// Scale all enabled gradients so the global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm <= max_norm || norm == 0.0 {
            return;
        }
        let scale = sc::<S>(max_norm / norm);
        for p in self.params.values_mut() {
            if !p.enabled {
                continue;
            }
            for g in p.grad.data_mut() {
                *g = *g * scale;
            }
        }
    }

    /// One Adam update over all enabled entries, then zero every gradient.
    ///
    /// A NaN gradient in any enabled entry aborts the whole step before any
    /// value is touched.
    pub fn adam_step(&mut self, lr_scale: f64) -> Result<()> {
        for (name, p) in self.params.iter() {
            if !p.enabled {
                continue;
            }
            if p.grad.data().iter().any(|g| g.is_nan()) {
                return Err(Error::NanGradient {
                    entry: name.clone(),
                });
            }
        }
        let b1 = sc::<S>(ADAM_BETA1);
        let b2 = sc::<S>(ADAM_BETA2);
        let eps = sc::<S>(ADAM_EPS);
        let one = S::one();
        for p in self.params.values_mut() {
            if !p.enabled {
                p.grad.fill(S::zero());
                continue;
            }
            p.step += 1;
            let t = p.step as i32;
            let bc1 = one - b1.powi(t);
            let bc2 = one - b2.powi(t);
            let lr = sc::<S>(p.lr * lr_scale);
            let value = p.value.data_mut();
            let grad = p.grad.data_mut();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.grad.fill(S::zero());
        }
        Ok(())
    }

    /// Deep copy of values and optimizer state (used for NaN rollback and
    /// finite-difference perturbation).
    pub fn snapshot(&self) -> ParameterStore<S> {
        self.clone()
    }

    pub fn restore(&mut self, snapshot: &ParameterStore<S>) {
        self.params = snapshot.params.clone();
    }

    /// Cast the whole store through f64 (for 64-bit gradient checking).
    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        let mut out = ParameterStore::new();
        for (name, p) in &self.params {
            let mut np = Param::new(p.value.cast::<T>(), p.lr);
            np.enabled = p.enabled;
            np.step = p.step;
            np.m = p.m.cast::<T>();
            np.v = p.v.cast::<T>();
            out.params.insert(name.clone(), np);
        }
        out
    }
}
