//! Named parameter storage, tape binding, and the Adam optimizer.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::synth::normal;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.names.push(String::from(name));
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-normal initialised tensor with the given fan-in.
    pub fn add_he<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let std = libm::sqrt(2.0 / fan_in as f64);
        self.add_normal(name, shape, std, rng)
    }

    pub fn add_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * normal(rng)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Tape handles for the parameters of one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Routes `id` to `v` instead of its recorded leaf.
    pub fn set(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u32,
}

/// Adam with per-parameter step counts; parameters without a gradient in a
/// step are left untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, binding: &Binding, grads: &Gradients, lr: f64) {
        self.step_with(store, binding, grads, |_| lr);
    }

    /// As [`Adam::step`], with a learning rate per parameter.
    pub fn step_with(&mut self, store: &mut ParamStore, binding: &Binding, grads: &Gradients, lr_of: impl Fn(ParamId) -> f64) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(binding.var(id)) else { continue };
            let lr = lr_of(id);
            let p = store.get_mut(id);
            let st = self.state[id.0].get_or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - libm::pow(beta1, st.t as f64);
            let bc2 = 1.0 - libm::pow(beta2, st.t as f64);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                *pi -= lr * (m[i] / bc1) / (libm::sqrt(v[i] / bc2) + eps);
            }
        }
    }
}
