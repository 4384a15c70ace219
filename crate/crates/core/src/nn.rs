//! Named parameters, initialisation and the Adam optimiser.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Gradients, Graph, Unary, Var};
use crate::error::{bail, Error, Result};
use crate::rng::{fnv1a, Rng};
use crate::tensor::Tensor;

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Elu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        let f = match self {
            Activation::Relu => Unary::Relu,
            Activation::LeakyRelu(a) => Unary::LeakyRelu(a),
            Activation::Elu => Unary::Elu,
            Activation::Tanh => Unary::Tanh,
        };
        g.unary(x, f)
    }

    pub fn name(self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu(a) => alloc::format!("leaky_relu:{a}"),
            Activation::Elu => "elu".into(),
            Activation::Tanh => "tanh".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "relu" => Activation::Relu,
            "elu" => Activation::Elu,
            "tanh" => Activation::Tanh,
            _ => match s.strip_prefix("leaky_relu:").and_then(|a| a.parse().ok()) {
                Some(a) => Activation::LeakyRelu(a),
                None => bail!(Config, "unknown activation `{}`", s),
            },
        })
    }
}

/// Named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Hash over names, shapes and exact bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0u64;
        for (name, t) in &self.tensors {
            h = fnv1a(name.bytes(), h);
            h = fnv1a(t.shape().iter().flat_map(|d| (*d as u64).to_le_bytes()), h);
            h = fnv1a(t.data().iter().flat_map(|v| v.to_bits().to_le_bytes()), h);
        }
        h
    }

    /// Puts every parameter on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.variable(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Binding { vars }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            bail!(Shape, "parameter count {} vs {}", self.tensors.len(), other.tensors.len());
        }
        for (name, t) in &self.tensors {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                bail!(Shape, "parameter `{}`: {:?} vs {:?}", name, t.shape(), o.shape());
            }
        }
        Ok(())
    }
}

/// Graph handles for the parameters of a [`ParamStore`].
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Collects the gradient of every bound parameter (zero where none flowed).
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let t = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (k.clone(), t)
            })
            .collect()
    }
}

/// Adds up per-parameter gradients.
pub fn accumulate_grads(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (k, t) in grads {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&t),
            None => {
                acc.insert(k, t);
            }
        }
    }
}

pub(crate) fn uniform_tensor(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Glorot-uniform weights for a layer with the given fan-in and fan-out.
pub(crate) fn glorot(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    uniform_tensor(rng, shape, bound)
}

pub(crate) fn init_conv(store: &mut ParamStore, rng: &mut Rng, name: &str, out: usize, inp: usize, kh: usize, kw: usize) {
    let rf = kh * kw;
    store.insert(alloc::format!("{name}.weight"), glorot(rng, &[out, inp, kh, kw], inp * rf, out * rf));
    store.insert(alloc::format!("{name}.bias"), Tensor::zeros(&[out]));
}

pub(crate) fn init_linear(store: &mut ParamStore, rng: &mut Rng, name: &str, out: usize, inp: usize) {
    store.insert(alloc::format!("{name}.weight"), glorot(rng, &[out, inp], inp, out));
    store.insert(alloc::format!("{name}.bias"), Tensor::zeros(&[out]));
}

/// LSTM weights; the forget-gate bias starts at one.
pub(crate) fn init_lstm(store: &mut ParamStore, rng: &mut Rng, name: &str, hidden: usize, inp: usize) {
    let bound = 1.0 / libm::sqrt(hidden as f64);
    store.insert(alloc::format!("{name}.w_ih"), uniform_tensor(rng, &[4 * hidden, inp], bound.min(libm::sqrt(3.0 / inp as f64))));
    store.insert(alloc::format!("{name}.w_hh"), uniform_tensor(rng, &[4 * hidden, hidden], bound));
    let mut b = Tensor::zeros(&[4 * hidden]);
    b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
    store.insert(alloc::format!("{name}.bias"), b);
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub decay: f64,
    /// Global L2-norm clip on the gradient; zero disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay: 1.0, clip_norm: 5.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    lr: f64,
    steps: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { lr: config.learning_rate, config, steps: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.config.decay;
    }

    /// One update of `params` with `grads` (missing entries count as zero).
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut norm2 = 0.0;
        for (name, g) in grads {
            if !g.all_finite() {
                bail!(Divergence, "non-finite gradient for `{}`", name);
            }
            norm2 += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        let norm = libm::sqrt(norm2);
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm { self.config.clip_norm / norm } else { 1.0 };
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.steps as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.steps as f64);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.into()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.into()).or_insert_with(|| Tensor::zeros(p.shape()));
            let (pd, gd) = (p.data_mut(), g.data());
            for i in 0..pd.len() {
                let gi = gd[i] * clip;
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] -= self.lr * (mi / bc1) / (libm::sqrt(vi / bc2) + c.eps);
            }
        }
        Ok(())
    }
}
