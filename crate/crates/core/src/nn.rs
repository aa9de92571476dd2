//! Named parameter storage and the small layers shared by the attention blocks.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

/// Trainable tensors keyed by dotted name (`enc0.w_off`, `vg`, ...).
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
        self.tensors.get(name).ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), tape.leaf(t.clone()))).collect();
        Bound { vars }
    }
}

/// Tape handles for a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles created elsewhere, e.g. leaves registered in a custom order.
    pub fn from_vars<I: IntoIterator<Item = (String, Var)>>(vars: I) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    /// Gradients for every bound parameter (zeros where none flowed).
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Fan-based uniform init, `U(-b, b)` with `b = gain * sqrt(6 / (fan_in + fan_out))`.
pub fn xavier(rng: &mut RngState, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let b = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.uniform_tensor(&[fan_in, fan_out], -b, b)
}

/// `x·w + b`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Two-layer position-wise feed-forward block with a ReLU between.
#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnParams {
    pub fn init(store: &mut ParamStore, prefix: &str, c: usize, hidden: usize, rng: &mut RngState) {
        store.insert(format!("{prefix}.ffn_w1"), xavier(rng, c, hidden, 1.0));
        store.insert(format!("{prefix}.ffn_b1"), Tensor::zeros(&[hidden]));
        store.insert(format!("{prefix}.ffn_w2"), xavier(rng, hidden, c, 1.0));
        store.insert(format!("{prefix}.ffn_b2"), Tensor::zeros(&[c]));
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: bound.var(&format!("{prefix}.ffn_w1"))?,
            b1: bound.var(&format!("{prefix}.ffn_b1"))?,
            w2: bound.var(&format!("{prefix}.ffn_w2"))?,
            b2: bound.var(&format!("{prefix}.ffn_b2"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = linear(tape, x, self.w1, Some(self.b1))?;
        let h = tape.relu(h);
        linear(tape, h, self.w2, Some(self.b2))
    }
}

/// Row-wise layer norm scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: Var,
    pub beta: Var,
}

pub const NORM_EPS: f64 = 1e-5;

impl NormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, c: usize) {
        store.insert(format!("{prefix}.norm_g"), Tensor::ones(&[c]));
        store.insert(format!("{prefix}.norm_b"), Tensor::zeros(&[c]));
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: bound.var(&format!("{prefix}.norm_g"))?,
            beta: bound.var(&format!("{prefix}.norm_b"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta, NORM_EPS)
    }
}
