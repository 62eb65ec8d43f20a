//! Parameter storage and the small layers everything else is built from.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Tape, Tensor, Unary, Var};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        debug_assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces values by name. Every name in `entries` must exist with the
    /// same shape; missing names are an error.
    pub fn load(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in entries {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Config(alloc::format!("unknown parameter {name}")))?;
            let slot = &mut self.tensors[id.0];
            if slot.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "ParamStore::load",
                    left: slot.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            *slot = Tensor::new(t.shape(), t.data().to_vec())?;
        }
        Ok(())
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Params {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let t = t.clone();
                if trainable {
                    tape.leaf(t.with_grad())
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Params { vars }
    }
}

/// Parameters bound to one tape.
#[derive(Debug, Clone)]
pub struct Params {
    vars: Vec<Var>,
}

impl Params {
    /// Wraps vars recorded in store order, e.g. leaves substituted for a
    /// gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    fn unary(self) -> Unary {
        match self {
            Activation::Relu => Unary::Relu,
            Activation::Gelu => Unary::Gelu,
        }
    }
}

/// `x W + b` with `W: [in, out]`, uniform init in `+-1/sqrt(in)`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt(d_in.max(1) as f64);
        let w: Vec<f64> = (0..d_in * d_out).map(|_| rng.range(-bound, bound)).collect();
        let w = store.add(&alloc::format!("{name}.w"), Tensor::new(&[d_in, d_out], w).expect("shape"));
        let b = bias.then(|| {
            let b: Vec<f64> = (0..d_out).map(|_| rng.range(-bound, bound)).collect();
            store.add(&alloc::format!("{name}.b"), Tensor::vector(b))
        });
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Params, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Layer norm over the last axis followed by a learned affine.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(&alloc::format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(&alloc::format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Params, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let s = tape.mul(n, p.var(self.gamma))?;
        tape.add(s, p.var(self.beta))
    }
}

/// `linear -> activation -> linear`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
    pub act: Activation,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        act: Activation,
        rng: &mut Rng,
    ) -> Self {
        Self {
            first: Linear::new(store, &alloc::format!("{name}.0"), dims.0, dims.1, true, rng),
            second: Linear::new(store, &alloc::format!("{name}.1"), dims.1, dims.2, true, rng),
            act,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Params, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, p, x)?;
        let h = tape.unary(h, self.act.unary())?;
        self.second.forward(tape, p, h)
    }
}
