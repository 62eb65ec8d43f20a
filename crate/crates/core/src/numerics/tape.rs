use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product of one recorded operation.
///
/// Receives the operation's input values, its output value and the gradient
/// flowing into the output; returns one gradient per input (`None` for inputs
/// that receive nothing).
pub trait Backward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

impl<F> Backward for F
where
    F: Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>>,
{
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        self(inputs, output, grad)
    }
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<Box<dyn Backward>>,
    live: bool,
}

/// Ordered record of operations. Parents always precede children, so reverse
/// insertion order is a reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let live = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            backward: None,
            live,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_live(&self, v: Var) -> bool {
        self.nodes[v.0].live
    }

    /// Gradient of the last `backward` loss with respect to `v`. `None` if
    /// `v` is not on a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn record(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: &[Var],
        backward: impl Backward + 'static,
    ) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let live = parents.iter().any(|p| self.nodes[p.0].live);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if live { Some(Box::new(backward)) } else { None },
            live,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Forward value identical to `v`; no gradient flows back through it.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let mut t = self.nodes[v.0].value.clone();
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Reverse pass from a scalar loss. Each node is visited once, in reverse
    /// insertion order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(bw) = &node.backward {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let parent_grads = bw.backward(&inputs, &node.value, &g);
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[p].live {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        // Keep gradients only where they mean something to the caller.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].live {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }
}
