//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward op appends a node to the [`Tape`]; nodes only ever refer to
//! earlier nodes, so walking the tape backwards is a valid reverse
//! topological order and each node is visited exactly once.

mod attention;
mod gradcheck;
mod ops;
mod store;

use std::collections::HashMap;

pub use attention::SeqLayout;
pub use gradcheck::{grad_check, grad_check_params};
pub use store::{ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Average {
        xs: Vec<Var>,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        tau: T,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        tau: T,
        probs: Vec<T>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Attention {
        qkv: Var,
        layout: SeqLayout,
        heads: usize,
        probs: Vec<T>,
    },
    Gather {
        sources: Vec<Var>,
        picks: Vec<(usize, usize)>,
    },
    Sum {
        x: Var,
    },
    /// Squares its input but reports the gradient of the identity.
    #[cfg(test)]
    FaultySquare {
        x: Var,
    },
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Recorded forward computation plus gradient buffers.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bound: HashMap<ParamId, Var>,
    overrides: HashMap<ParamId, Vec<T>>,
    no_grad: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            overrides: HashMap::new(),
            no_grad: false,
        }
    }

    /// A tape that never tracks gradients; saved intermediates are dropped.
    pub fn inference() -> Self {
        Tape {
            no_grad: true,
            ..Self::new()
        }
    }

    /// Substitutes the values of a stored parameter when it is bound.
    pub fn set_override(&mut self, id: ParamId, values: Vec<T>) {
        self.overrides.insert(id, values);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `(rows, cols)` treating the last axis as columns.
    pub fn dims(&self, v: Var) -> (usize, usize) {
        let shape = &self.nodes[v.0].shape;
        let cols = *shape.last().expect("non-empty shape");
        (self.nodes[v.0].value.len() / cols, cols)
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        let value = &self.nodes[v.0].value;
        if value.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.nodes[v.0].shape
            )));
        }
        Ok(value[0])
    }

    /// Copies a value out as an `f32` tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let data = node.value.iter().map(|x| x.to_f32()).collect();
        Tensor::new(node.shape.clone(), data).expect("tape values have valid shapes")
    }

    /// Records a leaf holding `values`.
    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != values.len() || numel == 0 {
            return Err(Error::dim("leaf", &shape, &[values.len()]));
        }
        self.push(shape, values, requires_grad, Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, tensor: &Tensor) -> Result<Var> {
        let values = tensor.data().iter().map(|&x| T::from_f32(x)).collect();
        self.leaf(tensor.shape().to_vec(), values, false)
    }

    /// Leaf that tracks gradients regardless of the tensor's own flag.
    pub fn variable(&mut self, tensor: &Tensor) -> Result<Var> {
        let values = tensor.data().iter().map(|&x| T::from_f32(x)).collect();
        self.leaf(tensor.shape().to_vec(), values, true)
    }

    /// Binds a stored parameter. Repeated binds of the same id return the
    /// same node, so a tensor shared across code paths is one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let tensor = store.get(id);
        let values = match self.overrides.get(&id) {
            Some(vals) => {
                if vals.len() != tensor.numel() {
                    return Err(Error::dim("override", tensor.shape(), &[vals.len()]));
                }
                vals.clone()
            }
            None => tensor.data().iter().map(|&x| T::from_f32(x)).collect(),
        };
        let v = self.leaf(tensor.shape().to_vec(), values, tensor.requires_grad())?;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&id, &v)| (id, v))
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
        op: Op<T>,
        name: &'static str,
    ) -> Result<Var> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = requires_grad && !self.no_grad;
        // Ops whose output needs no gradient never run backward; keep only
        // the value.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            ops::backward_node(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds gradients of every bound trainable parameter into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.bound {
            let Some(g) = self.grad(v) else { continue };
            if let Some(dst) = store.get_mut(id).grad_mut() {
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d += s.to_f32();
                }
            }
        }
    }
}
