//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is built fresh for each forward pass. Every operation pushes
//! a node holding its output value and enough information to run its
//! backward rule; [`Tape::backward`] then walks the nodes once, in reverse
//! record order, and deposits gradients both in the returned [`Gradients`]
//! and in the bound [`ParamStore`] entries.
//!
//! ```
//! use gatera_core::autodiff::Tape;
//! use gatera_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.hadamard(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.gradients(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0]);
//! ```

mod backward;
pub mod fd;
mod ops;
mod params;

use alloc::vec::Vec;

pub use fd::{finite_difference_grad, relative_error};
pub(crate) use ops::sigmoid;
pub use params::{ParamId, ParamStore, Parameter};

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<ParamId>,
}

/// Ordered record of the operations of one forward pass.
///
/// Single-threaded; a tape and its vars must not be shared across
/// concurrent executions.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, None)
    }

    /// A free input that receives gradients but is bound to no parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, None)
    }

    /// Loads a parameter onto the tape. Its gradient is deposited back into
    /// the store by [`Tape::backward`] when the parameter requires it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = p.requires_grad();
        self.push(p.value().clone(), Op::Leaf, rg, rg.then_some(id))
    }

    /// Copies the value of `v` into a new constant node, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg, None)
    }
}

/// Per-node gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`, zeros when nothing flowed.
    pub fn tensor(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.value(v).shape();
        match self.wrt(v) {
            Some(g) => Tensor::new(shape.to_vec(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}
