//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar result walks the recorded nodes in reverse and
//! returns the gradient of every leaf that was created with `requires_grad`.
//! A tape is single-use: one forward pass, one backward.

pub mod kernels;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use ops::concat_channels;

use kernels::ConvGeom;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    /// Tensor times a one-element tensor.
    MulScalar(usize, usize),
    Sigmoid(usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GlobalAvgPool(usize),
    Mean(usize),
    Sum(usize),
    Concat(Vec<usize>),
    /// Slice `[start, start+len)` along axis 0.
    Narrow {
        x: usize,
        start: usize,
    },
    PixelUnshuffle {
        x: usize,
        r: usize,
    },
    PixelShuffle {
        x: usize,
        r: usize,
    },
    ScaleChannels {
        x: usize,
        s: usize,
    },
    L2NormalizeRows {
        x: usize,
        norms: Vec<T>,
    },
    Charbonnier {
        pred: usize,
        target: usize,
        eps: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Exp(_) => "exp",
            Op::Conv2d { .. } => "conv2d",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose2d",
            Op::Reshape(_) => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Concat(_) => "concat_channels",
            Op::Narrow { .. } => "narrow",
            Op::PixelUnshuffle { .. } => "pixel_unshuffle",
            Op::PixelShuffle { .. } => "pixel_shuffle",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::Charbonnier { .. } => "charbonnier",
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    finite: bool,
}

/// Append-only record of a forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    names: RefCell<IndexMap<String, usize>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            names: RefCell::new(IndexMap::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    /// An anonymous leaf that receives a gradient.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// A named trainable leaf. Names must be unique on a tape.
    pub fn param(&self, name: &str, value: Tensor<T>) -> Result<Var<'_, T>> {
        if self.names.borrow().contains_key(name) {
            return Err(Error::invalid(format!("parameter `{name}` already bound on this tape")));
        }
        let var = self.push_leaf(value, true);
        self.names.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let finite = value.is_finite();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
            finite,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var<'_, T>> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        let inputs_finite = inputs.iter().all(|&i| nodes[i].finite);
        let finite = if cfg!(debug_assertions) || !inputs_finite {
            value.is_finite()
        } else {
            true
        };
        if cfg!(debug_assertions) && inputs_finite && !finite {
            return Err(Error::Numeric(format!(
                "{} produced non-finite values from finite inputs",
                op.name()
            )));
        }
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            finite,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Back-propagates from a one-element `loss`, consuming the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(self, loss.tape) {
            return Err(Error::invalid("loss was not recorded on this tape"));
        }
        if self.consumed.get() {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves = HashMap::new();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let shape = node.value.shape();
                leaves.insert(id, Tensor::new(shape, g)?);
                continue;
            }
            for (input, contrib) in ops::backward_rule(&nodes_view(&nodes), node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a = *a + c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        // Trainable leaves the loss does not depend on get explicit zeros.
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                leaves.entry(id).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            by_id: leaves,
            names: self.names.borrow().clone(),
        })
    }
}

/// Read-only access to node values for the backward rules.
struct NodesView<'a, T> {
    nodes: &'a [Node<T>],
}

impl<T> NodesView<'_, T> {
    fn val(&self, id: usize) -> &Tensor<T> {
        &self.nodes[id].value
    }
    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }
}

fn nodes_view<T>(nodes: &[Node<T>]) -> NodesView<'_, T> {
    NodesView { nodes }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    by_id: HashMap<usize, Tensor<T>>,
    names: IndexMap<String, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_id.get(&var.id)
    }

    pub fn named(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|id| self.by_id.get(id))
    }

    /// Named gradients in binding order.
    pub fn into_named(mut self) -> IndexMap<String, Tensor<T>> {
        self.names
            .iter()
            .filter_map(|(name, id)| self.by_id.remove(id).map(|g| (name.clone(), g)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::invalid("operands live on different tapes"))
        }
    }
}
