//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its value and the indices of its
//! inputs. [`Tape::backward`] walks the tape once in reverse and accumulates
//! vector-Jacobian products into each input. Tensors whose last axis is the
//! feature axis are treated as `[rows, cols]` matrices by the row-wise ops.
//!
//! ```
//! use egospk::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.mul(x, x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod check;
mod ops;

pub use check::{grad_check, probe_sum, sample_point, DiffFn};


use crate::error::AutodiffError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    XLogX(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, gamma: Var, beta: Var, eps: T },
    NormalizeRows { x: Var, eps: T },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanRows(Var),
    SegmentMean { x: Var, offsets: Vec<usize> },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    GatherPerRow { x: Var, idx: Vec<usize> },
    MaskRows { x: Var, emb: Var, mask: Vec<bool> },
    Conv1d { x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize, offsets: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, offsets: Vec<usize>, probs: Vec<T> },
    StraightThrough(Var),
    WeightedSum { xs: Vec<Var>, w: Var },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Records a computation for one forward/backward pass.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, AutodiffError> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(AutodiffError::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.backprop_node(i, &g, &mut grads);
                grads[i] = Some(g);
            }
        }
        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shape matches value")
                })
            })
            .collect();
        Ok(Gradients { grads: tensors })
    }
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not require a gradient or is not reachable.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Gradient of `output` with respect to each of `params`; unreachable
/// parameters receive zeros of the matching shape.
pub fn forward_backward<T: Scalar>(
    tape: &Tape<T>,
    output: Var,
    params: &[Var],
) -> Result<Vec<Tensor<T>>, AutodiffError> {
    let mut grads = tape.backward(output)?;
    Ok(params
        .iter()
        .map(|&p| grads.take(p).unwrap_or_else(|| Tensor::zeros(tape.shape(p))))
        .collect())
}
