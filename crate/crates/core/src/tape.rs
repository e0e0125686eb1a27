//! Reverse-mode autodiff tape.
//!
//! Every forward operation appends one node holding its output value, the
//! parent handles, and a backward closure over whatever it saved. Node ids
//! are a topological order by construction, so the backward sweep is a
//! single reverse pass that visits each node exactly once and accumulates
//! parent gradients in a fixed order; repeated sweeps over an unchanged tape
//! are deterministic.

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// What produced a node; drives the guided rule and attribution dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv3d,
    ConvTranspose3d,
    BatchNormTrain,
    BatchNormEval,
    PRelu,
    Relu,
    Sigmoid,
    DropoutTrain,
    Add,
    Sub,
    Mul,
    Div,
    AffineScalar,
    Concat,
    Reduce,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv3d => "conv3d",
            OpKind::ConvTranspose3d => "conv_transpose3d",
            OpKind::BatchNormTrain => "batch_norm(training)",
            OpKind::BatchNormEval => "batch_norm(eval)",
            OpKind::PRelu => "prelu",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::DropoutTrain => "dropout(training)",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::AffineScalar => "affine_scalar",
            OpKind::Concat => "concat",
            OpKind::Reduce => "reduce",
        }
    }

    /// Ops whose output is a linear (affine) function of every
    /// gradient-carrying parent; their backward doubles as an exact
    /// multiplier rule for attribution.
    pub fn is_linear(self) -> bool {
        matches!(
            self,
            OpKind::Conv3d
                | OpKind::ConvTranspose3d
                | OpKind::BatchNormEval
                | OpKind::Add
                | OpKind::Sub
                | OpKind::AffineScalar
                | OpKind::Concat
                | OpKind::Reduce
        )
    }
}

/// Backward-sweep options.
#[derive(Debug, Clone, Copy, Default)]
pub struct SweepCtx {
    /// Guided backpropagation: at ReLU/PReLU nodes the backward signal is
    /// zeroed where the forward pre-activation is <= 0 or the incoming
    /// signal is negative, and the PReLU negative-slope branch is dropped.
    pub guided: bool,
}

pub(crate) trait BackwardFn<T: Scalar>: Send + Sync {
    /// Gradient for each parent, aligned with the node's parent list.
    /// Entries for parents with `needs[i] == false` may be `None`.
    fn backward(&self, grad: &Tensor<T>, ctx: &SweepCtx, needs: &[bool]) -> Vec<Option<Tensor<T>>>;
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<Var>,
    pub(crate) op: OpKind,
    pub(crate) backward: Option<Box<dyn BackwardFn<T>>>,
}

/// Gradients produced by one backward sweep, indexed by `Var`. Interior
/// nodes are retained alongside leaves so attribution methods can read
/// layer-activation gradients.
pub struct Gradients<T: Scalar> {
    pub(crate) grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when no path reached it.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape<T>) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.shape(v).to_vec()),
        }
    }
}

/// Single-writer op recorder; one forward/backward pass owns one tape.
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
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Only leaves may require gradients directly;
    /// interior nodes inherit the flag from their parents.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            op: OpKind::Leaf,
            backward: None,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    pub(crate) fn push(&mut self, node: Node<T>) -> Var {
        debug_assert!(
            node.op == OpKind::Leaf || node.value.all_finite(),
            "{} produced a non-finite value",
            node.op.name()
        );
        let id = self.nodes.len();
        self.nodes.push(node);
        Var(id)
    }

    pub(crate) fn record(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        op: OpKind,
        backward: Box<dyn BackwardFn<T>>,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Node {
            value,
            requires_grad,
            parents,
            op,
            backward: if requires_grad { Some(backward) } else { None },
        })
    }

    /// Backward from a scalar root with an implicit seed of one.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, TensorError> {
        self.check_root(root)?;
        let shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::SeedRequired { shape });
        }
        let seed = Tensor::full(shape, T::one());
        self.sweep(root, &seed, SweepCtx::default())
    }

    /// Backward from any root with an explicit cotangent seed of its shape.
    pub fn backward_seeded(&self, root: Var, seed: &Tensor<T>) -> Result<Gradients<T>, TensorError> {
        self.check_root(root)?;
        self.check_seed(root, seed)?;
        self.sweep(root, seed, SweepCtx::default())
    }

    /// Backward applying the guided rule at every ReLU/PReLU node.
    pub fn backward_guided(
        &self,
        root: Var,
        seed: &Tensor<T>,
    ) -> Result<Gradients<T>, TensorError> {
        self.check_root(root)?;
        self.check_seed(root, seed)?;
        self.sweep(root, seed, SweepCtx { guided: true })
    }

    fn check_root(&self, root: Var) -> Result<(), TensorError> {
        if root.0 >= self.nodes.len() {
            return Err(TensorError::RootNotOnTape {
                root: root.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    fn check_seed(&self, root: Var, seed: &Tensor<T>) -> Result<(), TensorError> {
        if seed.shape() != self.nodes[root.0].value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "backward seed",
                lhs: seed.shape().to_vec(),
                rhs: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn sweep(&self, root: Var, seed: &Tensor<T>, ctx: SweepCtx) -> Result<Gradients<T>, TensorError> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(seed.clone());
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].clone() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward.backward(&g, &ctx, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[parent.0], pg);
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, add: Tensor<T>) {
    match slot {
        None => *slot = Some(add),
        Some(existing) => {
            debug_assert_eq!(existing.shape(), add.shape());
            let data = existing
                .data()
                .iter()
                .zip(add.data())
                .map(|(&a, &b)| a + b)
                .collect();
            *slot = Some(
                Tensor::from_vec(existing.shape().to_vec(), data).expect("accumulate preserves shape"),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_root_must_be_on_tape() {
        let tape: Tape<f64> = Tape::new();
        assert!(matches!(
            tape.backward(Var(3)),
            Err(TensorError::RootNotOnTape { root: 3, len: 0 })
        ));
    }

    #[test]
    fn nonscalar_root_needs_seed() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![4]), true);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::SeedRequired { .. })
        ));
        let seed = Tensor::ones(vec![4]);
        assert!(tape.backward_seeded(x, &seed).is_ok());
    }

    #[test]
    fn no_grad_root_yields_empty_map() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![2]), false);
        let g = tape.backward_seeded(x, &Tensor::ones(vec![2])).unwrap();
        assert!(g.get(x).is_none());
    }
}
