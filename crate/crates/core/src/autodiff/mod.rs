//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass in execution order.
//! Each entry keeps its output value, the [`Var`]s it read, and a closure
//! computing the vector-Jacobian product. Because entries are appended as
//! they are created, the record is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Operations on inputs that do not require gradients record no closure, so
//! inference on a tape built from constants costs no extra memory beyond the
//! stored values.
//!
//! ```
//! use physformer::autodiff::Tape;
//! use physformer::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let half = tape.scale(sq, 0.5).unwrap();
//! let loss = tape.sum(half).unwrap();
//! tape.backward(loss).unwrap();
//! // d/dx sum(x²/2) = x
//! assert_eq!(tape.grad(x).unwrap().data(), &[1.0, -2.0, 0.5]);
//! ```

mod basic;
mod conv;
mod loss;
mod norm;
mod shape;

pub use norm::BatchStats;
pub use shape::UpsampleMode;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product: `(input values, output value, output grad)` to
/// one optional gradient per input, in input order.
type BackwardFn<E> =
    Box<dyn Fn(&[&Tensor<E>], &Tensor<E>, &Tensor<E>) -> Vec<Option<Tensor<E>>> + Send + Sync>;

struct Node<E> {
    op: &'static str,
    value: Tensor<E>,
    inputs: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn<E>>,
}

/// Ordered record of operations for one forward pass.
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
    /// Accumulated gradients of leaves; persists across `backward` calls.
    leaf_grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push_node("leaf", value, Vec::new(), true, None)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push_node("constant", value, Vec::new(), false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<E>> {
        self.leaf_grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_node(
        &mut self,
        op: &'static str,
        value: Tensor<E>,
        inputs: Vec<Var>,
        requires_grad: bool,
        backward: Option<BackwardFn<E>>,
    ) -> Var {
        self.nodes.push(Node { op, value, inputs, requires_grad, backward });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Appends an operation result. The closure is kept only when some input
    /// requires a gradient.
    pub(crate) fn record<F>(&mut self, op: &'static str, value: Tensor<E>, inputs: &[Var], backward: F) -> Result<Var>
    where
        F: Fn(&[&Tensor<E>], &Tensor<E>, &Tensor<E>) -> Vec<Option<Tensor<E>>> + Send + Sync + 'static,
    {
        value.check_finite(op)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn<E>> = if requires_grad { Some(Box::new(backward)) } else { None };
        Ok(self.push_node(op, value, inputs.to_vec(), requires_grad, backward))
    }

    /// Populates leaf gradients with `∂loss/∂leaf`, adding to any gradient
    /// already accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {shape:?}")));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Contract("loss does not depend on any differentiable input".into()));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(shape.to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(f) = &node.backward {
                let inputs: Vec<&Tensor<E>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let input_grads = f(&inputs, &node.value, &g);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "op `{}` returned wrong grad count", node.op);
                for (inp, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !self.nodes[inp.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(ig.shape(), self.nodes[inp.0].value.shape(), "op `{}` grad shape", node.op);
                    ig.check_finite(node.op)?;
                    match &mut grads[inp.0] {
                        Some(acc) => acc.add_assign(&ig)?,
                        slot => *slot = Some(ig),
                    }
                }
            } else if node.requires_grad {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones_and_repeated_backward_accumulates() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 4]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(vec![3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_record_no_backward() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::ones(vec![3]));
        let y = tape.scale(c, 2.0).unwrap();
        assert!(!tape.requires_grad(y));
        let s = tape.sum(y).unwrap();
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn shared_input_gradients_add() {
        // y = x*x + x  ->  dy/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(vec![2], &[3.0, -1.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn nan_is_rejected_at_op_boundary() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_f64(vec![1], &[1e30]).unwrap());
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite(_))));
    }
}
