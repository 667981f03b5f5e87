use std::sync::Arc;

use super::{backward_primitive, forward_primitive, Element, OpKind, Tensor};
use crate::error::{Error, Result};

/// Something that can evaluate primitives: either eagerly or while recording.
///
/// Model code is written once against this trait so that inference and
/// training share a single definition of the forward pass.
pub trait Exec<E: Element> {
    type Var: Clone;

    fn constant(&mut self, value: Tensor<E>) -> Self::Var;
    fn apply(&mut self, op: OpKind, inputs: &[&Self::Var]) -> Result<Self::Var>;
    fn value<'a>(&'a self, var: &'a Self::Var) -> &'a Tensor<E>;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    fn broadcast(&mut self, a: &Self::Var, shape: &[usize]) -> Result<Self::Var> {
        self.apply(OpKind::Broadcast(shape.to_vec()), &[a])
    }
    fn silu(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(OpKind::Silu, &[a])
    }
    fn mean(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(OpKind::Mean, &[a])
    }
    fn sum(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(OpKind::Sum, &[a])
    }
    fn squared_error(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(OpKind::SquaredError, &[a, b])
    }
    fn concat(&mut self, parts: &[&Self::Var], axis: usize) -> Result<Self::Var> {
        self.apply(OpKind::Concat(axis), parts)
    }
    fn timestep_embedding(&mut self, t: &Self::Var, dim: usize, scale: f64) -> Result<Self::Var> {
        self.apply(OpKind::TimestepEmbedding { dim, scale }, &[t])
    }
}

/// Evaluates primitives immediately without keeping any history.
#[derive(Default)]
pub struct Eager;

impl<E: Element> Exec<E> for Eager {
    type Var = Arc<Tensor<E>>;

    fn constant(&mut self, value: Tensor<E>) -> Self::Var {
        Arc::new(value)
    }

    fn apply(&mut self, op: OpKind, inputs: &[&Self::Var]) -> Result<Self::Var> {
        let refs: Vec<&Tensor<E>> = inputs.iter().map(|v| v.as_ref()).collect();
        forward_primitive(&op, &refs).map(Arc::new)
    }

    fn value<'a>(&'a self, var: &'a Self::Var) -> &'a Tensor<E> {
        var
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

struct Node<E: Element> {
    value: Tensor<E>,
    op: Option<OpKind>,
    inputs: Vec<usize>,
    is_param: bool,
    needs_grad: bool,
}

/// A computation record: nodes are appended in evaluation order, so the node
/// list is always a valid topological order.
pub struct Graph<E: Element = f32> {
    nodes: Vec<Node<E>>,
    differentiated: bool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            differentiated: false,
        }
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, None, Vec::new(), true)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.differentiated = false;
    }

    fn push(&mut self, value: Tensor<E>, op: Option<OpKind>, inputs: Vec<usize>, is_param: bool) -> NodeId {
        let needs_grad = is_param || inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            is_param,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Contract(format!("node {} is not part of this record", id.0)))
        }
    }

    /// Reverse-mode pass from a scalar loss. A record can be differentiated
    /// once; call [`Graph::reset`] before reuse.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<E>> {
        self.check(loss)?;
        if self.differentiated {
            return Err(Error::Contract(
                "record was already differentiated; reset it before another backward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.differentiated = true;

        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), E::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].as_ref() else { continue };
            let inputs: Vec<&Tensor<E>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let input_grads = backward_primitive(op, &inputs, g)?;
            for (&j, gj) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[j].needs_grad {
                    continue;
                }
                grads[j] = Some(match grads[j].take() {
                    Some(acc) => acc.zip_map(&gj, "accumulate", |a, b| a + b)?,
                    None => gj,
                });
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

impl<E: Element> Exec<E> for Graph<E> {
    type Var = NodeId;

    fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, None, Vec::new(), false)
    }

    fn apply(&mut self, op: OpKind, inputs: &[&NodeId]) -> Result<NodeId> {
        for &&id in inputs {
            self.check(id)?;
        }
        let refs: Vec<&Tensor<E>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let out = forward_primitive(&op, &refs)?;
        let idx = inputs.iter().map(|id| id.0).collect();
        Ok(self.push(out, Some(op), idx, false))
    }

    fn value<'a>(&'a self, var: &'a NodeId) -> &'a Tensor<E> {
        &self.nodes[var.0].value
    }
}

/// Result of a backward pass.
pub struct Gradients<E: Element = f32> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of a node; every parameter has one (zeros when unreachable).
    pub fn get(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<E>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::new(vec![3], vec![1., 2., 3.]).unwrap());
        let loss = g.sum(&x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_x() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::new(vec![1], vec![2.]).unwrap());
        let zero = g.constant(Tensor::zeros(&[1]));
        let loss = g.squared_error(&x, &zero).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.]);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::full(&[2], 1.0));
        let y = g.param(Tensor::full(&[2, 2], 1.0));
        let loss = g.sum(&x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(y).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::full(&[2], 1.0));
        let y = g.silu(&x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_without_reset_fails() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::full(&[2], 1.0));
        let loss = g.sum(&x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Contract(_))));
        g.reset();
        let x = g.param(Tensor::full(&[2], 1.0));
        let loss = g.sum(&x).unwrap();
        assert!(g.backward(loss).is_ok());
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(x * x) -> 2x
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2], vec![1.5, -3.0]).unwrap());
        let sq = g.mul(&x, &x).unwrap();
        let loss = g.sum(&sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -6.0]);
    }
}
