//! Reverse-mode autodiff over an op tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Ops append a
//! record (input ids, output nodes, a boxed [`BackwardRule`]) as they run, so
//! the record list is already topologically ordered; `backward` walks it once
//! in reverse. First-order gradients only — the backward pass itself is not
//! recorded.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::linalg::add_assign;
use crate::tensor::Tensor;

/// Index of a node on a [`Tape`]. Only meaningful for the tape that minted it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How one recorded op maps output gradients back to input gradients.
///
/// Implementations capture whatever forward state they need (operand values,
/// masks, softmax probabilities) by value when the op is recorded.
pub trait BackwardRule: fmt::Debug {
    /// `out_grads[k]` is the accumulated gradient for the op's k-th output
    /// (`None` when nothing downstream touched it). Returns one gradient per
    /// input, aligned with the recorded input list; `None` means "no
    /// gradient flows to this input".
    fn backward(&self, out_grads: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>>;
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

struct Record {
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    rule: Box<dyn BackwardRule>,
}

/// Op tape for a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), records: Vec::new() }
    }

    /// Registers an input node. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, requires_grad, grad: None });
        id
    }

    /// A leaf that never receives gradient (inputs, targets, teacher state).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient buffer of a node after `backward`, if any was accumulated.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the node's value.
    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad.as_ref().map(|g| {
            Tensor::from_vec(node.value.shape().to_vec(), g.clone())
                .expect("grad buffer matches value shape")
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Appends an op: `outputs` become new nodes whose `requires_grad` is the
    /// OR over the inputs', and `rule` is kept for the backward sweep.
    pub fn record(
        &mut self,
        inputs: &[NodeId],
        outputs: Vec<Tensor>,
        rule: Box<dyn BackwardRule>,
    ) -> Vec<NodeId> {
        let needs = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let out_ids: Vec<NodeId> = outputs
            .into_iter()
            .map(|value| {
                let id = NodeId(self.nodes.len());
                self.nodes.push(Node { value, requires_grad: needs, grad: None });
                id
            })
            .collect();
        self.records.push(Record {
            inputs: inputs.to_vec(),
            outputs: out_ids.clone(),
            rule,
        });
        out_ids
    }

    /// `record` for the common single-output case.
    pub fn record1(
        &mut self,
        inputs: &[NodeId],
        output: Tensor,
        rule: Box<dyn BackwardRule>,
    ) -> NodeId {
        self.record(inputs, vec![output], rule)[0]
    }

    /// Accumulates `d loss / d node` into every node reachable from `loss`
    /// that requires gradient. The record list is replayed exactly once, in
    /// reverse; `loss` must be scalar.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::NonScalarLoss { shape: loss_node.value.shape().to_vec() });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for rec in self.records.iter().rev() {
            let any_output_grad = rec.outputs.iter().any(|&o| self.nodes[o.0].grad.is_some());
            let any_input_needs = rec.inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
            if !any_output_grad || !any_input_needs {
                continue;
            }
            // Owned copies keep the borrow of `self.nodes` short.
            let out_grads_owned: Vec<Option<Vec<f32>>> = rec
                .outputs
                .iter()
                .map(|&o| self.nodes[o.0].grad.clone())
                .collect();
            let out_grads: Vec<Option<&[f32]>> =
                out_grads_owned.iter().map(|g| g.as_deref()).collect();
            let in_grads = rec.rule.backward(&out_grads);
            debug_assert_eq!(in_grads.len(), rec.inputs.len());
            for (&input, grad) in rec.inputs.iter().zip(in_grads) {
                let Some(grad) = grad else { continue };
                let node = &mut self.nodes[input.0];
                if !node.requires_grad {
                    continue;
                }
                debug_assert_eq!(grad.len(), node.value.numel());
                match &mut node.grad {
                    Some(acc) => add_assign(acc, &grad),
                    None => node.grad = Some(grad),
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("records", &self.records.len())
            .finish()
    }
}
