//! Reverse-mode differentiation on an append-only tape.
//!
//! A [`Tape`] records one forward computation as a sequence of nodes; parents
//! always precede children, so walking the tape backwards from a scalar root
//! is a valid reverse topological order. Gradient accumulation is additive in
//! a fixed order (reverse node id, then parent-list order), which makes
//! backward passes bit-reproducible across runs.
//!
//! Tapes are cheap and short-lived: training builds a fresh tape per sample,
//! seeds leaves with the current parameter tensors, and reads the accumulated
//! leaf gradients back out after [`Tape::backward`].

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradient rule for one recorded operation: maps the upstream gradient to
/// one gradient per parent, given the parent values and the node's own output.
pub(crate) trait Vjp {
    fn name(&self) -> &'static str;
    fn backward(&self, upstream: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Tensor>;
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) parents: Vec<usize>,
    /// `None` marks a leaf (input or parameter).
    pub(crate) op: Option<Box<dyn Vjp>>,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(id={}, shape={:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Record an input or parameter. Leaves receive gradients in backward.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            parents: Vec::new(),
            op: None,
        })
    }

    pub(crate) fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accumulate gradients for every node reachable from `root`.
    ///
    /// `root` must be scalar-valued (a single element). Every leaf gets a
    /// gradient of its own shape; leaves not reachable from the root get
    /// zeros. Calling backward again returns the same gradients.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::full(root_node.value.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let upstream = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
                let parent_grads = op.backward(&upstream, &inputs, &node.value);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", op.name());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(
                        pg.shape(),
                        nodes[pid].value.shape(),
                        "{} produced a gradient of the wrong shape",
                        op.name()
                    );
                    match &mut grads[pid] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
            if node.op.is_none() {
                // Leaf encountered with a live gradient: keep it.
                grads[id] = Some(upstream);
            }
        }

        // Unreachable leaves get zeros so callers can always read a gradient.
        for (id, node) in nodes.iter().enumerate() {
            if node.op.is_none() && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }

        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar payload of a single-element var.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub(crate) fn same_tape(&self, other: &Var<'t>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }
}

/// Accumulated gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a var. Panics if called for an interior node the backward
    /// pass never reached; leaves always have a gradient.
    pub fn wrt(&self, v: Var<'_>) -> &Tensor {
        self.grads[v.id]
            .as_ref()
            .expect("no gradient for this node; only leaves and reached nodes carry one")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = x.sum();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = x.mul(x).unwrap();
        let s = y.sum();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarRoot(shape)) if shape == vec![2]
        ));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap());
        let s = x.sum();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fanout_accumulates_additively() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        // y = x + x => dy/dx = 2
        let y = x.add(x).unwrap();
        let s = y.sum();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 2.0]);
    }

    #[test]
    fn repeated_backward_is_idempotent() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let s = x.mul(x).unwrap().sum();
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1.wrt(x), g2.wrt(x));
    }
}
