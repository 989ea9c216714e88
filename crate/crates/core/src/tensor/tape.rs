use super::{Scalar, Tensor};
use std::collections::HashSet;

/// The recorded operations reachable from a loss tensor, in topological
/// order: every operation's inputs precede it. Built at backward time from
/// the operation graph the forward pass recorded.
pub struct Tape<E: Scalar> {
    ordered: Vec<Tensor<E>>,
}

impl<E: Scalar> Tape<E> {
    /// Collect every gradient-carrying tensor reachable from `root`,
    /// parents before children.
    pub fn trace(root: &Tensor<E>) -> Self {
        let mut ordered = Vec::new();
        let mut visited = HashSet::new();
        // Iterative DFS with an explicit stack; recursion depth would scale
        // with network depth times ops per block.
        enum Frame<'a, E: Scalar> {
            Enter(&'a Tensor<E>),
            Exit(&'a Tensor<E>),
        }
        let mut stack = vec![Frame::Enter(root)];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    if !visited.insert(t.id()) {
                        continue;
                    }
                    stack.push(Frame::Exit(t));
                    if let Some(node) = t.node() {
                        for p in &node.parents {
                            if p.needs_grad() {
                                stack.push(Frame::Enter(p));
                            }
                        }
                    }
                }
                Frame::Exit(t) => ordered.push(t.clone()),
            }
        }
        Tape { ordered }
    }

    pub fn len(&self) -> usize {
        self.ordered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered.is_empty()
    }

    /// Tensors in topological order (inputs first).
    pub fn nodes(&self) -> &[Tensor<E>] {
        &self.ordered
    }

    /// Run the backward sweep: seed the root cotangent with ones, then visit
    /// each recorded operation exactly once in reverse topological order,
    /// letting its closure push gradient to its parents. Interior gradients
    /// are scratch state reset here; leaf gradients accumulate across calls.
    pub(crate) fn run_backward(&self, root: &Tensor<E>) {
        for t in &self.ordered {
            if !t.does_require_grad() {
                t.reset_grad_zeros();
            }
        }
        root.accumulate_grad(&vec![E::one(); root.numel()]);
        for t in self.ordered.iter().rev() {
            if let Some(node) = t.node() {
                let grad = t
                    .grad_ref()
                    .clone()
                    .expect("tape node missing cotangent during backward");
                (node.backward)(&grad);
            }
        }
        // Interior cotangents are not part of the public gradient state.
        for t in &self.ordered {
            if !t.does_require_grad() {
                t.zero_grad();
            }
        }
    }
}
