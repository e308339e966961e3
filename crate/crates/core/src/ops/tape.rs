//! Reverse-mode tape over feature matrices.
//!
//! Each recorded node keeps its output value and a backward closure that maps
//! the upstream gradient (same shape as the output) to one gradient per input.
//! [`Tape::backward`] walks the nodes in reverse insertion order, which is a
//! valid topological order because inputs always precede their consumers.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type BackwardFn = Box<dyn Fn(&Matrix) -> Vec<Matrix>>;

struct Node {
    inputs: Vec<Var>,
    backward: BackwardFn,
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Rc<Matrix>>,
    nodes: Vec<Option<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.values.push(Rc::new(value));
        self.nodes.push(None);
        Var(self.values.len() - 1)
    }

    pub fn push(&mut self, value: Matrix, inputs: Vec<Var>, backward: BackwardFn) -> Var {
        self.values.push(Rc::new(value));
        self.nodes.push(Some(Node { inputs, backward }));
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    /// Shared handle to a value, for capture in backward closures.
    pub fn shared(&self, v: Var) -> Rc<Matrix> {
        Rc::clone(&self.values[v.0])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Propagate `seed` (shaped like `root`) back through the tape.
    pub fn backward(&self, root: Var, seed: Matrix) -> Result<Gradients> {
        if seed.shape() != self.values[root.0].shape() {
            return Err(Error::Shape(format!(
                "seed {:?} does not match root {:?}",
                seed.shape(),
                self.values[root.0].shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let Some(node) = &self.nodes[id] else { continue };
            let Some(g) = grads[id].take() else { continue };
            let input_grads = (node.backward)(&g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                debug_assert_eq!(ig.shape(), self.values[inp.0].shape());
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
            // keep the gradient of interior nodes for inspection
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
    }
}
