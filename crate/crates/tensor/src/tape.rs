use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Position of a recorded operation on its tape.
pub type NodeId = usize;

/// Backward rule: maps the gradient of an op's output to gradients of its
/// inputs. The mask says which inputs need a gradient; entries for inputs
/// with a `false` mask may be `None`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    op: &'static str,
    inputs: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<T>>,
    shape: Vec<usize>,
}

/// A value flowing through a [`Tape`]. Untracked values (constants, or
/// anything computed on a non-recording tape) carry no node.
#[derive(Clone)]
pub struct Var<T> {
    value: Tensor<T>,
    node: Option<NodeId>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(node={:?}, {:?})", self.node, self.value)
    }
}

/// Records differentiable operations in execution order.
///
/// Nodes are appended as operations run, so node ids are already a
/// topological order and the backward pass is a single reverse sweep. A tape
/// belongs to one execution context; it is intentionally `!Sync`.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
    check_finite: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            check_finite: Cell::new(false),
        }
    }

    /// A tape that never records: every op returns an untracked value and
    /// intermediate buffers are freed as soon as they are dropped.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Debug mode: scan every op output for NaN/Inf and fail on the first hit.
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A gradient-tracked input (parameter or differentiable input).
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        if !self.recording {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            inputs: Vec::new(),
            backward: None,
            shape: value.shape().to_vec(),
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { value, node: None }
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// This is the extension point for ops defined outside this crate; the
    /// built-in ops go through the same path.
    pub fn custom<F>(
        &self,
        op: &'static str,
        inputs: &[&Var<T>],
        value: Tensor<T>,
        backward: F,
    ) -> Result<Var<T>>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        self.record(op, inputs, value, move || Box::new(backward))
    }

    /// Records `value` as the output of `op`. The backward closure is only
    /// built when at least one input is tracked, so untracked paths never
    /// retain saved tensors.
    pub(crate) fn record(
        &self,
        op: &'static str,
        inputs: &[&Var<T>],
        value: Tensor<T>,
        make_backward: impl FnOnce() -> BackwardFn<T>,
    ) -> Result<Var<T>> {
        if self.check_finite.get() && !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        if !self.recording || inputs.iter().all(|v| v.node.is_none()) {
            return Ok(Var { value, node: None });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.node).collect(),
            backward: Some(make_backward()),
            shape: value.shape().to_vec(),
        });
        Ok(Var {
            value,
            node: Some(nodes.len() - 1),
        })
    }

    /// Reverse sweep from a scalar root. Returns gradients for every tracked
    /// leaf recorded before the root; leaves the root does not depend on get
    /// zeros.
    pub fn backward(&self, root: &Var<T>) -> Result<Gradients<T>> {
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root.shape().to_vec()));
        }
        let mut leaf_grads = HashMap::new();
        let Some(root_id) = root.node else {
            return Ok(Gradients { grads: leaf_grads });
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root_id + 1];
        grads[root_id] = Some(Tensor::ones(root.shape()));

        for id in (0..=root_id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                let g = grads[id].take().unwrap_or_else(|| Tensor::zeros(&node.shape));
                leaf_grads.insert(id, g);
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&g, &needs)?;
            if input_grads.len() != node.inputs.len() {
                return Err(TensorError::InvalidArgument {
                    op: node.op,
                    msg: format!(
                        "backward returned {} gradients for {} inputs",
                        input_grads.len(),
                        node.inputs.len()
                    ),
                });
            }
            for (input, grad) in node.inputs.iter().zip(input_grads) {
                let (Some(input), Some(grad)) = (input, grad) else {
                    continue;
                };
                if grad.shape() != nodes[*input].shape.as_slice() {
                    return Err(TensorError::ShapeMismatch {
                        op: node.op,
                        lhs: nodes[*input].shape.clone(),
                        rhs: grad.shape().to_vec(),
                    });
                }
                grads[*input] = Some(match grads[*input].take() {
                    Some(acc) => acc.zip_map(&grad, |a, b| a + b)?,
                    None => grad,
                });
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Scalar> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.grads.get(&id))
    }

    /// Gradient of `var`, or zeros when it is untracked or unreachable.
    pub fn wrt(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
