//! The recording tape and differentiable variables.
//!
//! A [`Graph`] records every operation whose inputs require gradients. Each
//! recorded node keeps a backward closure that maps the gradient of its
//! output to gradients of its inputs. Node ids grow monotonically, so a
//! reverse sweep over ids is a valid topological order.
//!
//! Values live in reference-counted tensors owned by the [`Var`]s and by the
//! closures that need them; a graph created with [`Graph::no_grad`] records
//! nothing and intermediates are freed as soon as their `Var`s drop.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// A reverse-mode tape. Not `Sync`; use one graph per thread.
pub struct Graph {
    recording: bool,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records operations for backpropagation.
    pub fn new() -> Self {
        Self {
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A graph that never records; every variable is a constant.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient (when recording).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.leaf_rc(Rc::new(value))
    }

    pub fn leaf_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        let node = if self.recording {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                backward: None,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            graph: self,
            node,
            value,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        Var {
            graph: self,
            node: None,
            value,
        }
    }

    /// Records an operation. `backward` receives the output gradient and a
    /// mask telling which inputs need a gradient; it returns one entry per
    /// input (entries for unneeded inputs may be `None`).
    pub(crate) fn record<'g, F>(&'g self, inputs: &[&Var<'g>], value: Tensor, backward: F) -> Var<'g>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        let node = if self.recording && parents.iter().any(Option::is_some) {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents,
                backward: Some(Box::new(backward)),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            graph: self,
            node,
            value: Rc::new(value),
        }
    }

    /// Backpropagates from a one-element root, seeding its gradient with 1.
    pub fn backward(&self, root: &Var<'_>) -> Gradients {
        assert_eq!(
            root.value.numel(),
            1,
            "backward() needs a scalar root; use backward_with for {:?}",
            root.value.shape()
        );
        let seed = Tensor::ones(root.value.shape());
        self.backward_with(root, seed)
    }

    /// Backpropagates an explicit output gradient.
    pub fn backward_with(&self, root: &Var<'_>, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), root.value.shape(), "seed shape mismatch");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root_id) = root.node else {
            return Gradients { grads };
        };
        grads[root_id] = Some(seed);
        for id in (0..=root_id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(pid), Some(pg)) = (parent, pg) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Leaf gradients produced by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if it reached it.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.node.and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros when no gradient arrived.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }

    pub fn take(&mut self, var: &Var<'_>) -> Option<Tensor> {
        var.node.and_then(|id| self.grads.get_mut(id)?.take())
    }
}

/// A tensor value bound to a graph.
#[derive(Clone)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) node: Option<usize>,
    pub(crate) value: Rc<Tensor>,
}

impl<'g> Var<'g> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// The same value cut off from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant_rc(Rc::clone(&self.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_grad_graph_records_nothing() {
        let g = Graph::no_grad();
        let a = g.leaf(Tensor::scalar(2.0));
        let b = a.mul(&a);
        assert!(!b.requires_grad());
        assert!(g.is_empty());
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let g = Graph::new();
        let a = g.leaf(Tensor::scalar(3.0));
        let y = a.mul(&a).add(&a);
        let grads = g.backward(&y);
        assert_eq!(grads.get(&a).unwrap().item(), 7.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::new();
        let a = g.leaf(Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = a.mul(&c);
        let grads = g.backward(&y);
        assert_eq!(grads.get(&a).unwrap().item(), 5.0);
        assert!(grads.get(&c).is_none());
    }
}
