//! Reverse-mode autodiff over a per-forward tape. Nodes are appended in
//! topological order; `backward` walks them once in reverse with a fixed
//! accumulation order, so gradients are bit-identical across runs.

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Receives per-parent gradient contributions during the reverse sweep.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Tensor>],
}

impl<'a> GradSink<'a> {
    pub fn add(&mut self, parent: Var, delta: Tensor) {
        match &mut self.grads[parent.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// One forward computation. Build, call `backward` once, then drop.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    param_vars: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf variable; gradients are computed for it iff `needs_grad`.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, needs_grad, None)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a named parameter. Trainable parameters get gradients;
    /// frozen ones participate in the forward but receive none.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let p = store.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        let v = self.leaf(p.tensor.clone(), p.trainable);
        self.param_vars.push((name.to_string(), v));
        v
    }

    pub(crate) fn push(&mut self, value: Tensor, needs_grad: bool, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node { value, needs_grad, backward });
        Var(self.nodes.len() - 1)
    }

    /// Node with a caller-supplied gradient rule. The closure must route its
    /// contributions to `parents` (checking which of them need gradients).
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Tensor,
        back: impl Fn(&Tensor, &mut GradSink) + 'static,
    ) -> Var {
        let needs = parents.iter().any(|&p| self.needs_grad(p));
        let bf = needs.then(|| Box::new(back) as BackwardFn);
        self.push(value, needs, bf)
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients (None for
    /// nodes the loss does not reach or that do not require gradients).
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(lt.shape().to_vec(), vec![1.0]));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &self.nodes[id].backward {
                // parents always precede the node on the tape
                let (before, _) = grads.split_at_mut(id);
                let mut sink = GradSink { grads: before };
                back(&g, &mut sink);
            }
            // leaves keep their gradient
            if self.nodes[id].backward.is_none() {
                grads[id] = Some(g);
            }
        }
        Ok(grads)
    }

    /// Run backward and accumulate gradients into the store for every
    /// trainable parameter bound via `param`.
    pub fn backward_params(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (name, var) in &self.param_vars {
            if !self.nodes[var.0].needs_grad {
                continue;
            }
            if let Some(g) = &grads[var.0] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Gradient of the loss w.r.t. an arbitrary leaf, if any.
    pub fn grad_of(grads: &[Option<Tensor>], v: Var) -> Option<&Tensor> {
        grads[v.0].as_ref()
    }
}
