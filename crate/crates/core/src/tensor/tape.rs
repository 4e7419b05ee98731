use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{dim_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &mut Grads)>;

struct Node {
    shape: Vec<usize>,
    data: Rc<Vec<f32>>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Records differentiable operations in execution order.
///
/// Nodes that do not depend on any gradient-requiring leaf carry no backward
/// closure, so frozen sub-graphs cost nothing during the reverse pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
    inference: bool,
}

/// Gradient buffers indexed by tape node, filled by [`Tape::backward`].
pub struct Grads {
    slots: Vec<Option<Vec<f32>>>,
    lens: Vec<usize>,
    wants: Vec<bool>,
}

impl Grads {
    pub fn wants(&self, v: Var) -> bool {
        self.wants[v.0]
    }

    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.slots[v.0].as_deref()
    }

    /// Mutable gradient buffer for `v`, zero-initialized on first access.
    pub fn slot(&mut self, v: Var) -> &mut [f32] {
        let len = self.lens[v.0];
        self.slots[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn add(&mut self, v: Var, g: &[f32]) {
        if !self.wants[v.0] {
            return;
        }
        match &mut self.slots[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.slots[v.0] = Some(g.to_vec()),
        }
    }

    pub fn add_owned(&mut self, v: Var, g: Vec<f32>) {
        if !self.wants[v.0] {
            return;
        }
        match &mut self.slots[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => self.slots[v.0] = Some(g),
        }
    }
}

impl Tape {
    /// Tape on which parameters never require gradients, so no backward
    /// closures are recorded. For prediction.
    pub fn inference() -> Self {
        Tape { inference: true, ..Self::default() }
    }

    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push_node(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_node(Node { shape, data: Rc::new(t.into_data()), requires_grad: false, backward: None })
    }

    /// Records a leaf that collects a gradient.
    pub fn leaf(&self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_node(Node { shape, data: Rc::new(t.into_data()), requires_grad: true, backward: None })
    }

    /// Leaf for a stored parameter; repeated calls return the same node so
    /// that a parameter used several times accumulates one gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push_node(Node {
            shape: p.tensor.shape().to_vec(),
            data: Rc::new(p.tensor.data().to_vec()),
            requires_grad: !p.frozen && !self.inference,
            backward: None,
        });
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Records the result of an operation over `inputs`.
    pub(crate) fn push_op(
        &self,
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: &[Var],
        backward: impl Fn(&[f32], &mut Grads) + 'static,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.push_node(Node {
            shape,
            data: Rc::new(data),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        })
    }

    /// Records a value that shares storage with an existing node.
    pub(crate) fn push_shared(
        &self,
        shape: Vec<usize>,
        data: Rc<Vec<f32>>,
        inputs: &[Var],
        backward: impl Fn(&[f32], &mut Grads) + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.push_node(Node {
            shape,
            data,
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        })
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].data.len()
    }

    pub(crate) fn data(&self, v: Var) -> Rc<Vec<f32>> {
        Rc::clone(&self.nodes.borrow()[v.0].data)
    }

    /// Copies the node value out as a tensor.
    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.as_ref().clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        self.nodes.borrow()[v.0].data[0]
    }

    /// Runs the reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].data.len() != 1 {
            return Err(dim_err!("backward needs a scalar, got shape {:?}", nodes[loss.0].shape));
        }
        let mut grads = Grads {
            slots: vec![None; nodes.len()],
            lens: nodes.iter().map(|n| n.data.len()).collect(),
            wants: nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if !nodes[loss.0].requires_grad {
            return Ok(grads);
        }
        grads.slots[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(f) = nodes[i].backward.as_ref() else { continue };
            // Each slot is consumed once; leaves keep theirs for the caller.
            let Some(g) = grads.slots[i].take() else { continue };
            f(&g, &mut grads);
        }
        Ok(grads)
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParamStore) -> Result<()> {
        for (&id, &v) in self.params.borrow().iter() {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
