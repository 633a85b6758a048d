//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Var`] is an immutable node holding its forward value. Operations on
//! vars record a backward closure only when at least one input requires a
//! gradient, so inference builds no graph. [`backward`] walks the recorded
//! graph in reverse creation order, which is a valid topological order
//! because every node is created after its parents.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Maps the upstream gradient to one optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

impl Var {
    fn make(value: Tensor, requires_grad: bool, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents,
            backward,
        }))
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(value: Tensor) -> Var {
        Self::make(value, true, Vec::new(), None)
    }

    pub fn constant(value: Tensor) -> Var {
        Self::make(value, false, Vec::new(), None)
    }

    /// Record the result of an operation. `backward` receives the gradient of
    /// the output and returns one entry per parent, in order.
    pub fn from_op(
        value: Tensor,
        parents: &[&Var],
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        if parents.iter().any(|p| p.requires_grad()) {
            let parents = parents.iter().map(|&p| p.clone()).collect();
            Self::make(value, true, parents, Some(Box::new(backward)))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        self.0.value.dims3()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.value().clone())
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

/// Gradients of leaf vars, keyed by var identity.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.map.get(&var.id())
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// Back-propagate from a scalar `root`.
pub fn backward(root: &Var) -> Gradients {
    assert_eq!(root.value().len(), 1, "backward() needs a scalar root");
    let mut out = Gradients::default();
    if !root.requires_grad() {
        return out;
    }

    let mut nodes: Vec<Var> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![root.clone()];
    while let Some(v) = stack.pop() {
        if !seen.insert(v.id()) {
            continue;
        }
        for p in &v.0.parents {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push(p.clone());
            }
        }
        nodes.push(v);
    }
    nodes.sort_by_key(|v| std::cmp::Reverse(v.id()));

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(root.id(), Tensor::full(root.shape(), 1.0));
    for node in nodes {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        match &node.0.backward {
            None => {
                out.map.insert(node.id(), g);
            }
            Some(f) => {
                let parent_grads = f(&g);
                debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                    match grads.get_mut(&p.id()) {
                        Some(acc) => acc.add_assign(&pg),
                        None => {
                            grads.insert(p.id(), pg);
                        }
                    }
                }
            }
        }
    }
    out
}
