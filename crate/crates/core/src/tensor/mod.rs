//! Dense f64 tensors with define-by-run reverse-mode differentiation.
//!
//! Every op builds a fresh node that remembers its parents and a closure
//! computing the parents' gradients from the output gradient. Node ids grow
//! monotonically, so visiting reachable nodes in descending id order is a
//! valid reverse topological order for [`Tensor::backward`].

mod conv;
mod gemm;
mod ops;

pub use conv::*;
pub(crate) use gemm::gemm;
pub use ops::*;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{contract_err, dim_err, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static KINK_TRACE: Cell<Option<u64>> = const { Cell::new(None) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` without recording any graph nodes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

/// Runs `f` and returns a fingerprint of which side of every relu,
/// leaky-relu and clamp kink each input landed on. Two evaluations with equal
/// fingerprints used the same linear piece of every such op.
pub fn trace_kinks<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = KINK_TRACE.with(|c| c.replace(Some(0xcbf2_9ce4_8422_2325)));
    let out = f();
    let h = KINK_TRACE.with(|c| c.replace(prev)).unwrap_or(0);
    (out, h)
}

pub(crate) fn record_kinks(x: &[f64], side: impl Fn(f64) -> u64) {
    KINK_TRACE.with(|c| {
        if let Some(mut h) = c.get() {
            for &v in x {
                h = (h ^ side(v)).wrapping_mul(0x0100_0000_01b3);
            }
            c.set(Some(h));
        }
    });
}

/// Parent gradients given (output grad, parents, output value).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor], &[f64]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_node(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn,
        }))
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err(format!("zero-sized dimension in shape {shape:?}"));
        }
        if numel(shape) != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            ));
        }
        Ok(Self::from_node(shape.to_vec(), data, false, None))
    }

    /// Constant; panics on a shape/length mismatch (internal use with computed shapes).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::new(data, shape).expect("Tensor::from_vec")
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Self {
        let t = Self::from_vec(data, shape);
        Self::from_node(t.0.shape.clone(), t.to_vec(), true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(vec![0.0; numel(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_vec(vec![value; numel(shape)], shape)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(vec![value], &[1])
    }

    /// Builds an op output. The node records a backward closure only when
    /// grad mode is on and some parent requires a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[Tensor], &[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        let rg = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let grad_fn = rg.then(|| GradFn {
            parents,
            backward: Box::new(backward),
        });
        Self::from_node(shape, data, rg, grad_fn)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the values of a leaf in place (optimizer updates, checkpoint loads).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return dim_err(format!(
                "set_data: shape {:?} needs {} values, got {}",
                self.shape(),
                self.numel(),
                data.len()
            ));
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::from_node(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Same node identity check (used by parameter sharing tests).
    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn accumulate_grad(&self, g: Vec<f64>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a single-element tensor. Gradients accumulate
    /// into every reachable tensor that requires them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return contract_err(format!(
                "backward needs a single-element loss, got shape {:?}",
                self.shape()
            ));
        }
        if !self.requires_grad() {
            return contract_err("backward on a tensor that is not part of a graph");
        }
        let mut seen = HashSet::new();
        let mut order = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            if let Some(gf) = &t.0.grad_fn {
                stack.extend(gf.parents.iter().filter(|p| p.requires_grad()).cloned());
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        self.accumulate_grad(vec![1.0]);
        for t in &order {
            let Some(gf) = &t.0.grad_fn else { continue };
            // interior grads are no longer needed once propagated
            let Some(g_out) = t.0.grad.borrow_mut().take() else { continue };
            let grads = {
                let out = t.0.data.borrow();
                (gf.backward)(&g_out, &gf.parents, &out)
            };
            for (p, g) in gf.parents.iter().zip(grads) {
                if let Some(g) = g {
                    if p.requires_grad() {
                        debug_assert_eq!(g.len(), p.numel());
                        p.accumulate_grad(g);
                    }
                }
            }
        }
        Ok(())
    }
}
