//! Minimal reverse-mode differentiable array engine.
//!
//! Tensors are dense row-major buffers with a dynamically built computation
//! graph behind them. Precision is generic: tests and gradient checks run in
//! f64, training runs in f32. Every op validates shapes up front and checks
//! its output for NaN/Inf, so a diverging training run fails loudly at the
//! op that produced the first non-finite value.

mod adam;
mod checkpoint;
mod conv;
pub mod gradcheck;
mod ops;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    checkpoint_to_bytes, read_checkpoint, read_checkpoint_bytes, write_checkpoint,
    CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use conv::conv3d;
pub use ops::*;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::rc::Rc;

use crate::error::{Error, Result};

/// Element type of a [`DiffTensor`]: f32 for training, f64 for verification.
pub trait Scalar:
    Copy + PartialOrd + Debug + Display + Send + Sync + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_val(self) -> bool;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    /// `C := alpha*A*B + beta*C` with arbitrary strides, row-major friendly.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Gradient contribution per parent, in parent order. `None` means the op
/// does not differentiate through that parent (e.g. a constant target).
type ParentGrads<T> = Vec<Option<Vec<T>>>;
type BackwardFn<T> = Box<dyn Fn(&[T], &[DiffTensor<T>]) -> ParentGrads<T>>;

struct Node<T: Scalar> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    parents: Vec<DiffTensor<T>>,
    backward: Option<BackwardFn<T>>,
    op_name: &'static str,
}

/// Dense N-dimensional array participating in reverse-mode differentiation.
/// Cloning is shallow; clones share values and gradient.
pub struct DiffTensor<T: Scalar>(Rc<RefCell<Node<T>>>);

impl<T: Scalar> Clone for DiffTensor<T> {
    fn clone(&self) -> Self {
        DiffTensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> Debug for DiffTensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.0.borrow();
        write!(f, "DiffTensor({:?}, op={})", n.shape, n.op_name)
    }
}

pub(crate) fn check_finite<T: Scalar>(values: &[T], op: &str) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite_val() {
            return Err(Error::NonFinite(format!(
                "{op} produced {v} at flat index {i}"
            )));
        }
    }
    Ok(())
}

impl<T: Scalar> DiffTensor<T> {
    fn from_node(node: Node<T>) -> Self {
        DiffTensor(Rc::new(RefCell::new(node)))
    }

    fn new_leaf(shape: &[usize], values: Vec<T>, requires_grad: bool, op: &'static str) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "{op}: shape {shape:?} implies {numel} elements, got {}",
                values.len()
            )));
        }
        check_finite(&values, op)?;
        Ok(Self::from_node(Node {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad,
            parents: Vec::new(),
            backward: None,
            op_name: op,
        }))
    }

    /// Non-differentiable input (data, targets).
    pub fn constant(shape: &[usize], values: Vec<T>) -> Result<Self> {
        Self::new_leaf(shape, values, false, "constant")
    }

    /// Learnable leaf; gradients accumulate here.
    pub fn param(shape: &[usize], values: Vec<T>) -> Result<Self> {
        Self::new_leaf(shape, values, true, "param")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new_leaf(shape, vec![T::ZERO; numel], false, "zeros").expect("zeros are finite")
    }

    pub fn scalar(v: T) -> Result<Self> {
        Self::constant(&[], vec![v])
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<T>,
        parents: Vec<DiffTensor<T>>,
        backward: BackwardFn<T>,
        op_name: &'static str,
    ) -> Result<Self> {
        check_finite(&values, op_name)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Ok(Self::from_node(Node {
            shape,
            values,
            grad: None,
            requires_grad,
            parents,
            backward: if requires_grad { Some(backward) } else { None },
            op_name,
        }))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Borrow of the value buffer; hold briefly.
    pub fn values_ref(&self) -> Ref<'_, [T]> {
        Ref::map(self.0.borrow(), |n| n.values.as_slice())
    }

    pub fn values(&self) -> Vec<T> {
        self.0.borrow().values.clone()
    }

    /// Value of a 0-d or 1-element tensor.
    pub fn item(&self) -> Result<T> {
        let n = self.0.borrow();
        if n.values.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "item() on tensor with {} elements",
                n.values.len()
            )));
        }
        Ok(n.values[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.borrow().grad.clone()
    }

    /// Gradient buffer, zeros when no backward pass touched this tensor.
    pub fn grad_or_zeros(&self) -> Vec<T> {
        let n = self.0.borrow();
        n.grad.clone().unwrap_or_else(|| vec![T::ZERO; n.values.len()])
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Replaces values in place (optimizer updates). Shape must match.
    pub fn set_values(&self, values: Vec<T>) -> Result<()> {
        let mut n = self.0.borrow_mut();
        if values.len() != n.values.len() {
            return Err(Error::Shape(format!(
                "set_values: expected {} elements, got {}",
                n.values.len(),
                values.len()
            )));
        }
        check_finite(&values, "set_values")?;
        n.values = values;
        Ok(())
    }

    fn ptr(&self) -> *const () {
        Rc::as_ptr(&self.0) as *const ()
    }

    /// Reverse-mode accumulation from a scalar loss. Adds this pass's
    /// adjoints into each reachable tensor's persistent gradient, so two
    /// passes without a reset double the gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::InvalidArgument(
                "backward() on a tensor with no differentiable ancestors".into(),
            ));
        }

        // post-order DFS over the requires-grad subgraph
        let mut topo: Vec<DiffTensor<T>> = Vec::new();
        let mut visited: HashMap<*const (), ()> = HashMap::new();
        let mut stack: Vec<(DiffTensor<T>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx == 0 {
                if visited.contains_key(&node.ptr()) {
                    continue;
                }
                visited.insert(node.ptr(), ());
            }
            let parents: Vec<DiffTensor<T>> = {
                let inner = node.0.borrow();
                inner.parents.clone()
            };
            if child_idx < parents.len() {
                stack.push((node.clone(), child_idx + 1));
                let parent = parents[child_idx].clone();
                if parent.requires_grad() && !visited.contains_key(&parent.ptr()) {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(node);
            }
        }

        // per-pass adjoints, keyed by node identity
        let mut adjoints: HashMap<*const (), Vec<T>> = HashMap::new();
        adjoints.insert(self.ptr(), vec![T::ONE]);

        for node in topo.iter().rev() {
            let adjoint = match adjoints.get(&node.ptr()) {
                Some(a) => a.clone(),
                None => continue, // not on any path to the loss
            };
            let inner = node.0.borrow();
            let (backward, parents) = match &inner.backward {
                Some(b) => (b, inner.parents.clone()),
                None => continue,
            };
            let grads = backward(&adjoint, &parents);
            drop(inner);
            for (parent, g) in parents.iter().zip(grads.into_iter()) {
                let Some(g) = g else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                let entry = adjoints
                    .entry(parent.ptr())
                    .or_insert_with(|| vec![T::ZERO; parent.numel()]);
                if entry.len() != g.len() {
                    return Err(Error::Shape(format!(
                        "backward of {} produced gradient of {} elements for parent of {}",
                        node.0.borrow().op_name,
                        g.len(),
                        entry.len()
                    )));
                }
                for (e, gi) in entry.iter_mut().zip(g.iter()) {
                    *e += *gi;
                }
            }
        }

        // fold pass adjoints into persistent gradients
        for node in &topo {
            if let Some(adj) = adjoints.get(&node.ptr()) {
                check_finite(adj, node.0.borrow().op_name)?;
                let mut inner = node.0.borrow_mut();
                match &mut inner.grad {
                    Some(g) => {
                        for (gi, ai) in g.iter_mut().zip(adj.iter()) {
                            *gi += *ai;
                        }
                    }
                    None => inner.grad = Some(adj.clone()),
                }
            }
        }
        Ok(())
    }
}
