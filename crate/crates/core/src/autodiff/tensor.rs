use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Real;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether ops on this thread currently record graph nodes.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// RAII guard disabling graph recording on the current thread.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` with graph recording disabled.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = NoGradGuard::new();
    f()
}

/// Recorded producing operation: op-kind tag, parent references and the
/// intermediates its derivative rule needs.
pub(crate) enum Op<T: Real> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Div(Tensor<T>, Tensor<T>),
    Neg(Tensor<T>),
    Exp { x: Tensor<T>, y: Vec<T> },
    Ln(Tensor<T>),
    Powf { x: Tensor<T>, exponent: T },
    ClampMin { x: Tensor<T>, min: T },
    Relu(Tensor<T>),
    AddScalar(Tensor<T>),
    MulScalar { x: Tensor<T>, factor: T },
    RsubScalar(Tensor<T>),
    SumAll(Tensor<T>),
    MeanAll(Tensor<T>),
    SumAxis { x: Tensor<T>, axis: usize },
    MeanAxis { x: Tensor<T>, axis: usize },
    Softmax { x: Tensor<T>, axis: usize, y: Vec<T> },
    StackScalars(Vec<Tensor<T>>),
    ConcatChannels(Tensor<T>, Tensor<T>),
    SelectChannel { x: Tensor<T>, index: usize },
    Gather { x: Tensor<T>, indices: Vec<usize> },
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
    },
}

impl<T: Real> Op<T> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::Neg(x)
            | Op::Ln(x)
            | Op::Relu(x)
            | Op::AddScalar(x)
            | Op::RsubScalar(x)
            | Op::SumAll(x)
            | Op::MeanAll(x) => vec![x],
            Op::Exp { x, .. }
            | Op::Powf { x, .. }
            | Op::ClampMin { x, .. }
            | Op::MulScalar { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::SelectChannel { x, .. }
            | Op::Gather { x, .. } => vec![x],
            Op::StackScalars(parts) => parts.iter().collect(),
            Op::ConcatChannels(a, b) => vec![a, b],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
        }
    }
}

struct Inner<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

/// Dense row-major tensor participating in a reverse-mode graph.
///
/// Cloning is cheap (shared handle). A tensor is a leaf when it has no
/// producing op; leaves marked with `requires_grad` receive gradients.
pub struct Tensor<T: Real> {
    inner: Rc<Inner<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish_non_exhaustive()
    }
}

impl<T: Real> Tensor<T> {
    fn new_inner(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Leaf tensor that does not require gradients.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::new_inner(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients during backward.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "param",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::new_inner(shape.to_vec(), data, true, None))
    }

    /// Scalar constant (shape `[]`).
    pub fn scalar(v: T) -> Self {
        Self::new_inner(Vec::new(), vec![v], false, None)
    }

    /// Scalar leaf that requires gradients.
    pub fn scalar_param(v: T) -> Self {
        Self::new_inner(Vec::new(), vec![v], true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![T::zero(); n], false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![v; n], false, None)
    }

    /// Output-node constructor used by the op implementations: records the
    /// graph node only when recording is enabled and some parent needs it.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        let track = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        if track {
            Self::new_inner(shape, data, true, Some(op))
        } else {
            Self::new_inner(shape, data, false, None)
        }
    }

    /// Leaf constructor for internal callers that already know the shape
    /// matches the data.
    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<T>) -> Self {
        Self::new_inner(shape, data, false, None)
    }

    /// True when an op producing a node from `self` would be recorded.
    pub(crate) fn tracked(&self) -> bool {
        grad_enabled() && self.inner.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn op(&self) -> Option<&Op<T>> {
        self.inner.op.as_ref()
    }

    /// Borrow of the raw data.
    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar tensor.
    pub fn value(&self) -> T {
        debug_assert!(self.is_scalar(), "value() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place mutation of a leaf's data (optimizer updates).
    pub fn with_data_mut(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Copy of the data as a fresh leaf outside any graph.
    pub fn detach(&self) -> Self {
        Self::new_inner(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[T]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi = *gi + *ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    pub(crate) fn take_grad_for_backward(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate
    /// additively across fan-out and across repeated calls; callers that
    /// want fresh gradients zero them first.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        let order = self.topo_order();
        self.accumulate_grad(&[T::one()]);
        for t in order.iter().rev() {
            if let Some(op) = t.op() {
                let grad = match t.take_grad_for_backward() {
                    Some(g) => g,
                    None => continue, // not on a path to the root
                };
                backward_step(op, &grad, t)?;
            }
        }
        Ok(())
    }

    /// Post-order over the graph; each node exactly once.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = t.op() {
                for p in op.parents() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn backward_step<T: Real>(op: &Op<T>, grad: &[T], out: &Tensor<T>) -> Result<()> {
    super::backward::apply(op, grad, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(2.5f64);
        assert!(t.is_scalar());
        assert_eq!(t.value(), 2.5);
        assert_eq!(t.shape(), &[] as &[usize]);
    }

    #[test]
    fn from_vec_rejects_bad_shape() {
        let err = Tensor::from_vec(&[2, 3], vec![1.0f64; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "from_vec", .. }));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
        assert!(!y.has_node());
    }

    #[test]
    fn fanout_accumulates() {
        // root = x*x + x*x -> d/dx = 4x
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        let a = x.mul(&x).unwrap();
        let b = x.mul(&x).unwrap();
        let root = a.add(&b).unwrap().sum_all();
        root.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let x = Tensor::param(&[3], vec![0.3f64, -1.2, 2.2]).unwrap();
            let y = x.mul(&x).unwrap().exp().sum_all();
            y.backward().unwrap();
            x.grad().unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical graphs must give bit-identical gradients");
    }
}
