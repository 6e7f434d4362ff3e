//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation records a backward closure on its output when any input
//! requires gradients. [`Tensor::backward`] walks the recorded graph once in
//! reverse topological order and accumulates gradients into the leaves.
//!
//! The engine is generic over [`Real`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference checks.

mod conv;
mod gradcheck;
mod nn;
mod ops;
mod params;
pub mod rng;

pub use gradcheck::{central_difference, grad_check, grad_check_many, GradCheckReport};
pub use nn::MASKED;
pub use params::ParamStore;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of a tensor.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided matrices.
    ///
    /// `a` is `m x k`, `b` is `k x n` and `c` is `m x n`, each described by a
    /// row stride and a column stride.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs buffer too small");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs buffer too small");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output buffer too small");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above guarantee every strided access stays in bounds.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn<T> = Box<dyn Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Real> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    /// Receives (output gradient, output data), returns one gradient per parent.
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

/// A reference-counted tensor. Cloning is cheap and shares the node.
pub struct Tensor<T: Real> {
    node: Arc<Node<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { node: Arc::clone(&self.node) }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.node.grad_fn.as_ref().map(|g| g.op).unwrap_or("leaf");
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("op", &op)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn from_node(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Arc::new(Node { shape, data, requires_grad, grad: Mutex::new(None), grad_fn }),
        }
    }

    /// A constant tensor. Fails when the data length does not match the shape.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_node(shape.to_vec(), data, false, None))
    }

    /// A trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(Self::from_node(t.node.shape.clone(), t.into_data(), true, None))
    }

    pub fn scalar(v: T) -> Self {
        Self::from_node(Vec::new(), vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_node(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    /// Same data as a trainable leaf detached from any graph.
    pub fn to_param(&self) -> Self {
        Self::from_node(self.node.shape.clone(), self.node.data.clone(), true, None)
    }

    /// Same data, no graph, no gradient tracking.
    pub fn detach(&self) -> Self {
        Self::from_node(self.node.shape.clone(), self.node.data.clone(), false, None)
    }

    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        let requires = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if requires {
            let grad_fn = GradFn { op, parents, backward: Box::new(backward) };
            Self::from_node(shape, data, true, Some(grad_fn))
        } else {
            Self::from_node(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    fn into_data(self) -> Vec<T> {
        match Arc::try_unwrap(self.node) {
            Ok(node) => node.data,
            Err(node) => node.data.clone(),
        }
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// Name of the operation that produced this tensor.
    pub fn op_name(&self) -> &'static str {
        self.node.grad_fn.as_ref().map(|g| g.op).unwrap_or("leaf")
    }

    pub fn ptr_eq(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.node, &other.node)
    }

    /// Casts to another element type as a constant.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self.node.data.iter().map(|v| U::lit(v.as_f64())).collect();
        Tensor::<U>::from_node(self.node.shape.clone(), data, false, None)
    }

    /// Backpropagates from this tensor with an upstream gradient of ones.
    pub fn backward(&self) -> Result<()> {
        self.backward_with(vec![T::one(); self.numel()])
    }

    /// Backpropagates with an explicit upstream gradient.
    pub fn backward_with(&self, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        grads.insert(Arc::as_ptr(&self.node), seed);
        for t in order.iter().rev() {
            let key = Arc::as_ptr(&t.node);
            let Some(g) = grads.remove(&key) else { continue };
            match &t.node.grad_fn {
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g, &t.node.data);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.op);
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{} gradient size", gf.op);
                        grads
                            .entry(Arc::as_ptr(&p.node))
                            .and_modify(|acc| acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b))
                            .or_insert(pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable through gradient-tracking edges, parents before children.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(Arc::as_ptr(&t.node)) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !seen.contains(&Arc::as_ptr(&p.node)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
