use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::Scalar;
use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether new operations are currently recorded for differentiation.
pub fn is_recording() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

struct NoGradGuard;

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Runs `f` in inference mode: nothing inside is recorded for backward.
///
/// Scopes nest; recording resumes when the outermost scope exits.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let _guard = NoGradGuard;
    f()
}

/// What a backward rule sees: the upstream gradient, the forward output and
/// the op's inputs.
pub struct BackwardArgs<'a, T: Scalar> {
    pub grad: &'a [T],
    pub output: &'a [T],
    pub inputs: &'a [Tensor<T>],
}

/// Returns one gradient per input; `None` for inputs that need none.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>>>;

pub(crate) struct GradFn<T: Scalar> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// Dense row-major n-dimensional array with reverse-mode differentiation.
///
/// Cloning is cheap: clones share storage. Operations build a graph on the
/// fly (define-by-run); node ids increase with creation time so the creation
/// order is a valid topological order. Gradients are retained on leaves.
pub struct Tensor<T: Scalar = f32> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.node.data.borrow();
        let preview: Vec<T> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field(
                "op",
                &self.node.grad_fn.as_ref().map(|g| g.name).unwrap_or("leaf"),
            )
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                grad_fn,
            }),
        }
    }

    /// Constant tensor (never receives a gradient).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape("new", shape, &[data.len()]));
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape("param", shape, &[data.len()]));
        }
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![v], vec![], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![T::zero(); numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::build(vec![v; numel(shape)], shape.to_vec(), false, None)
    }

    /// Result of an operation. The backward rule is recorded only when
    /// recording is on and some input requires a gradient.
    pub fn from_op(
        name: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = is_recording() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::build(
                data,
                shape,
                true,
                Some(GradFn {
                    name,
                    inputs,
                    backward,
                }),
            )
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    /// Name of the op that produced this tensor, `"leaf"` otherwise.
    pub fn op_name(&self) -> &'static str {
        self.node.grad_fn.as_ref().map(|g| g.name).unwrap_or("leaf")
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    /// In-place access for optimizers and running statistics.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    pub fn item(&self) -> T {
        self.node.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.node.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.to_vec(), self.node.shape.clone(), false, None)
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    /// Propagates d(self)/d(x) into every reachable leaf `x` that requires a
    /// gradient, adding to whatever gradient the leaf already holds.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(gf) = &t.node.grad_fn {
                for inp in &gf.inputs {
                    if inp.requires_grad() && seen.insert(inp.id()) {
                        stack.push(inp.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_unstable_by(|a, b| b.id().cmp(&a.id()));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for t in order {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.node.grad_fn {
                None => {
                    let mut slot = t.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let out = t.node.data.borrow();
                    let grads = (gf.backward)(&BackwardArgs {
                        grad: &g,
                        output: &out,
                        inputs: &gf.inputs,
                    });
                    debug_assert_eq!(grads.len(), gf.inputs.len(), "{}", gf.name);
                    for (inp, gi) in gf.inputs.iter().zip(grads) {
                        let Some(gi) = gi else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(gi.len(), inp.numel(), "{} grad length", gf.name);
                        match pending.get_mut(&inp.id()) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(inp.id(), gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let x = Tensor::<f64>::param(vec![3.0], &[]).unwrap();
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn reused_input_accumulates() {
        let x = Tensor::<f64>::param(vec![1.5, -2.0], &[2]).unwrap();
        let y = x.add(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        // a second backward adds on top
        let y = x.add(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 4.0]);
    }

    #[test]
    fn non_scalar_backward_is_rank_error() {
        let x = Tensor::<f32>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.relu();
        assert!(matches!(y.backward(), Err(Error::Rank(_))));
    }

    #[test]
    fn no_grad_records_nothing_and_nests() {
        let x = Tensor::<f32>::param(vec![1.0, 2.0], &[2]).unwrap();
        let recorded = x.exp().sum_all();
        let (a, b) = no_grad(|| {
            let inner = no_grad(|| x.exp().sum_all());
            assert!(!is_recording());
            (inner, x.exp().sum_all())
        });
        assert!(is_recording());
        assert!(!a.requires_grad() && !b.requires_grad());
        assert_eq!(a.item().to_bits(), recorded.item().to_bits());
        a.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn shape_mismatch_on_construction() {
        assert!(matches!(
            Tensor::<f32>::new(vec![1.0; 5], &[2, 3]),
            Err(Error::Shape { .. })
        ));
    }
}
