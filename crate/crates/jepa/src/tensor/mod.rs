//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional array over `f32` or `f64`
//! (see [`Scalar`]). Differentiable ops executed against a [`Tape`] record
//! a node per result; [`Tape::backward`] replays the nodes in exact reverse
//! execution order and accumulates gradients into every watched leaf.

mod ops;

pub use ops::*;

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

/// Scalar element type. `f32` is the training default, `f64` is used by the
/// verification suites (finite-difference checks need the headroom).
pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maxs(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

/// Dtype tag used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

macro_rules! impl_scalar {
    ($t:ty, $tag:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: Dtype = $tag;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maxs(self, other: Self) -> Self {
                self.max(other)
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32);
impl_scalar!(f64, Dtype::F64);

/// Dense n-dimensional array. Cloning is cheap (shared buffer).
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    node: Option<NodeRef<T>>,
}

#[derive(Clone)]
struct NodeRef<T: Scalar> {
    tape: Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![T::ZERO; numel]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![v; numel]),
            node: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: Rc::new(vec![v]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Scalar value of a 0-d / single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same buffer, detached from any tape.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    /// Mutable access to the underlying buffer (copy-on-write when shared).
    /// Only for parameter updates by the optimizer; never call on a tensor
    /// that participates in a live tape.
    pub fn data_mut(&mut self) -> &mut Vec<T> {
        assert!(self.node.is_none(), "data_mut on a taped tensor");
        Rc::make_mut(&mut self.data)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.data)
    }

    fn tape(&self) -> Option<&Tape<T>> {
        self.node.as_ref().map(|n| &n.tape)
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    parents: Vec<Option<usize>>,
    len: usize,
    backward: Option<BackwardFn<T>>,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    done: bool,
}

/// Ordered record of executed ops. One tape serves one logical execution
/// stream; `backward` may run once per forward recording.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                done: false,
            })),
        }
    }

    fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Register a leaf: the returned tensor shares `t`'s buffer and will
    /// receive a gradient after `backward`.
    pub fn watch(&self, t: &Tensor<T>) -> Tensor<T> {
        let id = {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Node {
                parents: vec![],
                len: t.numel(),
                backward: None,
            });
            inner.nodes.len() - 1
        };
        Tensor {
            shape: t.shape.clone(),
            data: Rc::clone(&t.data),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub(crate) fn record(
        &self,
        parents: &[&Tensor<T>],
        data: Vec<T>,
        shape: Vec<usize>,
        backward: BackwardFn<T>,
    ) -> Tensor<T> {
        let parent_ids: Vec<Option<usize>> = parents
            .iter()
            .map(|p| p.node.as_ref().map(|n| n.id))
            .collect();
        let id = {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Node {
                parents: parent_ids,
                len: data.len(),
                backward: Some(backward),
            });
            inner.nodes.len() - 1
        };
        Tensor {
            shape,
            data: Rc::new(data),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    /// Run reverse-mode accumulation seeded at a scalar loss.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let node = loss.node.as_ref().ok_or_else(|| {
            Error::Contract("backward: loss was not produced on a tape".into())
        })?;
        if !self.same_tape(&node.tape) {
            return Err(Error::Contract("backward: loss belongs to another tape".into()));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.done {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new forward first".into(),
            ));
        }
        inner.done = true;
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[node.id] = Some(vec![T::ONE]);
        for i in (0..n).rev() {
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            let node_i = &inner.nodes[i];
            if let Some(back) = &node_i.backward {
                let needs: Vec<bool> = node_i
                    .parents
                    .iter()
                    .map(|p| p.is_some())
                    .collect();
                let contribs = back(&grad_out, &needs);
                debug_assert_eq!(contribs.len(), node_i.parents.len());
                let parents = node_i.parents.clone();
                for (p, contrib) in parents.iter().zip(contribs) {
                    let (Some(pid), Some(c)) = (p, contrib) else {
                        continue;
                    };
                    let plen = inner.nodes[*pid].len;
                    assert_eq!(c.len(), plen, "gradient length mismatch in backward");
                    let slot = grads[*pid].get_or_insert_with(|| vec![T::ZERO; plen]);
                    for (g, v) in slot.iter_mut().zip(c) {
                        *g += v;
                    }
                }
            } else {
                // leaf: keep the gradient for retrieval
                grads[i] = Some(grad_out);
            }
        }
        inner.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` with respect to `t` (same shape as `t`).
    pub fn grad(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let node = t.node.as_ref()?;
        if !self.same_tape(&node.tape) {
            return None;
        }
        let inner = self.inner.borrow();
        inner.grads.get(node.id)?.as_ref().map(|g| Tensor {
            shape: t.shape.clone(),
            data: Rc::new(g.clone()),
            node: None,
        })
    }
}

pub(crate) fn pick_tape<'a, T: Scalar>(operands: &[&'a Tensor<T>]) -> Option<&'a Tape<T>> {
    let mut found: Option<&Tape<T>> = None;
    for op in operands {
        if let Some(t) = op.tape() {
            match found {
                None => found = Some(t),
                Some(prev) => assert!(prev.same_tape(t), "operands belong to different tapes"),
            }
        }
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_grad_through_square_sum() {
        // loss = sum(x^2), x = [1, 2] -> grad [2, 4]
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![1.0f64, 2.0], &[2]).unwrap());
        let sq = mul(&x, &x).unwrap();
        let loss = sum_all(&sq);
        tape.backward(&loss).unwrap();
        let g = tape.grad(&x).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_grad_via_zero_path() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![1.0f64, 2.0], &[2]).unwrap());
        let y = tape.watch(&Tensor::from_vec(vec![3.0f64], &[1]).unwrap());
        // loss touches x only through a zero scale, y not at all
        let loss = sum_all(&scale(&x, 0.0));
        tape.backward(&loss).unwrap();
        let gx = tape.grad(&x).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0]);
        assert!(tape.grad(&y).is_none());
    }

    #[test]
    fn second_backward_is_an_error() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![2.0f64], &[1]).unwrap());
        let loss = sum_all(&x);
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![1.0f64, 2.0], &[2]).unwrap());
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }
}
