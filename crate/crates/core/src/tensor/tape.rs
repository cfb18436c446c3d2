use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Element, Result, Tensor, TensorError};

/// Given the upstream gradient of a node and a mask of which inputs need a
/// gradient, returns one optional contribution per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    generation: u64,
    branch_sig: u64,
    check_finite: bool,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Records operations for reverse-mode differentiation.
///
/// A tape is confined to one thread. Cloning it yields another handle to the
/// same recording.
pub struct Tape<T> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node recorded on a [`Tape`].
pub struct Var<T> {
    tape: Tape<T>,
    id: usize,
    generation: u64,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            tape: self.tape.clone(),
            id: self.id,
            generation: self.generation,
        }
    }
}

impl<T: Element> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                generation: 0,
                branch_sig: FNV_OFFSET,
                check_finite: cfg!(debug_assertions),
            })),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Variables created before the reset become
    /// detached.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.grads.clear();
        inner.generation += 1;
        inner.branch_sig = FNV_OFFSET;
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        self.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            backward: None,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    fn push(&self, node: Node<T>) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(node);
        Var {
            tape: self.clone(),
            id,
            generation: inner.generation,
        }
    }

    /// Makes every recorded op fail with `NonFinite` on NaN or infinite
    /// output. On by default in builds with debug assertions.
    pub fn set_finite_checks(&self, on: bool) {
        self.inner.borrow_mut().check_finite = on;
    }

    /// Appends an operation result. The backward rule is kept only when some
    /// input requires a gradient.
    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[&Var<T>],
        backward: BackwardFn<T>,
    ) -> Result<Var<T>> {
        if self.inner.borrow().check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let mut requires_grad = false;
        for v in inputs {
            self.check_owner(v)?;
            requires_grad |= v.requires_grad();
        }
        Ok(self.push(Node {
            value,
            requires_grad,
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
        }))
    }

    fn check_owner(&self, v: &Var<T>) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &v.tape.inner) {
            return Err(TensorError::InvalidArgument(
                "variables belong to different tapes".into(),
            ));
        }
        if v.generation != self.inner.borrow().generation {
            return Err(TensorError::DetachedTape);
        }
        Ok(())
    }

    /// Folds data-dependent branch decisions (activation signs, argmax
    /// positions, clamps) into a running signature. Finite-difference checks
    /// compare signatures to detect perturbations that cross a kink.
    pub(crate) fn note_branches(&self, decisions: impl IntoIterator<Item = u64>) {
        let mut inner = self.inner.borrow_mut();
        let mut h = inner.branch_sig;
        for d in decisions {
            for byte in d.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(FNV_PRIME);
            }
        }
        inner.branch_sig = h;
    }

    pub fn branch_signature(&self) -> u64 {
        self.inner.borrow().branch_sig
    }

    /// Runs one reverse sweep from `loss`, replacing any previously computed
    /// gradients. Gradients of a node used several times are summed.
    pub fn backward(&self, loss: &Var<T>) -> Result<()> {
        self.check_owner(loss)?;
        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        let root = &inner.nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        if !root.requires_grad {
            return Err(TensorError::DetachedTape);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(inner.nodes.len());
        grads.resize_with(inner.nodes.len(), || None);
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            let (Some(backward), Some(upstream)) = (&node.backward, &grads[id]) else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| inner.nodes[i].requires_grad)
                .collect();
            let contributions = backward(upstream, &needs);
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for (&input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                if !inner.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, v)| *a += *v),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        inner.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward sweep with respect to `v`.
    pub fn grad(&self, v: &Var<T>) -> Option<Tensor<T>> {
        let inner = self.inner.borrow();
        if v.generation != inner.generation {
            return None;
        }
        let g = inner.grads.get(v.id)?.as_ref()?;
        Some(Tensor::from_parts(
            g.clone(),
            inner.nodes[v.id].value.shape().to_vec(),
        ))
    }
}

impl<T: Element> Var<T> {
    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id]
            .value
            .shape()
            .to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(self)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(self)
    }
}
