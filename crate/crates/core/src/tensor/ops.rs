//! Elementwise arithmetic, matrix products and reductions on [`Var`].

use super::gemm::{gemm_acc, transpose};
use super::{numel_of, Element, Result, Tensor, TensorError, Var};

/// Result shape of a binary elementwise op, or `None` when the operands are
/// not compatible.
///
/// Supported: equal shapes; a single-element operand whose rank does not
/// exceed the other's; an operand whose shape is a proper trailing suffix of
/// the other's.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    if numel_of(b) == 1 && b.len() <= a.len() {
        return Some(a.to_vec());
    }
    if numel_of(a) == 1 && a.len() <= b.len() {
        return Some(b.to_vec());
    }
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.len() < long.len() && long.ends_with(short) {
        return Some(long.to_vec());
    }
    None
}

/// Sums a broadcast gradient back onto an operand of `len` elements. Trailing
/// broadcasting means output element `i` came from operand element `i % len`.
fn unbroadcast<T: Element>(g: &[T], len: usize) -> Vec<T> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); len];
    for (i, v) in g.iter().enumerate() {
        out[i % len] += *v;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Axes {
    All,
    List(Vec<usize>),
}

impl From<&[usize]> for Axes {
    fn from(a: &[usize]) -> Self {
        Axes::List(a.to_vec())
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<T: Element> Var<T> {
    fn binary(&self, other: &Var<T>, kind: Binary) -> Result<Var<T>> {
        let (name, a, b) = (
            match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            },
            self.value(),
            other.value(),
        );
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            }
        })?;
        let n = numel_of(&shape);
        let (ad, bd) = (a.data(), b.data());
        let (la, lb) = (ad.len(), bd.len());
        let out: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (ad[i % la], bd[i % lb]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let backward = Box::new(move |g: &[T], needs: &[bool]| {
            let (ad, bd) = (a.data(), b.data());
            let ga = needs[0].then(|| match kind {
                Binary::Add | Binary::Sub => unbroadcast(g, la),
                Binary::Mul => {
                    let prod: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * bd[i % lb])
                        .collect();
                    unbroadcast(&prod, la)
                }
            });
            let gb = needs[1].then(|| match kind {
                Binary::Add => unbroadcast(g, lb),
                Binary::Sub => {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    unbroadcast(&neg, lb)
                }
                Binary::Mul => {
                    let prod: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * ad[i % la])
                        .collect();
                    unbroadcast(&prod, lb)
                }
            });
            vec![ga, gb]
        });
        self.tape()
            .record(name, Tensor::from_parts(out, shape), &[self, other], backward)
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn scale(&self, factor: T) -> Result<Var<T>> {
        let a = self.value();
        let out: Vec<T> = a.data().iter().map(|&v| v * factor).collect();
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            vec![Some(g.iter().map(|&v| v * factor).collect())]
        });
        self.tape().record(
            "scale",
            Tensor::from_parts(out, a.shape().to_vec()),
            &[self],
            backward,
        )
    }

    /// `max(x, s)` elementwise. The gradient flows only where `x > s`.
    pub fn max_scalar(&self, s: T) -> Result<Var<T>> {
        let a = self.value();
        let pass: Vec<bool> = a.data().iter().map(|&v| v > s).collect();
        self.tape().note_branches(pass.iter().map(|&p| p as u64));
        let out: Vec<T> = a
            .data()
            .iter()
            .zip(&pass)
            .map(|(&v, &p)| if p { v } else { s })
            .collect();
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            vec![Some(
                g.iter()
                    .zip(&pass)
                    .map(|(&v, &p)| if p { v } else { T::zero() })
                    .collect(),
            )]
        });
        self.tape().record(
            "max_scalar",
            Tensor::from_parts(out, a.shape().to_vec()),
            &[self],
            backward,
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let a = self.value();
        let out = a.reshape(shape)?;
        let backward = Box::new(|g: &[T], _: &[bool]| vec![Some(g.to_vec())]);
        self.tape().record("reshape", out, &[self], backward)
    }

    /// Product of `[M, K]` and `[K, N]` matrices. Every output element sums
    /// over `k` in increasing order.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = matmul_raw(a.data(), b.data(), m, k, n);
        let backward = Box::new(move |g: &[T], needs: &[bool]| {
            let (ad, bd) = (a.data(), b.data());
            // dA = g b^T
            let ga = needs[0].then(|| {
                let mut out = vec![T::zero(); m * k];
                gemm_acc(m, n, k, g, &transpose_raw(bd, k, n), &mut out);
                out
            });
            // dB = a^T g
            let gb = needs[1].then(|| {
                let mut out = vec![T::zero(); k * n];
                gemm_acc(k, m, n, &transpose_raw(ad, m, k), g, &mut out);
                out
            });
            vec![ga, gb]
        });
        self.tape().record(
            "matmul",
            Tensor::from_parts(out, vec![m, n]),
            &[self, other],
            backward,
        )
    }

    pub fn transpose(&self) -> Result<Var<T>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let out = transpose_raw(a.data(), r, c);
        let backward = Box::new(move |g: &[T], _: &[bool]| vec![Some(transpose_raw(g, c, r))]);
        self.tape().record(
            "transpose",
            Tensor::from_parts(out, vec![c, r]),
            &[self],
            backward,
        )
    }

    pub fn reduce(&self, op: ReduceOp, axes: Axes) -> Result<Var<T>> {
        let a = self.value();
        let ndim = a.ndim();
        let mut reduced = vec![false; ndim];
        match &axes {
            Axes::All => reduced.iter_mut().for_each(|r| *r = true),
            Axes::List(list) => {
                if list.is_empty() {
                    return Err(TensorError::InvalidArgument("empty axis list".into()));
                }
                for &ax in list {
                    if ax >= ndim {
                        return Err(TensorError::InvalidAxis { axis: ax, ndim });
                    }
                    reduced[ax] = true;
                }
            }
        }
        let in_shape = a.shape().to_vec();
        let out_shape: Vec<usize> = in_shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let out_len = numel_of(&out_shape);
        let count = a.numel() / out_len;

        // Map each input element (row-major) to its output slot.
        let mut slot = vec![0usize; a.numel()];
        let mut idx = vec![0usize; ndim];
        for s in slot.iter_mut() {
            let mut o = 0;
            for d in 0..ndim {
                if !reduced[d] {
                    o = o * in_shape[d] + idx[d];
                }
            }
            *s = o;
            for d in (0..ndim).rev() {
                idx[d] += 1;
                if idx[d] < in_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }

        let data = a.data();
        let (out, argmax) = match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut out = vec![T::zero(); out_len];
                for (v, &s) in data.iter().zip(&slot) {
                    out[s] += *v;
                }
                if op == ReduceOp::Mean {
                    let c = T::of(count as f64);
                    out.iter_mut().for_each(|v| *v = *v / c);
                }
                (out, Vec::new())
            }
            ReduceOp::Max => {
                let mut out = vec![T::neg_infinity(); out_len];
                let mut arg = vec![usize::MAX; out_len];
                for (i, (v, &s)) in data.iter().zip(&slot).enumerate() {
                    if arg[s] == usize::MAX || *v > out[s] {
                        out[s] = *v;
                        arg[s] = i;
                    }
                }
                self.tape().note_branches(arg.iter().map(|&i| i as u64));
                (out, arg)
            }
        };
        let numel = a.numel();
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let mut gin = vec![T::zero(); numel];
            match op {
                ReduceOp::Sum => gin.iter_mut().zip(&slot).for_each(|(x, &s)| *x = g[s]),
                ReduceOp::Mean => {
                    let c = T::of(count as f64);
                    gin.iter_mut().zip(&slot).for_each(|(x, &s)| *x = g[s] / c)
                }
                ReduceOp::Max => {
                    for (s, &i) in argmax.iter().enumerate() {
                        gin[i] += g[s];
                    }
                }
            }
            vec![Some(gin)]
        });
        let name = match op {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
        };
        self.tape()
            .record(name, Tensor::from_parts(out, out_shape), &[self], backward)
    }

    pub fn sum_all(&self) -> Result<Var<T>> {
        self.reduce(ReduceOp::Sum, Axes::All)
    }

    pub fn mean_all(&self) -> Result<Var<T>> {
        self.reduce(ReduceOp::Mean, Axes::All)
    }
}

pub(crate) fn matmul_raw<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_acc(m, k, n, a, b, &mut out);
    out
}

fn transpose_raw<T: Element>(a: &[T], r: usize, c: usize) -> Vec<T> {
    transpose(a, r, c)
}
