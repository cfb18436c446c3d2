//! Fused neural-network operations with hand-written backward rules.
//!
//! Convolution work is split per sample across rayon workers. Per-sample
//! partial gradients are reduced in sample order afterwards, so the result
//! never depends on the number of workers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gemm::{gemm_acc, transpose};
use super::ops::{Axes, ReduceOp};
use super::{Element, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    /// `(k - 1) / 2` before, the remainder after; preserves size at stride 1.
    Same,
}

impl Padding {
    fn amounts(self, k: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => ((k - 1) / 2, k - 1 - (k - 1) / 2),
        }
    }
}

/// `y = x` for `x >= 0`, `alpha * x` otherwise. The derivative at exactly
/// zero is `alpha`.
pub fn leaky_relu<T: Element>(x: &Var<T>, alpha: T) -> Result<Var<T>> {
    let a = x.value();
    let positive: Vec<bool> = a.data().iter().map(|&v| v > T::zero()).collect();
    x.tape().note_branches(positive.iter().map(|&p| p as u64));
    let out: Vec<T> = a
        .data()
        .iter()
        .map(|&v| if v >= T::zero() { v } else { alpha * v })
        .collect();
    let backward = Box::new(move |g: &[T], _: &[bool]| {
        vec![Some(
            g.iter()
                .zip(&positive)
                .map(|(&gv, &p)| if p { gv } else { alpha * gv })
                .collect(),
        )]
    });
    x.tape().record(
        "leaky_relu",
        Tensor::from_parts(out, a.shape().to_vec()),
        &[x],
        backward,
    )
}

pub fn relu<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    leaky_relu(x, T::zero())
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Output positions `o` along one axis whose input `o * stride + tap - pad`
    /// lies inside `[0, size)`.
    fn valid(out: usize, size: usize, stride: usize, tap: usize, pad: usize) -> std::ops::Range<usize> {
        let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
        let hi = if size + pad > tap {
            ((size + pad - tap - 1) / stride + 1).min(out)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    /// Calls `f(column row, first output index, first input index, run length)`
    /// for every run of in-bounds taps along one output row. Input indices in
    /// a run step by the horizontal stride.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for ch in 0..self.c {
            for ki in 0..self.kh {
                let ys = Self::valid(self.oh, self.h, self.sh, ki, self.ph);
                for kj in 0..self.kw {
                    let r = (ch * self.kh + ki) * self.kw + kj;
                    let xs = Self::valid(self.ow, self.w, self.sw, kj, self.pw);
                    if xs.is_empty() {
                        continue;
                    }
                    for oy in ys.clone() {
                        let iy = oy * self.sh + ki - self.ph;
                        let base = (ch * self.h + iy) * self.w;
                        f(r, oy * self.ow + xs.start, base + xs.start * self.sw + kj - self.pw, xs.len());
                    }
                }
            }
        }
    }

    /// Column matrix `[K, P]` of one sample.
    fn im2col<T: Element>(&self, x: &[T]) -> Vec<T> {
        let (p, sw) = (self.p(), self.sw);
        let mut col = vec![T::zero(); self.k() * p];
        self.for_each_run(|r, q, s, len| {
            let dst = &mut col[r * p + q..r * p + q + len];
            if sw == 1 {
                dst.copy_from_slice(&x[s..s + len]);
            } else {
                dst.iter_mut().zip(x[s..].iter().step_by(sw)).for_each(|(d, &v)| *d = v);
            }
        });
        col
    }

    /// Transposed column matrix `[P, K]` of one sample.
    fn im2col_t<T: Element>(&self, x: &[T]) -> Vec<T> {
        let (k, sw) = (self.k(), self.sw);
        let mut col = vec![T::zero(); self.p() * k];
        self.for_each_run(|r, q, s, len| {
            for t in 0..len {
                col[(q + t) * k + r] = x[s + t * sw];
            }
        });
        col
    }

    fn col2im<T: Element>(&self, col: &[T]) -> Vec<T> {
        let (p, sw) = (self.p(), self.sw);
        let mut x = vec![T::zero(); self.c * self.h * self.w];
        self.for_each_run(|r, q, s, len| {
            let src = &col[r * p + q..r * p + q + len];
            if sw == 1 {
                x[s..s + len].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
            } else {
                x[s..].iter_mut().step_by(sw).zip(src).for_each(|(d, &v)| *d += v);
            }
        });
        x
    }
}

/// 2-D cross-correlation of `x: [N, C, H, W]` with `kernel: [O, C, kH, kW]`.
pub fn conv2d<T: Element>(
    x: &Var<T>,
    kernel: &Var<T>,
    bias: Option<&Var<T>>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Var<T>> {
    let (xv, kv) = (x.value(), kernel.value());
    let mismatch = || TensorError::ShapeMismatch {
        op: "conv2d",
        lhs: xv.shape().to_vec(),
        rhs: kv.shape().to_vec(),
    };
    if xv.ndim() != 4 || kv.ndim() != 4 || xv.shape()[1] != kv.shape()[1] {
        return Err(mismatch());
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(TensorError::InvalidArgument("stride must be positive".into()));
    }
    let bv = bias.map(|b| b.value());
    if let Some(b) = &bv {
        if b.shape() != [kv.shape()[0]] {
            return Err(mismatch());
        }
    }
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (o, kh, kw) = (kv.shape()[0], kv.shape()[2], kv.shape()[3]);
    let (ph0, ph1) = padding.amounts(kh);
    let (pw0, pw1) = padding.amounts(kw);
    if h + ph0 + ph1 < kh || w + pw0 + pw1 < kw {
        return Err(TensorError::KernelLargerThanInput {
            kernel: vec![kh, kw],
            input: vec![h + ph0 + ph1, w + pw0 + pw1],
        });
    }
    let geom = ConvGeom {
        n,
        c,
        h,
        w,
        kh,
        kw,
        sh: stride.0,
        sw: stride.1,
        ph: ph0,
        pw: pw0,
        oh: (h + ph0 + ph1 - kh) / stride.0 + 1,
        ow: (w + pw0 + pw1 - kw) / stride.1 + 1,
    };
    let (k, p) = (geom.k(), geom.p());
    let in_len = c * h * w;
    let mut out = vec![T::zero(); n * o * p];
    {
        let (xd, kd) = (xv.data(), kv.data());
        let bd = bv.as_ref().map(|b| b.data());
        out.par_chunks_mut(o * p).enumerate().for_each(|(s, dst)| {
            let col = geom.im2col(&xd[s * in_len..(s + 1) * in_len]);
            gemm_acc(o, k, p, kd, &col, dst);
            if let Some(b) = bd {
                for (row, &bv) in dst.chunks_mut(p).zip(b) {
                    row.iter_mut().for_each(|y| *y += bv);
                }
            }
        });
    }
    let out_shape = vec![n, o, geom.oh, geom.ow];
    let has_bias = bias.is_some();
    let backward = Box::new(move |g: &[T], needs: &[bool]| {
        let (xd, kd) = (xv.data(), kv.data());
        let need_x = needs[0];
        let need_k = needs[1];
        let need_b = has_bias && needs[2];
        let kt = if need_x { transpose(kd, o, k) } else { Vec::new() };
        let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..geom.n)
            .into_par_iter()
            .map(|s| {
                let gs = &g[s * o * p..(s + 1) * o * p];
                let xs = &xd[s * in_len..(s + 1) * in_len];
                let dk = need_k.then(|| {
                    // dK = g colT, summed over positions in increasing order
                    let col_t = geom.im2col_t(xs);
                    let mut dk = vec![T::zero(); o * k];
                    gemm_acc(o, p, k, gs, &col_t, &mut dk);
                    dk
                });
                let dx = need_x.then(|| {
                    let mut dcol = vec![T::zero(); k * p];
                    gemm_acc(k, o, p, &kt, gs, &mut dcol);
                    geom.col2im(&dcol)
                });
                (dx, dk)
            })
            .collect();

        let mut gx = need_x.then(|| Vec::with_capacity(geom.n * in_len));
        let mut gk = need_k.then(|| vec![T::zero(); o * k]);
        for (dx, dk) in per_sample {
            if let (Some(acc), Some(dx)) = (gx.as_mut(), dx) {
                acc.extend_from_slice(&dx);
            }
            if let (Some(acc), Some(dk)) = (gk.as_mut(), dk) {
                acc.iter_mut().zip(&dk).for_each(|(a, v)| *a += *v);
            }
        }
        let gb = need_b.then(|| {
            let mut gb = vec![T::zero(); o];
            for s in 0..geom.n {
                for (oc, b) in gb.iter_mut().enumerate() {
                    for &v in &g[(s * o + oc) * p..(s * o + oc + 1) * p] {
                        *b += v;
                    }
                }
            }
            gb
        });
        let mut grads = vec![gx, gk];
        if has_bias {
            grads.push(gb);
        }
        grads
    });
    let value = Tensor::from_parts(out, out_shape);
    match bias {
        Some(b) => x.tape().record("conv2d", value, &[x, kernel, b], backward),
        None => x.tape().record("conv2d", value, &[x, kernel], backward),
    }
}

/// Channel layout of a batch-norm input: `[N, C, H, W]` or `[N, F]`.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [n, c] => Some((n, c, 1)),
        [n, c, h, w] => Some((n, c, h * w)),
        _ => None,
    }
}

fn check_channel_params<T: Element>(x: &Tensor<T>, params: &[&Tensor<T>]) -> Result<usize> {
    let (_, c, _) = channel_layout(x.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op: "batch_norm",
        lhs: x.shape().to_vec(),
        rhs: vec![],
    })?;
    for p in params {
        if p.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    Ok(c)
}

/// Per-channel batch mean and biased variance of a train-mode normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Train-mode batch normalization with batch statistics (biased variance).
pub fn batch_norm_train<T: Element>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    eps: T,
) -> Result<(Var<T>, BatchStats<T>)> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    check_channel_params(&xv, &[&gv, &bv])?;
    let (n, c, hw) = channel_layout(xv.shape()).expect("checked");
    let count = n * hw;
    if count < 2 {
        return Err(TensorError::DegenerateBatch { count });
    }
    let xd = xv.data();
    let at = move |s: usize, ch: usize, i: usize| (s * c + ch) * hw + i;
    let cnt = T::of(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for s in 0..n {
            for i in 0..hw {
                acc += xd[at(s, ch, i)];
            }
        }
        let m = acc / cnt;
        let mut sq = T::zero();
        for s in 0..n {
            for i in 0..hw {
                let d = xd[at(s, ch, i)] - m;
                sq += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = sq / cnt;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    let (gd, bd) = (gv.data(), bv.data());
    for s in 0..n {
        for ch in 0..c {
            for i in 0..hw {
                let j = at(s, ch, i);
                xhat[j] = (xd[j] - mean[ch]) * inv_std[ch];
                out[j] = gd[ch] * xhat[j] + bd[ch];
            }
        }
    }
    let backward = Box::new(move |g: &[T], needs: &[bool]| {
        let gd = gv.data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                for i in 0..hw {
                    let j = at(s, ch, i);
                    sum_g[ch] += g[j];
                    sum_gx[ch] += g[j] * xhat[j];
                }
            }
        }
        let gx = needs[0].then(|| {
            let mut gx = vec![T::zero(); g.len()];
            for s in 0..n {
                for ch in 0..c {
                    let scale = gd[ch] * inv_std[ch];
                    let (mg, mgx) = (sum_g[ch] / cnt, sum_gx[ch] / cnt);
                    for i in 0..hw {
                        let j = at(s, ch, i);
                        gx[j] = scale * (g[j] - mg - xhat[j] * mgx);
                    }
                }
            }
            gx
        });
        vec![gx, needs[1].then(|| sum_gx.clone()), needs[2].then(|| sum_g.clone())]
    });
    let y = x.tape().record(
        "batch_norm",
        Tensor::from_parts(out, xv.shape().to_vec()),
        &[x, gamma, beta],
        backward,
    )?;
    Ok((y, BatchStats { mean, var }))
}

/// Inference-mode batch normalization with fixed running statistics.
pub fn batch_norm_infer<T: Element>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Var<T>> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    check_channel_params(&xv, &[&gv, &bv, running_mean, running_var])?;
    let (n, c, hw) = channel_layout(xv.shape()).expect("checked");
    let at = move |s: usize, ch: usize, i: usize| (s * c + ch) * hw + i;
    let (rm, rv) = (running_mean.data().to_vec(), running_var.data());
    let inv_std: Vec<T> = rv.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let xd = xv.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    let (gd, bd) = (gv.data(), bv.data());
    for s in 0..n {
        for ch in 0..c {
            for i in 0..hw {
                let j = at(s, ch, i);
                xhat[j] = (xd[j] - rm[ch]) * inv_std[ch];
                out[j] = gd[ch] * xhat[j] + bd[ch];
            }
        }
    }
    let backward = Box::new(move |g: &[T], needs: &[bool]| {
        let gd = gv.data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        let mut gx = vec![T::zero(); g.len()];
        for s in 0..n {
            for ch in 0..c {
                for i in 0..hw {
                    let j = at(s, ch, i);
                    sum_g[ch] += g[j];
                    sum_gx[ch] += g[j] * xhat[j];
                    gx[j] = g[j] * gd[ch] * inv_std[ch];
                }
            }
        }
        vec![
            needs[0].then_some(gx),
            needs[1].then_some(sum_gx),
            needs[2].then_some(sum_g),
        ]
    });
    x.tape().record(
        "batch_norm",
        Tensor::from_parts(out, xv.shape().to_vec()),
        &[x, gamma, beta],
        backward,
    )
}

/// Max pooling without padding. Ties go to the first element in row-major
/// order within the window, which also receives the whole gradient.
pub fn max_pool2d<T: Element>(
    x: &Var<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Var<T>> {
    let xv = x.value();
    if xv.ndim() != 4
        || window.0 == 0
        || window.1 == 0
        || window.0 > xv.shape()[2]
        || window.1 > xv.shape()[3]
        || stride.0 == 0
        || stride.1 == 0
    {
        return Err(TensorError::ShapeMismatch {
            op: "max_pool2d",
            lhs: xv.shape().to_vec(),
            rhs: vec![window.0, window.1],
        });
    }
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let oh = (h - window.0) / stride.0 + 1;
    let ow = (w - window.1) / stride.1 + 1;
    let xd = xv.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride.0 * w + ox * stride.1;
                for dy in 0..window.0 {
                    for dx in 0..window.1 {
                        let j = base + (oy * stride.0 + dy) * w + ox * stride.1 + dx;
                        if xd[j] > xd[best] {
                            best = j;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    x.tape().note_branches(arg.iter().map(|&i| i as u64));
    let len = xd.len();
    let backward = Box::new(move |g: &[T], _: &[bool]| {
        let mut gx = vec![T::zero(); len];
        for (gv, &j) in g.iter().zip(&arg) {
            gx[j] += *gv;
        }
        vec![Some(gx)]
    });
    x.tape().record(
        "max_pool2d",
        Tensor::from_parts(out, vec![n, c, oh, ow]),
        &[x],
        backward,
    )
}

/// Spatial mean of `[N, C, H, W]`, giving `[N, C]`.
pub fn global_avg_pool<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "global_avg_pool",
            lhs: shape,
            rhs: vec![],
        });
    }
    x.reduce(ReduceOp::Mean, Axes::List(vec![2, 3]))
}

/// Row-wise softmax of `[N, K]` with max subtraction.
pub fn softmax<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    let xv = x.value();
    let [n, k] = *xv.shape() else {
        return Err(TensorError::ShapeMismatch {
            op: "softmax",
            lhs: xv.shape().to_vec(),
            rhs: vec![],
        });
    };
    let xd = xv.data();
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let row = &xd[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let dst = &mut out[i * k..(i + 1) * k];
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / total);
    }
    let y = out.clone();
    let backward = Box::new(move |g: &[T], _: &[bool]| {
        let mut gx = vec![T::zero(); n * k];
        for i in 0..n {
            let (yr, gr) = (&y[i * k..(i + 1) * k], &g[i * k..(i + 1) * k]);
            let mut dot = T::zero();
            for (a, b) in yr.iter().zip(gr) {
                dot += *a * *b;
            }
            for j in 0..k {
                gx[i * k + j] = yr[j] * (gr[j] - dot);
            }
        }
        vec![Some(gx)]
    });
    x.tape().record(
        "softmax",
        Tensor::from_parts(out, vec![n, k]),
        &[x],
        backward,
    )
}

/// Floor applied to probabilities before taking the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// `-mean(log(max(p[i, label_i], 1e-12)))` over rows of a probability matrix.
pub fn cross_entropy<T: Element>(probs: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
    let pv = probs.value();
    let [n, k] = *pv.shape() else {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            lhs: pv.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    };
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            lhs: pv.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let pd = pv.data();
    let tol = 1e-6_f64.max(k as f64 * T::epsilon().as_f64());
    for i in 0..n {
        let sum: f64 = pd[i * k..(i + 1) * k].iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > tol {
            return Err(TensorError::NotADistribution { row: i, sum });
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    let floor = T::of(LOG_FLOOR);
    let picked: Vec<T> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| pd[i * k + l])
        .collect();
    let clamped: Vec<bool> = picked.iter().map(|&p| p <= floor).collect();
    probs.tape().note_branches(clamped.iter().map(|&c| c as u64));
    let mut total = T::zero();
    for &p in &picked {
        total += p.max(floor).ln();
    }
    let nt = T::of(n as f64);
    let loss = -total / nt;
    let labels = labels.to_vec();
    let backward = Box::new(move |g: &[T], _: &[bool]| {
        let mut gp = vec![T::zero(); n * k];
        for (i, &l) in labels.iter().enumerate() {
            if !clamped[i] {
                gp[i * k + l] = -g[0] / (nt * picked[i]);
            }
        }
        vec![Some(gp)]
    });
    probs
        .tape()
        .record("cross_entropy", Tensor::scalar(loss), &[probs], backward)
}
