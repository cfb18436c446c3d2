//! Layer primitives and residual blocks.
//!
//! Layers own their parameters as detached [`Tensor`]s. A forward pass binds
//! each parameter to a tape leaf through [`ForwardCtx`]; trainable parameters
//! in train mode become gradient-carrying leaves and are remembered so the
//! caller can collect their gradients after `backward`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{rng_from, str_word};
use crate::tensor::{self, Element, Padding, Result, Tape, Tensor, TensorError, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Element> Param<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        Self {
            name,
            value,
            trainable: true,
        }
    }
}

/// Gradients keyed by parameter name.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

/// Deterministic parameter initializer. Every tensor draws from its own
/// stream derived from the model seed and the parameter name, so values do
/// not depend on construction order.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    /// Fan-in scaled normal, `std = sqrt(2 / fan_in)`.
    pub fn he_normal<T: Element>(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut rng = rng_from(&[self.seed, str_word(name)]);
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
        Tensor::new(data, shape).expect("valid init shape")
    }

    fn constant<T: Element>(shape: &[usize], v: f64) -> Tensor<T> {
        Tensor::full(shape, T::of(v)).expect("valid init shape")
    }
}

/// Per-pass state: tape, mode, dropout randomness and parameter bindings.
pub struct ForwardCtx<'t, T: Element> {
    pub tape: &'t Tape<T>,
    pub mode: Mode,
    rng: ChaCha8Rng,
    bindings: Vec<(String, Var<T>)>,
}

impl<'t, T: Element> ForwardCtx<'t, T> {
    pub fn new(tape: &'t Tape<T>, mode: Mode, dropout_seed: u64) -> Self {
        Self {
            tape,
            mode,
            rng: rng_from(&[dropout_seed]),
            bindings: Vec::new(),
        }
    }

    pub fn bind(&mut self, p: &Param<T>) -> Var<T> {
        let requires_grad = p.trainable && self.mode == Mode::Train;
        let v = self.tape.leaf(p.value.clone(), requires_grad);
        if requires_grad {
            self.bindings.push((p.name.clone(), v.clone()));
        }
        v
    }

    /// Gradients of every bound trainable parameter after a backward sweep.
    pub fn gradients(&self) -> Gradients<T> {
        self.bindings
            .iter()
            .filter_map(|(name, v)| v.grad().map(|g| (name.clone(), g)))
            .collect()
    }

    pub fn has_trainable_bindings(&self) -> bool {
        !self.bindings.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T: Element> {
    pub kernel: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl<T: Element> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        bias: bool,
        init: &Init,
    ) -> Self {
        let kname = format!("{name}.kernel");
        let shape = [out_ch, in_ch, kernel.0, kernel.1];
        let k = init.he_normal(&kname, &shape, in_ch * kernel.0 * kernel.1);
        Self {
            kernel: Param::new(kname, k),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Init::constant(&[out_ch], 0.0))),
            stride,
            padding,
        }
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let k = ctx.bind(&self.kernel);
        let b = self.bias.as_ref().map(|b| ctx.bind(b));
        tensor::conv2d(x, &k, b.as_ref(), self.stride, self.padding)
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.value.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Init::constant(&[channels], 1.0)),
            beta: Param::new(format!("{name}.beta"), Init::constant(&[channels], 0.0)),
            running_mean: Init::constant(&[channels], 0.0),
            running_var: Init::constant(&[channels], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        }
    }

    pub fn name(&self) -> &str {
        self.gamma.name.strip_suffix(".gamma").unwrap_or(&self.gamma.name)
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    /// Batch statistics are used only in train mode and only while at least
    /// one of gamma/beta is trainable; a fully frozen layer normalizes with
    /// its running statistics and leaves them untouched.
    pub fn effective_mode(&self, mode: Mode) -> Mode {
        if mode == Mode::Train && (self.gamma.trainable || self.beta.trainable) {
            Mode::Train
        } else {
            Mode::Infer
        }
    }

    pub fn forward(&mut self, ctx: &mut ForwardCtx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let g = ctx.bind(&self.gamma);
        let b = ctx.bind(&self.beta);
        let eps = T::of(self.eps);
        match self.effective_mode(ctx.mode) {
            Mode::Train => {
                let (y, stats) = tensor::batch_norm_train(x, &g, &b, eps)?;
                let m = T::of(self.momentum);
                let keep = T::one() - m;
                let rm = self.running_mean.data_mut();
                for (r, s) in rm.iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * *s;
                }
                let rv = self.running_var.data_mut();
                for (r, s) in rv.iter_mut().zip(&stats.var) {
                    *r = keep * *r + m * *s;
                }
                Ok(y)
            }
            Mode::Infer => {
                tensor::batch_norm_infer(x, &g, &b, &self.running_mean, &self.running_var, eps)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Element> {
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> Dense<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, init: &Init) -> Self {
        let wname = format!("{name}.weight");
        let w = init.he_normal(&wname, &[outputs, inputs], inputs);
        Self {
            weight: Param::new(wname, w),
            bias: Param::new(format!("{name}.bias"), Init::constant(&[outputs], 0.0)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// `y = x W^T + b`
    pub fn forward(&self, ctx: &mut ForwardCtx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.bind(&self.weight);
        let b = ctx.bind(&self.bias);
        x.matmul(&w.transpose()?)?.add(&b)
    }
}

/// Inverted dropout: kept elements are scaled by `1 / (1 - rate)` so that
/// inference is the identity.
pub fn dropout<T: Element>(ctx: &mut ForwardCtx<'_, T>, x: &Var<T>, rate: f64) -> Result<Var<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if ctx.mode == Mode::Infer || rate == 0.0 {
        return Ok(x.clone());
    }
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..n)
        .map(|_| {
            if ctx.rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let mask = ctx.tape.constant(Tensor::new(mask, &shape)?);
    x.mul(&mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand (x4).
    Bottleneck,
}

/// `out = relu(F(x) + shortcut(x))`, with a 1x1 projection shortcut exactly
/// when the channel count or stride changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T: Element> {
    pub kind: BlockKind,
    pub main: Vec<Layer<T>>,
    pub shortcut: Vec<Layer<T>>,
    pub stride: usize,
}

pub const BOTTLENECK_EXPANSION: usize = 4;

impl<T: Element> ResidualBlock<T> {
    /// `width` is the output width of a basic block, or the inner width of a
    /// bottleneck block (which outputs `4 * width`).
    pub fn new(
        name: &str,
        kind: BlockKind,
        in_ch: usize,
        width: usize,
        stride: usize,
        init: &Init,
    ) -> Self {
        let conv = |suffix: &str, i, o, k: usize, s: usize| {
            Layer::Conv(Conv2d::new(
                &format!("{name}.{suffix}"),
                i,
                o,
                (k, k),
                (s, s),
                Padding::Same,
                false,
                init,
            ))
        };
        let bn = |suffix: &str, c| Layer::BatchNorm(BatchNorm::new(&format!("{name}.{suffix}"), c));
        let (main, out_ch) = match kind {
            BlockKind::Basic => (
                vec![
                    conv("conv1", in_ch, width, 3, stride),
                    bn("bn1", width),
                    Layer::Relu,
                    conv("conv2", width, width, 3, 1),
                    bn("bn2", width),
                ],
                width,
            ),
            BlockKind::Bottleneck => {
                let out = width * BOTTLENECK_EXPANSION;
                (
                    vec![
                        conv("conv1", in_ch, width, 1, 1),
                        bn("bn1", width),
                        Layer::Relu,
                        conv("conv2", width, width, 3, stride),
                        bn("bn2", width),
                        Layer::Relu,
                        conv("conv3", width, out, 1, 1),
                        bn("bn3", out),
                    ],
                    out,
                )
            }
        };
        let shortcut = if in_ch != out_ch || stride != 1 {
            vec![
                Layer::Conv(Conv2d::new(
                    &format!("{name}.proj"),
                    in_ch,
                    out_ch,
                    (1, 1),
                    (stride, stride),
                    Padding::Valid,
                    false,
                    init,
                )),
                bn("proj_bn", out_ch),
            ]
        } else {
            Vec::new()
        };
        Self {
            kind,
            main,
            shortcut,
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        match &self.main[0] {
            Layer::Conv(c) => c.in_channels(),
            _ => unreachable!("blocks start with a convolution"),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.main
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::BatchNorm(b) => Some(b.channels()),
                _ => None,
            })
            .expect("blocks end with batch norm")
    }

    pub fn forward(&mut self, ctx: &mut ForwardCtx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let mut main = x.clone();
        for layer in &mut self.main {
            main = layer.forward(ctx, &main)?;
        }
        let mut short = x.clone();
        for layer in &mut self.shortcut {
            short = layer.forward(ctx, &short)?;
        }
        if main.shape() != short.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "residual_add",
                lhs: main.shape(),
                rhs: short.shape(),
            });
        }
        tensor::relu(&main.add(&short)?)
    }
}

/// Serializable description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    LeakyRelu {
        alpha: f64,
    },
    Dropout {
        rate: f64,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    GlobalAvgPool,
    MaxPool2d {
        window: (usize, usize),
        stride: (usize, usize),
    },
    Softmax,
    Residual {
        kind: BlockKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        projection: bool,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::MaxPool2d { .. } => "max_pool2d",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Residual { .. } => "residual",
        }
    }

    /// Output shape (without the batch dimension) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        let conv_out = |size: usize, k: usize, s: usize, pad: usize| -> Option<usize> {
            (size + pad >= k).then(|| (size + pad - k) / s + 1)
        };
        match (self, input) {
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                [c, h, w],
            ) if c == in_channels => {
                let (ph, pw) = match padding {
                    Padding::Valid => (0, 0),
                    Padding::Same => (kernel.0 - 1, kernel.1 - 1),
                };
                Some(vec![
                    *out_channels,
                    conv_out(*h, kernel.0, stride.0, ph)?,
                    conv_out(*w, kernel.1, stride.1, pw)?,
                ])
            }
            (LayerSpec::BatchNorm { channels }, [c, ..]) if c == channels => Some(input.to_vec()),
            (LayerSpec::Relu | LayerSpec::LeakyRelu { .. } | LayerSpec::Dropout { .. }, _) => {
                Some(input.to_vec())
            }
            (LayerSpec::Dense { inputs, outputs }, [f]) if f == inputs => Some(vec![*outputs]),
            (LayerSpec::GlobalAvgPool, [c, _, _]) => Some(vec![*c]),
            (LayerSpec::MaxPool2d { window, stride }, [c, h, w]) => Some(vec![
                *c,
                conv_out(*h, window.0, stride.0, 0)?,
                conv_out(*w, window.1, stride.1, 0)?,
            ]),
            (LayerSpec::Softmax, [_]) => Some(input.to_vec()),
            (
                LayerSpec::Residual {
                    in_channels,
                    out_channels,
                    stride,
                    ..
                },
                [c, h, w],
            ) if c == in_channels => Some(vec![
                *out_channels,
                conv_out(*h, 3, *stride, 2)?,
                conv_out(*w, 3, *stride, 2)?,
            ]),
            _ => None,
        }
    }
}

/// What a parameterized-layer entry holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Conv,
    Dense,
    BnGamma,
    BnBeta,
}

/// One unit of the freeze/unfreeze index: a convolution (kernel and bias), a
/// dense layer (weight and bias), or one of a batch norm's gamma/beta.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub kind: EntryKind,
    pub params: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Element> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    LeakyRelu(f64),
    Dropout(f64),
    Dense(Dense<T>),
    GlobalAvgPool,
    MaxPool2d {
        window: (usize, usize),
        stride: (usize, usize),
    },
    Softmax,
    Residual(Box<ResidualBlock<T>>),
}

impl<T: Element> Layer<T> {
    pub fn forward(&mut self, ctx: &mut ForwardCtx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Layer::Conv(c) => c.forward(ctx, x),
            Layer::BatchNorm(b) => b.forward(ctx, x),
            Layer::Relu => tensor::relu(x),
            Layer::LeakyRelu(alpha) => tensor::leaky_relu(x, T::of(*alpha)),
            Layer::Dropout(rate) => dropout(ctx, x, *rate),
            Layer::Dense(d) => d.forward(ctx, x),
            Layer::GlobalAvgPool => tensor::global_avg_pool(x),
            Layer::MaxPool2d { window, stride } => tensor::max_pool2d(x, *window, *stride),
            Layer::Softmax => tensor::softmax(x),
            Layer::Residual(r) => r.forward(ctx, x),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => {
                let s = c.kernel.value.shape();
                LayerSpec::Conv2d {
                    in_channels: s[1],
                    out_channels: s[0],
                    kernel: (s[2], s[3]),
                    stride: c.stride,
                    padding: c.padding,
                    bias: c.bias.is_some(),
                }
            }
            Layer::BatchNorm(b) => LayerSpec::BatchNorm {
                channels: b.channels(),
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::LeakyRelu(alpha) => LayerSpec::LeakyRelu { alpha: *alpha },
            Layer::Dropout(rate) => LayerSpec::Dropout { rate: *rate },
            Layer::Dense(d) => LayerSpec::Dense {
                inputs: d.inputs(),
                outputs: d.outputs(),
            },
            Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
            Layer::MaxPool2d { window, stride } => LayerSpec::MaxPool2d {
                window: *window,
                stride: *stride,
            },
            Layer::Softmax => LayerSpec::Softmax,
            Layer::Residual(r) => LayerSpec::Residual {
                kind: r.kind,
                in_channels: r.in_channels(),
                out_channels: r.out_channels(),
                stride: r.stride,
                projection: !r.shortcut.is_empty(),
            },
        }
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            Layer::Conv(c) => {
                f(&c.kernel);
                if let Some(b) = &c.bias {
                    f(b);
                }
            }
            Layer::BatchNorm(b) => {
                f(&b.gamma);
                f(&b.beta);
            }
            Layer::Dense(d) => {
                f(&d.weight);
                f(&d.bias);
            }
            Layer::Residual(r) => r
                .main
                .iter()
                .chain(&r.shortcut)
                .for_each(|l| l.visit_params(f)),
            _ => {}
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Layer::Conv(c) => {
                f(&mut c.kernel);
                if let Some(b) = &mut c.bias {
                    f(b);
                }
            }
            Layer::BatchNorm(b) => {
                f(&mut b.gamma);
                f(&mut b.beta);
            }
            Layer::Dense(d) => {
                f(&mut d.weight);
                f(&mut d.bias);
            }
            Layer::Residual(r) => r
                .main
                .iter_mut()
                .chain(r.shortcut.iter_mut())
                .for_each(|l| l.visit_params_mut(f)),
            _ => {}
        }
    }

    /// Non-trainable state tensors (batch-norm running statistics).
    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            Layer::BatchNorm(b) => {
                let name = b.name().to_string();
                f(format!("{name}.running_mean"), &mut b.running_mean);
                f(format!("{name}.running_var"), &mut b.running_var);
            }
            Layer::Residual(r) => r
                .main
                .iter_mut()
                .chain(r.shortcut.iter_mut())
                .for_each(|l| l.visit_buffers_mut(f)),
            _ => {}
        }
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        match self {
            Layer::BatchNorm(b) => {
                let name = b.name().to_string();
                f(format!("{name}.running_mean"), &b.running_mean);
                f(format!("{name}.running_var"), &b.running_var);
            }
            Layer::Residual(r) => r
                .main
                .iter()
                .chain(&r.shortcut)
                .for_each(|l| l.visit_buffers(f)),
            _ => {}
        }
    }

    /// Appends this layer's parameterized entries in topological order.
    pub fn entries(&self, out: &mut Vec<LayerEntry>) {
        match self {
            Layer::Conv(c) => out.push(LayerEntry {
                kind: EntryKind::Conv,
                params: std::iter::once(&c.kernel)
                    .chain(&c.bias)
                    .map(|p| p.name.clone())
                    .collect(),
            }),
            Layer::Dense(d) => out.push(LayerEntry {
                kind: EntryKind::Dense,
                params: vec![d.weight.name.clone(), d.bias.name.clone()],
            }),
            Layer::BatchNorm(b) => {
                out.push(LayerEntry {
                    kind: EntryKind::BnGamma,
                    params: vec![b.gamma.name.clone()],
                });
                out.push(LayerEntry {
                    kind: EntryKind::BnBeta,
                    params: vec![b.beta.name.clone()],
                });
            }
            Layer::Residual(r) => r
                .main
                .iter()
                .chain(&r.shortcut)
                .for_each(|l| l.entries(out)),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn infer_ctx(tape: &Tape<f64>) -> ForwardCtx<'_, f64> {
        ForwardCtx::new(tape, Mode::Infer, 0)
    }

    #[test]
    fn dense_identity_and_arithmetic() {
        let tape = Tape::new();
        let init = Init { seed: 1 };
        let mut d = Dense::<f64>::new("d", 2, 2, &init);
        d.weight.value = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let x = tape.constant(Tensor::new(vec![3.0, -4.0], &[1, 2]).unwrap());
        let mut ctx = infer_ctx(&tape);
        assert_eq!(d.forward(&mut ctx, &x).unwrap().value().data(), &[3.0, -4.0]);

        let mut d = Dense::<f64>::new("e", 2, 1, &init);
        d.weight.value = Tensor::new(vec![2.0, 3.0], &[1, 2]).unwrap();
        d.bias.value = Tensor::new(vec![1.0], &[1]).unwrap();
        let x = tape.constant(Tensor::new(vec![1.0, 1.0], &[1, 2]).unwrap());
        assert_eq!(d.forward(&mut ctx, &x).unwrap().value().data(), &[6.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1.5, -2.0, 0.25], &[1, 3]).unwrap());
        let mut ctx = infer_ctx(&tape);
        assert!(dropout(&mut ctx, &x, 0.4).unwrap().value().bit_eq(&x.value()));
        let mut ctx = ForwardCtx::new(&tape, Mode::Train, 9);
        assert!(dropout(&mut ctx, &x, 0.0).unwrap().value().bit_eq(&x.value()));
        assert!(dropout(&mut ctx, &x, 1.0).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let tape = Tape::<f64>::new();
        let n = 1_000_000;
        let x = tape.constant(Tensor::ones(&[1, n]).unwrap());
        let mut ctx = ForwardCtx::new(&tape, Mode::Train, 42);
        let y = dropout(&mut ctx, &x, 0.3).unwrap().value();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
        let kept = y.data().iter().filter(|&&v| v > 0.0).count() as f64 / n as f64;
        assert!((kept - 0.7).abs() < 0.005);
    }

    #[test]
    fn batch_norm_updates_running_stats_with_momentum() {
        let tape = Tape::new();
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        let x = tape.constant(Tensor::new(vec![1.0, 3.0], &[2, 1]).unwrap());
        let mut ctx = ForwardCtx::new(&tape, Mode::Train, 0);
        bn.forward(&mut ctx, &x).unwrap();
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn frozen_batch_norm_uses_running_stats() {
        let tape = Tape::new();
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        bn.gamma.trainable = false;
        bn.beta.trainable = false;
        let before = bn.clone();
        let x = tape.constant(Tensor::new(vec![1.0, 3.0], &[2, 1]).unwrap());
        let mut ctx = ForwardCtx::new(&tape, Mode::Train, 0);
        let y = bn.forward(&mut ctx, &x).unwrap().value();
        assert_eq!(bn, before);
        assert!((y.data()[1] - 3.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_branch_block_is_relu_of_input() {
        let init = Init { seed: 5 };
        let mut block = ResidualBlock::<f64>::new("b", BlockKind::Basic, 2, 2, 1, &init);
        assert!(block.shortcut.is_empty());
        for layer in &mut block.main {
            if let Layer::Conv(c) = layer {
                c.kernel.value = Tensor::zeros(c.kernel.value.shape()).unwrap();
            }
        }
        let tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| (i as f64 - 8.0) * 0.37).collect();
        let x = tape.constant(Tensor::new(data.clone(), &[1, 2, 3, 3]).unwrap());
        let mut ctx = infer_ctx(&tape);
        let y = block.forward(&mut ctx, &x).unwrap().value();
        let expect: Vec<f64> = data.iter().map(|&v| v.max(0.0)).collect();
        assert_eq!(y.data(), &expect[..]);
    }

    #[test]
    fn projection_exists_iff_shape_changes() {
        let init = Init { seed: 1 };
        assert!(ResidualBlock::<f32>::new("a", BlockKind::Basic, 8, 8, 1, &init)
            .shortcut
            .is_empty());
        assert!(!ResidualBlock::<f32>::new("b", BlockKind::Basic, 8, 8, 2, &init)
            .shortcut
            .is_empty());
        assert!(!ResidualBlock::<f32>::new("c", BlockKind::Basic, 8, 16, 1, &init)
            .shortcut
            .is_empty());
        let bott = ResidualBlock::<f32>::new("d", BlockKind::Bottleneck, 256, 64, 1, &init);
        assert!(bott.shortcut.is_empty());
        assert_eq!(bott.out_channels(), 256);
    }

    #[test]
    fn entries_split_batch_norm_into_gamma_and_beta() {
        let init = Init { seed: 1 };
        let layer = Layer::Residual(Box::new(ResidualBlock::<f32>::new(
            "blk",
            BlockKind::Basic,
            4,
            8,
            2,
            &init,
        )));
        let mut entries = Vec::new();
        layer.entries(&mut entries);
        let kinds: Vec<EntryKind> = entries.iter().map(|e| e.kind).collect();
        use EntryKind::*;
        assert_eq!(
            kinds,
            vec![Conv, BnGamma, BnBeta, Conv, BnGamma, BnBeta, Conv, BnGamma, BnBeta]
        );
    }

    #[test]
    fn init_is_order_independent_and_reproducible() {
        let init = Init { seed: 77 };
        let a: Tensor<f64> = init.he_normal("x.kernel", &[4, 3], 3);
        let _: Tensor<f64> = init.he_normal("y.kernel", &[4, 3], 3);
        let b: Tensor<f64> = init.he_normal("x.kernel", &[4, 3], 3);
        assert!(a.bit_eq(&b));
    }
}
