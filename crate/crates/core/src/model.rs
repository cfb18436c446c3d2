//! Backbone presets, the classification head, freeze control and parameter
//! accounting.
//!
//! The parameterized-layer index list is the unit for freeze policies: one
//! entry per convolution, one per dense layer and one each for a batch
//! norm's gamma and beta, in topological order with the head at the tail.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{
    BlockKind, BatchNorm, Conv2d, Dense, EntryKind, ForwardCtx, Init, Layer, LayerEntry, LayerSpec,
    Mode, Param, ResidualBlock,
};
use crate::rng::{derive_seed, str_word};
use crate::tensor::{Element, Padding, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("input {got:?} is too small for the {preset} preset (minimum spatial size {min})")]
    InputTooSmall {
        preset: Preset,
        min: usize,
        got: (usize, usize, usize),
    },
    #[error("model already has a classification head")]
    AlreadyHasHead,
    #[error("model has no classification head")]
    NoHead,
    #[error("cannot unfreeze the last {k} of {total} parameterized layers")]
    KOutOfRange { k: usize, total: usize },
    #[error("invalid head: {0}")]
    InvalidHead(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Bottleneck stages of 3, 4, 6 and 3 blocks.
    Resnet50,
    /// Three stages of two basic blocks at widths 16, 32 and 64.
    Mini,
    /// No backbone layers; features are the raw input.
    Identity,
}

impl Preset {
    pub fn min_spatial(self) -> usize {
        match self {
            Preset::Resnet50 => 32,
            Preset::Mini => 16,
            Preset::Identity => 1,
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Resnet50 => "resnet50",
            Preset::Mini => "mini",
            Preset::Identity => "identity",
        })
    }
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "resnet50" => Ok(Preset::Resnet50),
            "mini" => Ok(Preset::Mini),
            "identity" => Ok(Preset::Identity),
            other => Err(format!("unknown preset '{other}' (resnet50, mini, identity)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputSpec {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub widths: [usize; 2],
    pub dropout: [f64; 2],
    pub leaky_alpha: f64,
    pub classes: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            widths: [128, 64],
            dropout: [0.3, 0.4],
            leaky_alpha: 0.01,
            classes: 41,
        }
    }
}

impl HeadSpec {
    pub fn with_classes(classes: usize) -> Self {
        Self {
            classes,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(ModelError::InvalidHead("widths must be positive".into()));
        }
        if self.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(ModelError::InvalidHead("dropout rates must be in [0, 1)".into()));
        }
        if self.classes < 2 {
            return Err(ModelError::InvalidHead("at least 2 classes are required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadConfig {
    /// Pooling, two regularized dense blocks and a softmax classifier.
    Custom(HeadSpec),
    /// Pooling, one dense layer and softmax.
    Linear { classes: usize },
}

impl HeadConfig {
    pub fn classes(&self) -> usize {
        match self {
            HeadConfig::Custom(h) => h.classes,
            HeadConfig::Linear { classes } => *classes,
        }
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub preset: Preset,
    pub input: InputSpec,
    pub head: Option<HeadConfig>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainablePolicy {
    FreezeAll,
    UnfreezeAll,
    UnfreezeLastK(usize),
    HeadOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EntrySummary {
    pub index: usize,
    pub kind: EntryKind,
    pub params: Vec<String>,
    pub count: usize,
    pub trainable: bool,
    pub in_head: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParameterSummary {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub per_layer: Vec<EntrySummary>,
}

/// Dropout stream position, persisted with checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T: Element> {
    arch: Architecture,
    backbone: Vec<Layer<T>>,
    head: Vec<Layer<T>>,
    rng: RngState,
}

fn conv<T: Element>(
    name: &str,
    i: usize,
    o: usize,
    k: usize,
    s: usize,
    init: &Init,
) -> Layer<T> {
    Layer::Conv(Conv2d::new(name, i, o, (k, k), (s, s), Padding::Same, false, init))
}

fn resnet50<T: Element>(c: usize, init: &Init) -> Vec<Layer<T>> {
    let mut layers = vec![
        conv("stem.conv", c, 64, 7, 2, init),
        Layer::BatchNorm(BatchNorm::new("stem.bn", 64)),
        Layer::Relu,
        Layer::MaxPool2d {
            window: (3, 3),
            stride: (2, 2),
        },
    ];
    let mut in_ch = 64;
    for (stage, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
        for b in 0..blocks {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let block = ResidualBlock::new(
                &format!("stage{}.block{}", stage + 1, b + 1),
                BlockKind::Bottleneck,
                in_ch,
                width,
                stride,
                init,
            );
            in_ch = block.out_channels();
            layers.push(Layer::Residual(Box::new(block)));
        }
    }
    layers
}

fn mini<T: Element>(c: usize, init: &Init) -> Vec<Layer<T>> {
    let mut layers = vec![
        conv("stem.conv", c, 16, 3, 1, init),
        Layer::BatchNorm(BatchNorm::new("stem.bn", 16)),
        Layer::Relu,
    ];
    let mut in_ch = 16;
    for (stage, &width) in [16usize, 32, 64].iter().enumerate() {
        for b in 0..2 {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            layers.push(Layer::Residual(Box::new(ResidualBlock::new(
                &format!("stage{}.block{}", stage + 1, b + 1),
                BlockKind::Basic,
                in_ch,
                width,
                stride,
                init,
            ))));
            in_ch = width;
        }
    }
    layers
}

impl<T: Element> ModelGraph<T> {
    pub fn build_backbone(preset: Preset, input: InputSpec, seed: u64) -> Result<Self> {
        let min = preset.min_spatial();
        if input.height < min || input.width < min || input.channels == 0 {
            return Err(ModelError::InputTooSmall {
                preset,
                min,
                got: (input.channels, input.height, input.width),
            });
        }
        let init = Init { seed };
        let backbone = match preset {
            Preset::Resnet50 => resnet50(input.channels, &init),
            Preset::Mini => mini(input.channels, &init),
            Preset::Identity => Vec::new(),
        };
        Ok(Self {
            arch: Architecture {
                preset,
                input,
                head: None,
                seed,
            },
            backbone,
            head: Vec::new(),
            rng: RngState {
                seed: derive_seed(&[seed, str_word("dropout")]),
                counter: 0,
            },
        })
    }

    pub fn from_architecture(arch: &Architecture) -> Result<Self> {
        let mut m = Self::build_backbone(arch.preset, arch.input, arch.seed)?;
        match &arch.head {
            Some(HeadConfig::Custom(h)) => m.attach_head(h)?,
            Some(HeadConfig::Linear { classes }) => m.attach_linear_head(*classes)?,
            None => {}
        }
        Ok(m)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn has_head(&self) -> bool {
        self.arch.head.is_some()
    }

    pub fn classes(&self) -> Option<usize> {
        self.arch.head.as_ref().map(HeadConfig::classes)
    }

    /// Backbone output shape `[C, H, W]`.
    pub fn feature_shape(&self) -> Vec<usize> {
        let mut shape = self.arch.input.dims().to_vec();
        for layer in &self.backbone {
            shape = layer
                .spec()
                .output_shape(&shape)
                .expect("backbone shapes are validated at construction");
        }
        shape
    }

    fn head_init(&self) -> Init {
        Init {
            seed: derive_seed(&[self.arch.seed, str_word("head")]),
        }
    }

    /// Appends GAP, dense, BN, LeakyReLU, dropout, dense, BN, LeakyReLU,
    /// dropout, dense(K), softmax.
    pub fn attach_head(&mut self, h: &HeadSpec) -> Result<()> {
        if self.has_head() {
            return Err(ModelError::AlreadyHasHead);
        }
        h.validate()?;
        let init = self.head_init();
        let features = self.feature_shape()[0];
        let [w1, w2] = h.widths;
        self.head = vec![
            Layer::GlobalAvgPool,
            Layer::Dense(Dense::new("head.dense1", features, w1, &init)),
            Layer::BatchNorm(BatchNorm::new("head.bn1", w1)),
            Layer::LeakyRelu(h.leaky_alpha),
            Layer::Dropout(h.dropout[0]),
            Layer::Dense(Dense::new("head.dense2", w1, w2, &init)),
            Layer::BatchNorm(BatchNorm::new("head.bn2", w2)),
            Layer::LeakyRelu(h.leaky_alpha),
            Layer::Dropout(h.dropout[1]),
            Layer::Dense(Dense::new("head.out", w2, h.classes, &init)),
            Layer::Softmax,
        ];
        self.arch.head = Some(HeadConfig::Custom(h.clone()));
        Ok(())
    }

    /// GAP, dense(K), softmax.
    pub fn attach_linear_head(&mut self, classes: usize) -> Result<()> {
        if self.has_head() {
            return Err(ModelError::AlreadyHasHead);
        }
        if classes < 2 {
            return Err(ModelError::InvalidHead("at least 2 classes are required".into()));
        }
        let init = self.head_init();
        let features = self.feature_shape()[0];
        self.head = vec![
            Layer::GlobalAvgPool,
            Layer::Dense(Dense::new("head.out", features, classes, &init)),
            Layer::Softmax,
        ];
        self.arch.head = Some(HeadConfig::Linear { classes });
        Ok(())
    }

    pub fn remove_head(&mut self) -> Result<()> {
        if !self.has_head() {
            return Err(ModelError::NoHead);
        }
        self.head.clear();
        self.arch.head = None;
        Ok(())
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.backbone.iter().chain(&self.head).map(Layer::spec).collect()
    }

    pub fn head_specs(&self) -> Vec<LayerSpec> {
        self.head.iter().map(Layer::spec).collect()
    }

    pub fn backbone_layers(&self) -> &[Layer<T>] {
        &self.backbone
    }

    pub fn head_layers(&self) -> &[Layer<T>] {
        &self.head
    }

    /// Parameterized-layer index list, backbone first.
    pub fn layer_entries(&self) -> Vec<LayerEntry> {
        let mut out = Vec::new();
        for l in &self.backbone {
            l.entries(&mut out);
        }
        out
            .into_iter()
            .chain({
                let mut head = Vec::new();
                for l in &self.head {
                    l.entries(&mut head);
                }
                head
            })
            .collect()
    }

    pub fn head_entry_count(&self) -> usize {
        let mut head = Vec::new();
        for l in &self.head {
            l.entries(&mut head);
        }
        head.len()
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for l in self.backbone.iter().chain(&self.head) {
            l.visit_params(f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in self.backbone.iter_mut().chain(self.head.iter_mut()) {
            l.visit_params_mut(f);
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p));
        out
    }

    pub fn set_trainable(&mut self, policy: TrainablePolicy) -> Result<()> {
        let entries = self.layer_entries();
        let total = entries.len();
        let first_trainable = match policy {
            TrainablePolicy::FreezeAll => total,
            TrainablePolicy::UnfreezeAll => 0,
            TrainablePolicy::UnfreezeLastK(k) => {
                if k > total {
                    return Err(ModelError::KOutOfRange { k, total });
                }
                total - k
            }
            TrainablePolicy::HeadOnly => {
                if !self.has_head() {
                    return Err(ModelError::NoHead);
                }
                total - self.head_entry_count()
            }
        };
        let flags: BTreeMap<&str, bool> = entries
            .iter()
            .enumerate()
            .flat_map(|(i, e)| e.params.iter().map(move |p| (p.as_str(), i >= first_trainable)))
            .collect();
        let flags: BTreeMap<String, bool> =
            flags.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        self.visit_params_mut(&mut |p| p.trainable = flags[p.name.as_str()]);
        Ok(())
    }

    pub fn parameter_summary(&self) -> ParameterSummary {
        let params: BTreeMap<&str, &Param<T>> =
            self.params().into_iter().map(|p| (p.name.as_str(), p)).collect();
        let head_start = self.layer_entries().len() - self.head_entry_count();
        let per_layer: Vec<EntrySummary> = self
            .layer_entries()
            .into_iter()
            .enumerate()
            .map(|(index, e)| {
                let count = e.params.iter().map(|n| params[n.as_str()].value.numel()).sum();
                let trainable = e.params.iter().all(|n| params[n.as_str()].trainable);
                EntrySummary {
                    index,
                    kind: e.kind,
                    params: e.params,
                    count,
                    trainable,
                    in_head: index >= head_start,
                }
            })
            .collect();
        let total = per_layer.iter().map(|e| e.count).sum();
        let trainable = per_layer.iter().filter(|e| e.trainable).map(|e| e.count).sum();
        ParameterSummary {
            total,
            trainable,
            frozen: total - trainable,
            per_layer,
        }
    }

    pub fn rng_state(&self) -> RngState {
        self.rng
    }

    pub fn set_rng_state(&mut self, rng: RngState) {
        self.rng = rng;
    }

    /// A forward context; each train-mode context draws a fresh dropout stream.
    pub fn context<'t>(&mut self, tape: &'t Tape<T>, mode: Mode) -> ForwardCtx<'t, T> {
        let seed = derive_seed(&[self.rng.seed, self.rng.counter]);
        if mode == Mode::Train {
            self.rng.counter += 1;
        }
        ForwardCtx::new(tape, mode, seed)
    }

    pub fn forward(&mut self, ctx: &mut ForwardCtx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let mut h = x.clone();
        for layer in self.backbone.iter_mut().chain(self.head.iter_mut()) {
            h = layer.forward(ctx, &h)?;
        }
        Ok(h)
    }

    /// Inference-mode output for a batch `[N, C, H, W]`.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let mut ctx = self.context(&tape, Mode::Infer);
        let xv = tape.constant(x.clone());
        Ok(self.forward(&mut ctx, &xv)?.value())
    }

    /// Parameters followed by batch-norm running statistics, in layer order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.value.clone())));
        for l in self.backbone.iter().chain(&self.head) {
            l.visit_buffers(&mut |name, t| out.push((name, t.clone())));
        }
        out
    }

    /// Replaces every parameter and buffer. Names and shapes must match exactly.
    pub fn load_named(&mut self, mut tensors: BTreeMap<String, Tensor<T>>) -> Result<()> {
        let mut err = None;
        let mut take = |name: &str, dst: &mut Tensor<T>| {
            if err.is_some() {
                return;
            }
            match tensors.remove(name) {
                None => err = Some(ModelError::MissingTensor(name.to_string())),
                Some(t) if t.shape() != dst.shape() => {
                    err = Some(ModelError::ParameterShape {
                        name: name.to_string(),
                        expected: dst.shape().to_vec(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(t) => *dst = t,
            }
        };
        // Validate against a scratch copy so a failed load leaves `self` intact.
        let mut scratch = self.clone();
        scratch.visit_params_mut(&mut |p| {
            let name = p.name.clone();
            take(&name, &mut p.value)
        });
        for l in scratch.backbone.iter_mut().chain(scratch.head.iter_mut()) {
            l.visit_buffers_mut(&mut |name, t| take(&name, t));
        }
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = tensors.into_keys().next() {
            return Err(ModelError::UnexpectedTensor(extra));
        }
        *self = scratch;
        Ok(())
    }

    /// Copies parameters and buffers whose names and shapes match `other`;
    /// returns how many tensors were copied.
    pub fn copy_matching_from(&mut self, other: &ModelGraph<T>) -> usize {
        let src: BTreeMap<String, Tensor<T>> = other.named_tensors().into_iter().collect();
        let mut copied = 0;
        let mut copy = |name: &str, dst: &mut Tensor<T>| {
            if let Some(t) = src.get(name) {
                if t.shape() == dst.shape() {
                    *dst = t.clone();
                    copied += 1;
                }
            }
        };
        self.visit_params_mut(&mut |p| {
            let name = p.name.clone();
            copy(&name, &mut p.value)
        });
        for l in self.backbone.iter_mut().chain(self.head.iter_mut()) {
            l.visit_buffers_mut(&mut |name, t| copy(&name, t));
        }
        copied
    }

    pub fn cast<U: Element>(&self) -> ModelGraph<U> {
        let mut out = ModelGraph::<U>::from_architecture(&self.arch)
            .expect("architecture of an existing model is valid");
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<U>()))
            .collect();
        out.load_named(tensors).expect("same architecture");
        let flags: BTreeMap<String, bool> =
            self.params().iter().map(|p| (p.name.clone(), p.trainable)).collect();
        out.visit_params_mut(&mut |p| p.trainable = flags[&p.name]);
        out.rng = self.rng;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini_model() -> ModelGraph<f64> {
        let mut m = ModelGraph::build_backbone(Preset::Mini, InputSpec::new(3, 32, 32), 3).unwrap();
        m.attach_head(&HeadSpec::default()).unwrap();
        m
    }

    #[test]
    fn mini_feature_map() {
        let m = ModelGraph::<f32>::build_backbone(Preset::Mini, InputSpec::new(3, 32, 32), 0).unwrap();
        assert_eq!(m.feature_shape(), vec![64, 8, 8]);
        let tape = Tape::new();
        let mut m = m;
        let mut ctx = m.context(&tape, Mode::Infer);
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]).unwrap());
        assert_eq!(m.forward(&mut ctx, &x).unwrap().shape(), vec![1, 64, 8, 8]);
    }

    #[test]
    fn input_too_small() {
        let r = ModelGraph::<f32>::build_backbone(Preset::Mini, InputSpec::new(3, 15, 32), 0);
        assert!(matches!(r, Err(ModelError::InputTooSmall { .. })));
        let r = ModelGraph::<f32>::build_backbone(Preset::Resnet50, InputSpec::new(3, 32, 31), 0);
        assert!(matches!(r, Err(ModelError::InputTooSmall { .. })));
    }

    #[test]
    fn head_shapes_and_order() {
        let m = mini_model();
        let dense: Vec<Vec<usize>> = m
            .params()
            .iter()
            .filter(|p| p.name.starts_with("head.") && p.name.ends_with(".weight"))
            .map(|p| p.value.shape().to_vec())
            .collect();
        assert_eq!(dense, vec![vec![128, 64], vec![64, 128], vec![41, 64]]);
        let kinds: Vec<&str> = m.head_specs().iter().map(LayerSpec::kind_name).collect();
        assert_eq!(
            kinds,
            [
                "global_avg_pool",
                "dense",
                "batch_norm",
                "leaky_relu",
                "dropout",
                "dense",
                "batch_norm",
                "leaky_relu",
                "dropout",
                "dense",
                "softmax"
            ]
        );
        let mut m = m;
        assert_eq!(m.attach_head(&HeadSpec::default()), Err(ModelError::AlreadyHasHead));
    }

    #[test]
    fn head_parameter_count() {
        let m = mini_model();
        let head: usize = m
            .parameter_summary()
            .per_layer
            .iter()
            .filter(|e| e.in_head)
            .map(|e| e.count)
            .sum();
        assert_eq!(head, 19_625);
    }

    #[test]
    fn unfreeze_last_k_index_arithmetic() {
        let mut m = mini_model();
        let total = m.layer_entries().len();
        assert_eq!(total, 52);
        m.set_trainable(TrainablePolicy::UnfreezeLastK(4)).unwrap();
        let s = m.parameter_summary();
        for e in &s.per_layer {
            assert_eq!(e.trainable, e.index >= total - 4);
        }
        assert_eq!(
            m.set_trainable(TrainablePolicy::UnfreezeLastK(53)),
            Err(ModelError::KOutOfRange { k: 53, total: 52 })
        );
    }

    #[test]
    fn head_only_marks_seven_groups() {
        let mut m = mini_model();
        m.set_trainable(TrainablePolicy::HeadOnly).unwrap();
        let s = m.parameter_summary();
        let trainable: Vec<_> = s.per_layer.iter().filter(|e| e.trainable).collect();
        assert_eq!(trainable.len(), 7);
        assert!(trainable.iter().all(|e| e.in_head));
        assert_eq!(s.trainable, 19_625);
    }

    #[test]
    fn summary_counts_are_consistent() {
        let mut m = mini_model();
        m.set_trainable(TrainablePolicy::UnfreezeAll).unwrap();
        assert_eq!(m.parameter_summary().frozen, 0);
        m.set_trainable(TrainablePolicy::FreezeAll).unwrap();
        let s = m.parameter_summary();
        assert_eq!(s.trainable, 0);
        let recount: usize = m.params().iter().map(|p| p.value.numel()).sum();
        assert_eq!(s.total, recount);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = mini_model();
        let b = mini_model();
        for ((na, ta), (nb, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(na, nb);
            assert!(ta.bit_eq(tb));
        }
    }

    #[test]
    fn full_model_outputs_distributions() {
        let mut m = mini_model();
        let x: Vec<f64> = (0..2 * 3 * 32 * 32).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let y = m.predict(&Tensor::new(x, &[2, 3, 32, 32]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[2, 41]);
        for row in y.data().chunks(41) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn load_named_rejects_bad_shapes_without_mutation() {
        let mut m = mini_model();
        let before = m.clone();
        let mut tensors: BTreeMap<_, _> = m.named_tensors().into_iter().collect();
        tensors.insert("head.out.bias".into(), Tensor::zeros(&[40]).unwrap());
        assert!(matches!(m.load_named(tensors), Err(ModelError::ParameterShape { .. })));
        assert_eq!(m, before);
    }
}
