//! Python bindings: datasets, models, training, evaluation and the
//! schedule and metric helpers.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use leafnet::data::synth::{synth_dataset, SynthSpec};
use leafnet::data::{self, SplitTag};
use leafnet::metrics::{self, ConfusionMatrix, EvalReport};
use leafnet::model::{HeadSpec, InputSpec, ModelGraph, Preset, TrainablePolicy};
use leafnet::optim::CosineSchedule;
use leafnet::tensor::Tensor;
use leafnet::train::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use leafnet::train::{self as training, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

/// Labelled images, all of one size, stored as planar RGB in [0, 1].
#[pyclass(name = "Dataset", module = "pyleafnet", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Procedural leaf-like images. A non-zero `shift` produces a related task.
    #[staticmethod]
    #[pyo3(signature = (classes, per_class, size, seed = 0, shift = 0.0))]
    fn synthetic(classes: usize, per_class: usize, size: usize, seed: u64, shift: f64) -> PyResult<Self> {
        let spec = SynthSpec {
            shift,
            ..SynthSpec::new(classes, per_class, size, seed)
        };
        Ok(Self {
            inner: synth_dataset(&spec).map_err(value_err)?,
        })
    }

    /// Reads `root/<split>/<class>/` and resizes every image to `size`.
    #[staticmethod]
    #[pyo3(signature = (root, split = "train", size = 32))]
    fn load(root: PathBuf, split: &str, size: usize) -> PyResult<Self> {
        let tag = match split {
            "train" => SplitTag::Train,
            "test" => SplitTag::Test,
            other => return Err(value_err(format!("unknown split '{other}' (train, test)"))),
        };
        let manifest = data::scan_dataset(&root).map_err(io_err)?;
        let inner = data::load_split(&manifest, tag, size, size).map_err(io_err)?;
        Ok(Self { inner })
    }

    /// Stratified `(train, validation)` split.
    #[pyo3(signature = (fraction = 0.2, seed = 0))]
    fn split(&self, fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = data::split_train_val(&self.inner, fraction, seed).map_err(value_err)?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    /// `(height, width)`, or `None` when empty.
    #[getter]
    fn image_size(&self) -> Option<(usize, usize)> {
        self.inner.image_size()
    }

    /// Pixels of one sample, channel-major.
    fn pixels(&self, index: usize) -> PyResult<Vec<f32>> {
        self.inner
            .samples
            .get(index)
            .map(|s| s.image.data.clone())
            .ok_or_else(|| value_err(format!("index {index} out of range")))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset({} images, {} classes)", self.inner.len(), self.inner.classes())
    }
}

/// Single-precision residual classifier.
#[pyclass(name = "Model", module = "pyleafnet", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelGraph<f32>,
    class_names: Vec<String>,
}

fn policy(name: &str, k: Option<usize>) -> PyResult<TrainablePolicy> {
    Ok(match (name, k) {
        ("all", None) => TrainablePolicy::UnfreezeAll,
        ("none", None) => TrainablePolicy::FreezeAll,
        ("head", None) => TrainablePolicy::HeadOnly,
        ("last", Some(k)) => TrainablePolicy::UnfreezeLastK(k),
        _ => {
            return Err(value_err(format!(
                "policy must be 'all', 'none', 'head', or 'last' with k, got '{name}' and {k:?}"
            )))
        }
    })
}

#[pymethods]
impl PyModel {
    /// Headless backbone for square `size` x `size` RGB input.
    #[new]
    #[pyo3(signature = (preset = "mini", size = 32, seed = 0))]
    fn new(preset: &str, size: usize, seed: u64) -> PyResult<Self> {
        let preset: Preset = preset.parse().map_err(value_err)?;
        let inner = ModelGraph::build_backbone(preset, InputSpec::new(3, size, size), seed).map_err(value_err)?;
        Ok(Self {
            inner,
            class_names: vec![],
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint::<f32>(&path).map_err(io_err)?;
        Ok(Self {
            inner: ck.model,
            class_names: ck.class_names,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&Checkpoint::new(self.inner.clone(), self.class_names.clone()), &path).map_err(io_err)
    }

    /// Dense 128/64 classification head, or a single softmax layer with `linear`.
    #[pyo3(signature = (classes, linear = false))]
    fn attach_head(&mut self, classes: usize, linear: bool) -> PyResult<()> {
        if linear {
            self.inner.attach_linear_head(classes)
        } else {
            self.inner.attach_head(&HeadSpec::with_classes(classes))
        }
        .map_err(value_err)
    }

    fn remove_head(&mut self) -> PyResult<()> {
        self.inner.remove_head().map_err(value_err)
    }

    #[getter]
    fn classes(&self) -> Option<usize> {
        self.inner.classes()
    }

    /// Parameterized layer entries of the whole model.
    #[getter]
    fn layer_entries(&self) -> usize {
        self.inner.layer_entries().len()
    }

    #[getter]
    fn head_entries(&self) -> usize {
        self.inner.head_entry_count()
    }

    #[pyo3(signature = (policy_name, k = None))]
    fn set_trainable(&mut self, policy_name: &str, k: Option<usize>) -> PyResult<()> {
        self.inner.set_trainable(policy(policy_name, k)?).map_err(value_err)
    }

    /// `(total, trainable)` parameter counts.
    fn parameter_count(&self) -> (usize, usize) {
        let s = self.inner.parameter_summary();
        (s.total, s.trainable)
    }

    fn head_specs(&self) -> Vec<String> {
        self.inner.head_specs().iter().map(|s| format!("{s:?}")).collect()
    }

    /// Class probabilities for a flat `[batch, 3, size, size]` buffer.
    fn predict(&mut self, pixels: Vec<f32>, batch: usize) -> PyResult<Vec<Vec<f32>>> {
        let [c, h, w] = self.inner.architecture().input.dims();
        let x = Tensor::new(pixels, &[batch, c, h, w]).map_err(value_err)?;
        let y = self.inner.predict(&x).map_err(value_err)?;
        let k = y.shape()[1];
        Ok(y.data().chunks(k).map(<[f32]>::to_vec).collect())
    }

    /// Trains in place and returns the per-epoch history.
    #[pyo3(signature = (dataset, epochs = None, lr = None, seed = 0, fine_tune = false))]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        dataset: &PyDataset,
        epochs: Option<u64>,
        lr: Option<f64>,
        seed: u64,
        fine_tune: bool,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let mut cfg = if fine_tune {
            TrainConfig::fine_tune()
        } else {
            TrainConfig::baseline()
        };
        cfg.seed = seed;
        if let Some(e) = epochs {
            cfg.max_epochs = e;
        }
        if let Some(lr) = lr {
            cfg.base_lr = lr;
        }
        let result = training::train(self.inner.clone(), &dataset.inner, &cfg).map_err(value_err)?;
        self.inner = result.model;
        self.class_names = dataset.inner.class_names.clone();
        result
            .history
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("train_loss", r.train_loss)?;
                d.set_item("train_acc", r.train_acc)?;
                d.set_item("val_loss", r.val_loss)?;
                d.set_item("val_acc", r.val_acc)?;
                d.set_item("lr", r.lr)?;
                Ok(d)
            })
            .collect()
    }

    /// JSON evaluation report on `dataset`.
    #[pyo3(signature = (dataset, model_id = "model", dataset_id = "dataset"))]
    fn evaluate(&mut self, dataset: &PyDataset, model_id: &str, dataset_id: &str) -> PyResult<String> {
        let report = training::evaluate(&mut self.inner, &dataset.inner, model_id, dataset_id).map_err(value_err)?;
        Ok(report.to_json())
    }

    fn __repr__(&self) -> String {
        let a = self.inner.architecture();
        format!(
            "Model({}, {}x{}, classes={:?})",
            a.preset, a.input.height, a.input.width, self.inner.classes()
        )
    }
}

/// Cosine-annealed learning rate at step `t`.
#[pyfunction]
#[pyo3(signature = (lr0, total_steps, t, lr_min = 0.0))]
fn cosine_lr(lr0: f64, total_steps: u64, t: u64, lr_min: f64) -> f64 {
    CosineSchedule {
        lr0,
        lr_min,
        total_steps,
    }
    .lr(t)
}

/// Report from hard predictions and optional per-class scores.
#[pyfunction]
#[pyo3(signature = (class_names, labels, preds, scores = None))]
fn classification_report(
    class_names: Vec<String>,
    labels: Vec<usize>,
    preds: Vec<usize>,
    scores: Option<Vec<f64>>,
) -> PyResult<String> {
    let cm = ConfusionMatrix::from_predictions(class_names, &labels, &preds).map_err(value_err)?;
    let report = metrics::build_report(&cm, scores.as_deref(), &labels, "model", "dataset").map_err(value_err)?;
    Ok(report.to_json())
}

/// Side-by-side table of JSON reports.
#[pyfunction]
fn compare_reports(reports: Vec<String>) -> PyResult<String> {
    let parsed = reports
        .iter()
        .map(|r| EvalReport::from_json(r))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    metrics::render_comparison(&parsed).map_err(value_err)
}

#[pymodule]
fn pyleafnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(classification_report, m)?)?;
    m.add_function(wrap_pyfunction!(compare_reports, m)?)?;
    Ok(())
}
