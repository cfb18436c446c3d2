//! Update rules, cosine decay and plateau-triggered reduction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::Gradients;
use crate::model::ModelGraph;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("trainable parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("gradient for {name} has shape {found:?}, parameter has {expected:?}")]
    GradientShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid learning rate {0}")]
    InvalidLearningRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    /// `v = mu v + g; w -= lr v`
    SgdMomentum { momentum: f64 },
    AdamLike { beta1: f64, beta2: f64, eps: f64 },
}

impl Rule {
    pub fn sgd() -> Self {
        Rule::SgdMomentum { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        Rule::AdamLike {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Rule::SgdMomentum { .. } => "sgd",
            Rule::AdamLike { .. } => "adam",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Element> {
    pub rule: Rule,
    pub base_lr: f64,
    pub current_lr: f64,
    pub step_count: u64,
    /// First moments (velocity for SGD), keyed by parameter name.
    pub m: BTreeMap<String, Tensor<T>>,
    /// Second moments (Adam only).
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(rule: Rule, base_lr: f64) -> Result<Self, OptimError> {
        if !(base_lr.is_finite() && base_lr >= 0.0) {
            return Err(OptimError::InvalidLearningRate(base_lr));
        }
        Ok(Self {
            rule,
            base_lr,
            current_lr: base_lr,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<(), OptimError> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(OptimError::InvalidLearningRate(lr));
        }
        self.current_lr = lr;
        Ok(())
    }

    /// Updates every trainable parameter from `grads` and clears them.
    /// Frozen parameters are never touched, even if a gradient is present.
    pub fn apply_step(
        &mut self,
        model: &mut ModelGraph<T>,
        grads: &mut Gradients<T>,
    ) -> Result<(), OptimError> {
        let mut missing = None;
        model.visit_params(&mut |p| {
            if missing.is_some() || !p.trainable {
                return;
            }
            match grads.get(&p.name) {
                None => missing = Some(OptimError::MissingGradient(p.name.clone())),
                Some(g) if g.shape() != p.value.shape() => {
                    missing = Some(OptimError::GradientShape {
                        name: p.name.clone(),
                        expected: p.value.shape().to_vec(),
                        found: g.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        });
        if let Some(e) = missing {
            return Err(e);
        }

        self.step_count += 1;
        let lr = T::of(self.current_lr);
        let t = self.step_count as i32;
        let rule = self.rule;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            let g = &grads[&p.name];
            let zeros = || Tensor::zeros(p.value.shape()).expect("parameter shape");
            let m = m_all.entry(p.name.clone()).or_insert_with(zeros);
            match rule {
                Rule::SgdMomentum { momentum } => {
                    let mu = T::of(momentum);
                    let m = m.data_mut();
                    let w = p.value.data_mut();
                    for ((w, m), &g) in w.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                        *m = mu * *m + g;
                        *w -= lr * *m;
                    }
                }
                Rule::AdamLike { beta1, beta2, eps } => {
                    let v = v_all.entry(p.name.clone()).or_insert_with(zeros);
                    let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps));
                    let c1 = T::of(1.0 - beta1.powi(t));
                    let c2 = T::of(1.0 - beta2.powi(t));
                    let one = T::one();
                    let m = m.data_mut();
                    let v = v.data_mut();
                    let w = p.value.data_mut();
                    for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *w -= lr * mhat / (vhat.sqrt() + e);
                    }
                }
            }
        });
        grads.clear();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    /// `lr_min + (lr0 - lr_min) (1 + cos(pi t / T)) / 2`, clamped to `lr_min`
    /// past the horizon.
    pub fn lr(&self, t: u64) -> f64 {
        if t >= self.total_steps {
            return self.lr_min;
        }
        let phase = std::f64::consts::PI * t as f64 / self.total_steps.max(1) as f64;
        self.lr_min + (self.lr0 - self.lr_min) * 0.5 * (1.0 + phase.cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauReducer {
    pub factor: f64,
    pub patience: u32,
    pub min_lr: f64,
    pub min_delta: f64,
    pub best: f64,
    pub wait: u32,
}

impl Default for PlateauReducer {
    fn default() -> Self {
        Self::new(0.1, 3, 1e-6)
    }
}

impl PlateauReducer {
    pub fn new(factor: f64, patience: u32, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            min_lr,
            min_delta: 0.0,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Returns `true` when a reduction fires for this epoch.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return true;
        }
        false
    }

    pub fn update(&mut self, loss: f64, lr: f64) -> f64 {
        if self.observe(loss) {
            (lr * self.factor).max(self.min_lr)
        } else {
            lr
        }
    }
}

/// Effective rate = cosine(step) (or the constant base) times the
/// accumulated plateau multiplier, floored at the plateau minimum when the
/// reducer is enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrController {
    pub base_lr: f64,
    pub cosine: Option<CosineSchedule>,
    pub plateau: Option<PlateauReducer>,
    pub multiplier: f64,
}

impl LrController {
    pub fn new(base_lr: f64, cosine_steps: Option<u64>, plateau: Option<PlateauReducer>) -> Self {
        Self {
            base_lr,
            cosine: cosine_steps.map(|t| CosineSchedule {
                lr0: base_lr,
                lr_min: 0.0,
                total_steps: t.max(1),
            }),
            plateau,
            multiplier: 1.0,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let base = self.cosine.map_or(self.base_lr, |c| c.lr(step));
        let lr = base * self.multiplier;
        match &self.plateau {
            Some(p) => lr.max(p.min_lr),
            None => lr,
        }
    }

    /// Feeds one epoch's validation loss; returns `true` if a reduction fired.
    pub fn end_epoch(&mut self, val_loss: f64) -> bool {
        let Some(p) = self.plateau.as_mut() else {
            return false;
        };
        let fired = p.observe(val_loss);
        if fired {
            self.multiplier *= p.factor;
        }
        fired
    }
}
