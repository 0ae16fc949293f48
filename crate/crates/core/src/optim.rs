//! SGD with momentum, Adam, and per-epoch learning-rate schedules.
//!
//! Updates use `∂L/∂θ = m ⊙ ∂L/∂w` and skip masked positions entirely, so a
//! pruned `θ_j` keeps its exact value for as long as its mask stays zero.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{GradientMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        epsilon: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: beta1(),
            beta2: beta2(),
            epsilon: adam_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Divides the rate by `factor` at each milestone epoch.
    StepDecay {
        lr: f64,
        factor: f64,
        milestones: Vec<usize>,
    },
    CosineAnnealing {
        lr: f64,
        epochs: usize,
    },
}

impl LrSchedule {
    /// Step decay with a milestone every `every` epochs.
    pub fn step_every(lr: f64, factor: f64, every: usize, horizon: usize) -> Self {
        LrSchedule::StepDecay {
            lr,
            factor,
            milestones: (1..).map(|i| i * every).take_while(|&e| e < horizon).collect(),
        }
    }

    pub fn initial(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr }
            | LrSchedule::StepDecay { lr, .. }
            | LrSchedule::CosineAnnealing { lr, .. } => lr,
        }
    }
}

pub fn lr_at_epoch(schedule: &LrSchedule, epoch: usize) -> Result<f64> {
    match schedule {
        LrSchedule::Constant { lr } => Ok(*lr),
        LrSchedule::StepDecay {
            lr,
            factor,
            milestones,
        } => {
            let drops = milestones.iter().filter(|&&m| epoch >= m).count();
            Ok(lr / factor.powi(drops as i32))
        }
        LrSchedule::CosineAnnealing { lr, epochs } => {
            if epoch >= *epochs {
                return Err(Error::EpochOutOfRange {
                    epoch,
                    horizon: *epochs,
                });
            }
            Ok(lr * 0.5 * (1.0 + (PI * epoch as f64 / *epochs as f64).cos()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
}

/// Optimizer hyperparameters, current rate, step count and per-parameter
/// buffers (velocity for SGD, first/second moments for Adam).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    buffers: BTreeMap<String, Vec<Tensor>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, model: &Model) -> Self {
        let slots = match kind {
            OptimizerKind::Sgd { .. } => 1,
            OptimizerKind::Adam { .. } => 2,
        };
        let buffers = model
            .params()
            .iter()
            .map(|p| {
                let zeros = Tensor::zeros(p.value().shape());
                (p.id().to_string(), vec![zeros; slots])
            })
            .collect();
        OptimizerState {
            kind,
            lr,
            step: 0,
            buffers,
        }
    }

    pub fn from_config(config: &OptimizerConfig, model: &Model) -> Self {
        Self::new(config.kind, config.schedule.initial(), model)
    }

    pub fn buffers(&self) -> &BTreeMap<String, Vec<Tensor>> {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: BTreeMap<String, Vec<Tensor>>) {
        self.buffers = buffers;
    }

    /// Zeroes every buffer entry at a masked-out position of `model`.
    pub fn zero_pruned(&mut self, model: &Model) {
        for p in model.params() {
            if let Some(bufs) = self.buffers.get_mut(p.id()) {
                for buf in bufs {
                    for (b, &m) in buf.data_mut().iter_mut().zip(p.mask().data()) {
                        if m == 0.0 {
                            *b = 0.0;
                        }
                    }
                }
            }
        }
    }

    /// One update with whichever rule this state was created for.
    pub fn step(&mut self, model: &mut Model, grads: &GradientMap) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd { .. } => sgd_step(model, grads, self),
            OptimizerKind::Adam { .. } => {
                let t = self.step + 1;
                adam_step(model, grads, self, t)
            }
        }
    }
}

fn check_grads(model: &Model, grads: &GradientMap) -> Result<()> {
    match model.params().iter().find(|p| !grads.contains(p.id())) {
        Some(p) => Err(Error::MissingParameter(p.id().to_string())),
        None => Ok(()),
    }
}

/// `v ← μ·v + g`, `θ ← θ − η·v` on unmasked positions.
pub fn sgd_step(model: &mut Model, grads: &GradientMap, state: &mut OptimizerState) -> Result<()> {
    check_grads(model, grads)?;
    let OptimizerKind::Sgd { momentum } = state.kind else {
        return Err(Error::InvalidArg("sgd_step on a non-SGD state".into()));
    };
    let lr = state.lr;
    for p in model.params_mut() {
        let g = grads.get(p.id()).expect("checked above");
        let buf = &mut state
            .buffers
            .entry(p.id().to_string())
            .or_insert_with(|| vec![Tensor::zeros(p.value().shape())])[0];
        let mask = p.mask().data().to_vec();
        let theta = p.value_mut().data_mut();
        for j in 0..theta.len() {
            if mask[j] == 0.0 {
                continue;
            }
            let v = momentum * buf.data()[j] as f64 + g.data()[j] as f64;
            buf.data_mut()[j] = v as f32;
            theta[j] = (theta[j] as f64 - lr * v) as f32;
        }
    }
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam update at step `t ≥ 1`, masked like [`sgd_step`].
pub fn adam_step(
    model: &mut Model,
    grads: &GradientMap,
    state: &mut OptimizerState,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArg("Adam step index starts at 1".into()));
    }
    check_grads(model, grads)?;
    let OptimizerKind::Adam {
        beta1,
        beta2,
        epsilon,
    } = state.kind
    else {
        return Err(Error::InvalidArg("adam_step on a non-Adam state".into()));
    };
    let lr = state.lr;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for p in model.params_mut() {
        let g = grads.get(p.id()).expect("checked above");
        let shape = p.value().shape().to_vec();
        let bufs = state
            .buffers
            .entry(p.id().to_string())
            .or_insert_with(|| vec![Tensor::zeros(&shape); 2]);
        let (first, second) = bufs.split_at_mut(1);
        let (m1, m2) = (first[0].data_mut(), second[0].data_mut());
        let mask = p.mask().data().to_vec();
        let theta = p.value_mut().data_mut();
        for j in 0..theta.len() {
            if mask[j] == 0.0 {
                continue;
            }
            let gj = g.data()[j] as f64;
            let a = beta1 * m1[j] as f64 + (1.0 - beta1) * gj;
            let b = beta2 * m2[j] as f64 + (1.0 - beta2) * gj * gj;
            m1[j] = a as f32;
            m2[j] = b as f32;
            let update = lr * (a / c1) / ((b / c2).sqrt() + epsilon);
            theta[j] = (theta[j] as f64 - update) as f32;
        }
    }
    state.step = t;
    Ok(())
}
