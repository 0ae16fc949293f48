//! Saliency scores, sparsity schedules, global mask updates and the four
//! pruning pipelines (IMP, SNIP, SynFlow, DRIVE).
//!
//! With `g = ∂L/∂w` at the effective weights `w = θ ⊙ m`:
//!
//! | score        | per-element value                    | normalized |
//! |--------------|--------------------------------------|------------|
//! | magnitude    | `|θ|`                                | no         |
//! | SNIP         | `|θ g|`                              | yes        |
//! | convergence  | `|m g|`                              | no         |
//! | DRIVE        | `|θ · (θ g) · (m g)|`                | yes        |
//! | SynFlow      | `(∂A/∂|θ|) ⊙ |θ|`, data-free         | no         |
//!
//! Ranking is global across all prunable parameters and only ever considers
//! surviving elements, so masks are monotone: nothing is regrown.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Batch, Model, Parameter, Role};
use crate::optim::OptimizerState;
use crate::seeds::{derive_seed, SeedStreams};
use crate::tensor::{GradientMap, Tape, Tensor};
use crate::train::{train_epochs, TrainSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMethod {
    #[serde(rename = "imp", alias = "magnitude")]
    Magnitude,
    Snip,
    #[serde(alias = "syn_flow")]
    Synflow,
    Drive,
}

impl PruneMethod {
    pub const ALL: [PruneMethod; 4] = [
        PruneMethod::Magnitude,
        PruneMethod::Snip,
        PruneMethod::Synflow,
        PruneMethod::Drive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PruneMethod::Magnitude => "imp",
            PruneMethod::Snip => "snip",
            PruneMethod::Synflow => "synflow",
            PruneMethod::Drive => "drive",
        }
    }

    /// Whether scoring consumes a data batch.
    pub fn needs_data(self) -> bool {
        matches!(self, PruneMethod::Snip | PruneMethod::Drive)
    }

    /// Pruning at (or near) initialization, as opposed to IMP's retraining cycles.
    pub fn is_early(self) -> bool {
        self != PruneMethod::Magnitude
    }
}

impl fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "imp" | "magnitude" => Ok(PruneMethod::Magnitude),
            "snip" => Ok(PruneMethod::Snip),
            "synflow" => Ok(PruneMethod::Synflow),
            "drive" => Ok(PruneMethod::Drive),
            other => Err(Error::InvalidArg(format!("unknown pruning method `{other}`"))),
        }
    }
}

/// Non-negative per-element scores for every prunable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub scores: BTreeMap<String, Tensor>,
    pub normalized: bool,
    pub method: PruneMethod,
}

impl ScoreVector {
    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.scores.get(id)
    }

    /// Sum over all entries, in `f64`.
    pub fn total(&self) -> f64 {
        self.scores.values().map(Tensor::sum).sum()
    }

    /// Per-layer score sums in layer order.
    pub fn layer_sums(&self, model: &Model) -> Vec<(usize, f64)> {
        model
            .prunable()
            .filter_map(|p| self.scores.get(p.id()).map(|s| (p.layer(), s.sum())))
            .collect()
    }
}

/// Per-element scores computed in `f64`, zeroed at pruned positions.
/// Applies `f(θ, m, g)` at every surviving prunable element; `g` is 0 when
/// no gradients are given.
fn survivor_scores(
    model: &Model,
    method: PruneMethod,
    normalize: bool,
    grads: Option<&GradientMap>,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<ScoreVector> {
    let mut raw: Vec<(String, Vec<f64>, Vec<usize>)> = Vec::new();
    let mut total = 0.0f64;
    for p in model.prunable() {
        let g = grads.map(|g| grad_of(g, p)).transpose()?;
        let theta = p.value().data();
        let mask = p.mask().data();
        let vals: Vec<f64> = (0..p.len())
            .map(|j| {
                if mask[j] == 0.0 {
                    0.0
                } else {
                    let gj = g.map_or(0.0, |g| g.data()[j] as f64);
                    f(theta[j] as f64, mask[j] as f64, gj)
                }
            })
            .collect();
        total += vals.iter().sum::<f64>();
        raw.push((p.id().to_string(), vals, p.value().shape().to_vec()));
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("{method} scores")));
    }
    if normalize && total == 0.0 {
        return Err(Error::ZeroSaliency);
    }
    let scale = if normalize { total } else { 1.0 };
    let scores = raw
        .into_iter()
        .map(|(id, vals, shape)| {
            let data = vals.iter().map(|v| (v / scale) as f32).collect();
            Ok((id, Tensor::new(shape, data)?))
        })
        .collect::<Result<_>>()?;
    Ok(ScoreVector {
        scores,
        normalized: normalize,
        method,
    })
}

fn grad_of<'a>(grads: &'a GradientMap, p: &Parameter) -> Result<&'a Tensor> {
    grads
        .get(p.id())
        .ok_or_else(|| Error::MissingParameter(p.id().to_string()))
}

/// `|θ|` at surviving positions.
pub fn score_magnitude(model: &Model) -> ScoreVector {
    survivor_scores(model, PruneMethod::Magnitude, false, None, |t, _, _| t.abs())
    .expect("magnitude scores are finite")
}

/// Normalized `|∂L/∂m|` with `∂L/∂m = θ ⊙ g`.
pub fn score_snip(model: &Model, batch: &Batch) -> Result<ScoreVector> {
    let grads = model.model_grads(batch)?;
    snip_from_grads(model, &grads)
}

pub fn snip_from_grads(model: &Model, grads: &GradientMap) -> Result<ScoreVector> {
    survivor_scores(model, PruneMethod::Snip, true, Some(grads), |t, _, g| (t * g).abs())
}

/// `|∂L/∂θ| = |m ⊙ g|`, unnormalized.
pub fn convergence_sensitivity(model: &Model, batch: &Batch) -> Result<ScoreVector> {
    let grads = model.model_grads(batch)?;
    survivor_scores(model, PruneMethod::Drive, false, Some(&grads), |_, m, g| (m * g).abs())
}

/// Signed DRIVE metric `S = θ · (∂L/∂m) · (∂L/∂θ) = θ · (θ g) · (m g)`.
pub fn drive_metric(model: &Model, grads: &GradientMap) -> Result<GradientMap> {
    model
        .prunable()
        .map(|p| {
            let g = grad_of(grads, p)?;
            let s: Vec<f32> = p
                .value()
                .data()
                .iter()
                .zip(p.mask().data())
                .zip(g.data())
                .map(|((&t, &m), &g)| {
                    let (t, m, g) = (t as f64, m as f64, g as f64);
                    (t * (t * g) * (m * g)) as f32
                })
                .collect();
            Ok((p.id().to_string(), Tensor::new(p.value().shape().to_vec(), s)?))
        })
        .collect()
}

/// Normalized `|S|` of the DRIVE metric.
pub fn score_drive(model: &Model, batch: &Batch) -> Result<ScoreVector> {
    let grads = model.model_grads(batch)?;
    drive_from_grads(model, &grads)
}

pub fn drive_from_grads(model: &Model, grads: &GradientMap) -> Result<ScoreVector> {
    survivor_scores(model, PruneMethod::Drive, true, Some(grads), |t, m, g| {
        (t * (t * g) * (m * g)).abs()
    })
}

/// Data-free synaptic saliency. Forwards an all-ones input through the
/// masked network with every parameter replaced by its absolute value,
/// takes `A` as the sum of the outputs and scores `(∂A/∂|θ|) ⊙ |θ|`. The
/// model itself is not modified.
pub fn score_synflow(model: &Model) -> Result<ScoreVector> {
    let mut linear = model.clone();
    for p in linear.params_mut() {
        p.value_mut().data_mut().iter_mut().for_each(|v| *v = v.abs());
    }
    let mut shape = vec![1];
    shape.extend_from_slice(&model.spec().input_shape);
    let mut tape = Tape::new();
    let out = linear.forward_on_tape(&mut tape, &Tensor::ones(&shape))?;
    let a = tape.sum(out);
    let value = tape.scalar_value(a)?;
    if !value.is_finite() || !tape.value(out).is_finite() {
        return Err(Error::NonFinite("synaptic flow objective overflowed".into()));
    }
    let grads = tape.backward(a)?;
    // ∂A/∂|θ| = m ⊙ ∂A/∂w
    survivor_scores(&linear, PruneMethod::Synflow, false, Some(&grads), |t, m, g| g * m * t)
}

/// Exact loss change from removing one connection:
/// `L(θ ⊙ m) − L(θ ⊙ (m − e_j))`, via two forward passes.
pub fn connection_sensitivity_exact(
    model: &Model,
    batch: &Batch,
    param: &str,
    index: usize,
) -> Result<f64> {
    let p = model
        .param(param)
        .ok_or_else(|| Error::MissingParameter(param.to_string()))?;
    if index >= p.len() {
        return Err(Error::InvalidArg(format!("index {index} out of range for `{param}`")));
    }
    if p.is_pruned(index) {
        return Err(Error::AlreadyPruned {
            param: param.to_string(),
            index,
        });
    }
    let full = model.loss(batch)?;
    let mut removed = model.clone();
    removed.param_mut(param).expect("exists").prune(index);
    Ok(full - removed.loss(batch)?)
}

pub fn score(
    model: &Model,
    method: PruneMethod,
    batch: Option<&Batch>,
) -> Result<ScoreVector> {
    let need = || Error::InvalidArg(format!("{method} scoring needs a data batch"));
    match method {
        PruneMethod::Magnitude => Ok(score_magnitude(model)),
        PruneMethod::Synflow => score_synflow(model),
        PruneMethod::Snip => score_snip(model, batch.ok_or_else(need)?),
        PruneMethod::Drive => score_drive(model, batch.ok_or_else(need)?),
    }
}

/// Target sparsity with its per-iteration density sequence
/// `d_n = (1 − κ)^(n/N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsitySchedule {
    pub kappa: f64,
    pub iterations: usize,
    pub densities: Vec<f64>,
}

pub fn make_schedule(kappa: f64, iterations: usize) -> Result<SparsitySchedule> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::InvalidSparsity(kappa));
    }
    if iterations == 0 {
        return Err(Error::InvalidArg("schedule needs at least one iteration".into()));
    }
    let keep = 1.0 - kappa;
    let densities = (1..=iterations)
        .map(|n| {
            if n == iterations {
                keep
            } else {
                keep.powf(n as f64 / iterations as f64)
            }
        })
        .collect();
    Ok(SparsitySchedule {
        kappa,
        iterations,
        densities,
    })
}

impl SparsitySchedule {
    pub fn final_density(&self) -> f64 {
        *self.densities.last().expect("non-empty")
    }
}

/// Survivor count for a density over `total` prunable elements.
pub fn target_count(density: f64, total: usize) -> usize {
    (density * total as f64).round() as usize
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PruneReport {
    pub achieved_sparsity: f64,
    /// (layer, density) for each prunable weight.
    pub layer_densities: Vec<(usize, f64)>,
    pub collapsed_layers: Vec<usize>,
    /// Density after each pruning step.
    pub density_trace: Vec<f64>,
    pub prune_seconds: f64,
    /// Training performed inside the pipeline that is charged to the
    /// training budget (DRIVE's early phase).
    pub train_seconds: f64,
}

impl PruneReport {
    fn from_model(model: &Model, density_trace: Vec<f64>, prune_seconds: f64) -> Self {
        PruneReport {
            achieved_sparsity: model.sparsity(),
            layer_densities: model
                .prunable()
                .filter(|p| p.role() == Role::Weight)
                .map(|p| (p.layer(), p.survivors() as f64 / p.len() as f64))
                .collect(),
            collapsed_layers: detect_layer_collapse(model),
            density_trace,
            prune_seconds,
            train_seconds: 0.0,
        }
    }
}

/// Order-preserving map from `f32::total_cmp` to `u32`.
fn score_key(z: f32) -> u32 {
    let b = z.to_bits();
    if b & 0x8000_0000 != 0 {
        !b
    } else {
        b | 0x8000_0000
    }
}

pub fn detect_layer_collapse(model: &Model) -> Vec<usize> {
    model.collapsed_layers()
}

/// Masks the globally lowest-scored surviving elements until
/// `round(target_density · prunable)` survive. Ties go to the lower
/// (parameter id, element index) first. Optimizer buffers at newly pruned
/// positions are zeroed.
pub fn apply_prune(
    model: &mut Model,
    scores: &ScoreVector,
    target_density: f64,
    optimizer: Option<&mut OptimizerState>,
) -> Result<PruneReport> {
    let start = Instant::now();
    let total = model.prunable_count();
    let current = model.survivor_count();
    let target = target_count(target_density, total);
    if target > current {
        return Err(Error::DensityIncrease {
            target: target_density,
            current: model.density(),
        });
    }
    // Each survivor becomes one u64 key: the score's total order in the
    // high half, its position in (parameter id, element) order in the low
    // half, so plain integer order is the ranking with its tie-break.
    let mut ranked: Vec<u64> = Vec::with_capacity(current);
    let mut order: Vec<(String, usize)> = Vec::new();
    {
        let mut prunable: Vec<&Parameter> = model.prunable().collect();
        prunable.sort_by(|a, b| a.id().cmp(b.id()));
        let mut offset = 0usize;
        for p in prunable {
            let s = scores
                .get(p.id())
                .ok_or_else(|| Error::MissingParameter(p.id().to_string()))?;
            if s.shape() != p.value().shape() {
                return Err(Error::dims(format!("scores for `{}`", p.id())));
            }
            for (j, (&z, &m)) in s.data().iter().zip(p.mask().data()).enumerate() {
                if m != 0.0 {
                    if z.is_nan() {
                        return Err(Error::NonFinite(format!("score of `{}`[{j}]", p.id())));
                    }
                    ranked.push((u64::from(score_key(z)) << 32) | (offset + j) as u64);
                }
            }
            order.push((p.id().to_string(), offset));
            offset += p.len();
        }
        if offset > u32::MAX as usize {
            return Err(Error::InvalidArg(format!("{offset} prunable elements is too many")));
        }
    }
    let remove = current - target;
    if remove > 0 {
        if remove < ranked.len() {
            ranked.select_nth_unstable(remove);
        }
        let mut doomed: Vec<usize> = ranked[..remove]
            .iter()
            .map(|&k| (k & 0xffff_ffff) as usize)
            .collect();
        doomed.sort_unstable();
        let mut it = doomed.into_iter().peekable();
        for (k, (id, start)) in order.iter().enumerate() {
            let end = order.get(k + 1).map_or(usize::MAX, |o| o.1);
            let p = model.param_mut(id).expect("ranked parameter exists");
            while let Some(pos) = it.next_if(|&pos| pos < end) {
                p.prune(pos - start);
            }
        }
        if let Some(state) = optimizer {
            state.zero_pruned(model);
        }
    }
    let density = model.density();
    Ok(PruneReport::from_model(
        model,
        vec![density],
        start.elapsed().as_secs_f64(),
    ))
}

/// Score-and-prune along `schedule`. Data-driven methods draw a fresh batch
/// from `sampler` at every iteration.
pub fn iterative_prune(
    model: &mut Model,
    method: PruneMethod,
    schedule: &SparsitySchedule,
    mut sampler: Option<&mut BatchSampler<'_>>,
    mut optimizer: Option<&mut OptimizerState>,
) -> Result<PruneReport> {
    let start = Instant::now();
    let mut trace = Vec::with_capacity(schedule.iterations);
    for (n, &density) in schedule.densities.iter().enumerate() {
        let batch = match (&mut sampler, method.needs_data()) {
            (Some(s), true) => Some(s.sample()),
            (None, true) => {
                return Err(Error::InvalidArg(format!("{method} pruning needs training data")))
            }
            (_, false) => None,
        };
        let scores = score(model, method, batch.as_ref())?;
        apply_prune(model, &scores, density, optimizer.as_deref_mut())?;
        trace.push(model.density());
        log::trace!("method={method} iter={} density={:.6}", n + 1, model.density());
    }
    Ok(PruneReport::from_model(
        model,
        trace,
        start.elapsed().as_secs_f64(),
    ))
}

/// Dense early training for `pretrain_epochs`, then iterative DRIVE pruning.
/// The returned model keeps its trained weights. Pretraining time is
/// reported as training, not pruning.
pub fn drive_pipeline(
    mut model: Model,
    data: &Dataset,
    pretrain_epochs: usize,
    schedule: &SparsitySchedule,
    settings: &TrainSettings,
    seeds: &SeedStreams,
) -> Result<(Model, PruneReport)> {
    let mut state = OptimizerState::from_config(&settings.optimizer, &model);
    let t0 = Instant::now();
    train_epochs(
        &mut model,
        &mut state,
        data,
        settings,
        0..pretrain_epochs,
        seeds.shuffle,
    )?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let mut sampler = BatchSampler::new(data, settings.batch_size, seeds.score_batches)?;
    let mut report = iterative_prune(
        &mut model,
        PruneMethod::Drive,
        schedule,
        Some(&mut sampler),
        Some(&mut state),
    )?;
    report.train_seconds = train_seconds;
    Ok((model, report))
}

/// Iterative magnitude pruning with rewinding to the initial weights.
pub fn imp_pipeline(
    model: Model,
    data: &Dataset,
    cycles: usize,
    epochs_per_cycle: usize,
    kappa: f64,
    settings: &TrainSettings,
    seeds: &SeedStreams,
) -> Result<(Model, PruneReport)> {
    imp_pipeline_observed(
        model,
        data,
        cycles,
        epochs_per_cycle,
        kappa,
        settings,
        seeds,
        |_, _| {},
    )
}

/// [`imp_pipeline`], calling `observe(cycle, model)` after each rewind.
#[allow(clippy::too_many_arguments)]
pub fn imp_pipeline_observed(
    mut model: Model,
    data: &Dataset,
    cycles: usize,
    epochs_per_cycle: usize,
    kappa: f64,
    settings: &TrainSettings,
    seeds: &SeedStreams,
    mut observe: impl FnMut(usize, &Model),
) -> Result<(Model, PruneReport)> {
    let schedule = make_schedule(kappa, cycles)?;
    let start = Instant::now();
    let initial: Vec<Tensor> = model.params().iter().map(|p| p.value().clone()).collect();
    let mut trace = Vec::with_capacity(cycles);
    for (cycle, &density) in schedule.densities.iter().enumerate() {
        // the LR schedule restarts every cycle
        let mut state = OptimizerState::from_config(&settings.optimizer, &model);
        train_epochs(
            &mut model,
            &mut state,
            data,
            settings,
            0..epochs_per_cycle,
            derive_seed(seeds.shuffle, 1000 + cycle as u64),
        )?;
        let scores = score_magnitude(&model);
        apply_prune(&mut model, &scores, density, Some(&mut state))?;
        for (p, theta0) in model.params_mut().iter_mut().zip(&initial) {
            *p.value_mut() = theta0.clone();
        }
        trace.push(model.density());
        observe(cycle, &model);
    }
    Ok((
        model.clone(),
        PruneReport::from_model(&model, trace, start.elapsed().as_secs_f64()),
    ))
}

/// One-shot SNIP at initialization on a single sampled batch.
pub fn snip_pipeline(
    mut model: Model,
    data: &Dataset,
    kappa: f64,
    batch_size: usize,
    seeds: &SeedStreams,
) -> Result<(Model, PruneReport)> {
    let schedule = make_schedule(kappa, 1)?;
    let start = Instant::now();
    if kappa > 0.0 {
        let mut sampler = BatchSampler::new(data, batch_size, seeds.score_batches)?;
        let scores = score_snip(&model, &sampler.sample())?;
        apply_prune(&mut model, &scores, schedule.final_density(), None)?;
    }
    let report = PruneReport::from_model(
        &model,
        vec![model.density()],
        start.elapsed().as_secs_f64(),
    );
    Ok((model, report))
}

/// Data-free iterative SynFlow pruning.
pub fn synflow_pipeline(mut model: Model, kappa: f64, iterations: usize) -> Result<(Model, PruneReport)> {
    let schedule = make_schedule(kappa, iterations)?;
    let report = iterative_prune(&mut model, PruneMethod::Synflow, &schedule, None, None)?;
    Ok((model, report))
}
