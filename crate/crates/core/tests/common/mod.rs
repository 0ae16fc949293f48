//! Test-only oracles: an f64 reference network written directly from the
//! layer definitions, a mask-as-leaf gradient path, random model
//! generators and rank statistics.
#![allow(dead_code)]

use std::collections::BTreeMap;

use prunelab::nn::{
    param_id, Activation, Batch, LayerSpec, Model, ModelSpec, Role, Target,
};
use prunelab::tensor::{GradientMap, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Forward pass in f64, one sample at a time, with plain loops.
/// `weights` maps parameter id to effective (masked) values.
pub struct Reference<'a> {
    pub spec: &'a ModelSpec,
    pub weights: BTreeMap<String, Vec<f64>>,
}

/// Loss plus the discrete branch taken at every ReLU and max-pool, so a
/// finite-difference probe can tell when it stepped across a kink.
pub struct Evaluation {
    pub loss: f64,
    pub pattern: Vec<u32>,
    pub logits: Vec<Vec<f64>>,
}

impl<'a> Reference<'a> {
    pub fn from_model(model: &'a Model) -> Self {
        let weights = model
            .params()
            .iter()
            .map(|p| {
                let w = p.effective();
                (p.id().to_string(), w.data().iter().map(|&v| v as f64).collect())
            })
            .collect();
        Reference {
            spec: model.spec(),
            weights,
        }
    }

    fn get(&self, layer: usize, role: Role) -> Option<&Vec<f64>> {
        self.weights.get(&param_id(layer, role))
    }

    pub fn evaluate(&self, x: &Tensor, target: &Target) -> Evaluation {
        let sample_len: usize = self.spec.input_shape.iter().product();
        let n = x.shape()[0];
        let mut pattern = Vec::new();
        let mut logits = Vec::with_capacity(n);
        let mut loss = 0.0;
        for s in 0..n {
            let mut h: Vec<f64> = x.data()[s * sample_len..(s + 1) * sample_len]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let mut shape = self.spec.input_shape.clone();
            for (layer, ls) in self.spec.layers.iter().enumerate() {
                match *ls {
                    LayerSpec::Dense {
                        inputs,
                        outputs,
                        activation,
                        bias,
                    } => {
                        let w = self.get(layer, Role::Weight).unwrap();
                        let mut out = vec![0.0; outputs];
                        for (o, v) in out.iter_mut().enumerate() {
                            for i in 0..inputs {
                                *v += h[i] * w[i * outputs + o];
                            }
                            if bias {
                                *v += self.get(layer, Role::Bias).unwrap()[o];
                            }
                        }
                        h = out;
                        shape = vec![outputs];
                        if activation == Activation::Relu {
                            relu(&mut h, &mut pattern);
                        }
                    }
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        activation,
                        bias,
                    } => {
                        let (ih, iw) = (shape[1] as isize, shape[2] as isize);
                        let oh = ((ih + 2 * padding as isize - kernel as isize) / stride as isize + 1) as usize;
                        let ow = ((iw + 2 * padding as isize - kernel as isize) / stride as isize + 1) as usize;
                        let k = self.get(layer, Role::Weight).unwrap();
                        let mut out = vec![0.0; out_channels * oh * ow];
                        for f in 0..out_channels {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut v = if bias {
                                        self.get(layer, Role::Bias).unwrap()[f]
                                    } else {
                                        0.0
                                    };
                                    for c in 0..in_channels {
                                        for ky in 0..kernel {
                                            for kx in 0..kernel {
                                                let y = (oy * stride + ky) as isize - padding as isize;
                                                let xx = (ox * stride + kx) as isize - padding as isize;
                                                if y < 0 || xx < 0 || y >= ih || xx >= iw {
                                                    continue;
                                                }
                                                let xi = (c as isize * ih + y) * iw + xx;
                                                let ki = ((f * in_channels + c) * kernel + ky) * kernel + kx;
                                                v += h[xi as usize] * k[ki];
                                            }
                                        }
                                    }
                                    out[(f * oh + oy) * ow + ox] = v;
                                }
                            }
                        }
                        h = out;
                        shape = vec![out_channels, oh, ow];
                        if activation == Activation::Relu {
                            relu(&mut h, &mut pattern);
                        }
                    }
                    LayerSpec::MaxPool { size, stride } => {
                        let (c, ih, iw) = (shape[0], shape[1], shape[2]);
                        let oh = (ih - size) / stride + 1;
                        let ow = (iw - size) / stride + 1;
                        let mut out = vec![0.0; c * oh * ow];
                        for ch in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut best = (f64::NEG_INFINITY, 0u32);
                                    for dy in 0..size {
                                        for dx in 0..size {
                                            let v = h[(ch * ih + oy * stride + dy) * iw + ox * stride + dx];
                                            if v > best.0 {
                                                best = (v, (dy * size + dx) as u32);
                                            }
                                        }
                                    }
                                    pattern.push(best.1);
                                    out[(ch * oh + oy) * ow + ox] = best.0;
                                }
                            }
                        }
                        h = out;
                        shape = vec![c, oh, ow];
                    }
                    LayerSpec::Flatten => shape = vec![h.len()],
                }
            }
            loss += match target {
                Target::Classes(labels) => {
                    let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    lse - h[labels[s]]
                }
                Target::Values(t) => {
                    let row = &t.data()[s * h.len()..(s + 1) * h.len()];
                    0.5 * h.iter().zip(row).map(|(p, &q)| (p - q as f64).powi(2)).sum::<f64>()
                }
            };
            logits.push(h);
        }
        Evaluation {
            loss: loss / n as f64,
            pattern,
            logits,
        }
    }
}

fn relu(h: &mut [f64], pattern: &mut Vec<u32>) {
    for v in h {
        pattern.push(u32::from(*v > 0.0));
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient of the loss with respect to θ and m separately, recorded with
/// `w = θ ⊙ m` as an explicit product on the tape.
pub fn leaf_grads(model: &Model, batch: &Batch) -> (GradientMap, GradientMap) {
    let mut tape = Tape::new();
    let mut effective = BTreeMap::new();
    for p in model.params() {
        let t = tape.param(format!("theta:{}", p.id()), p.value().clone());
        let m = tape.param(format!("mask:{}", p.id()), p.mask().clone());
        effective.insert(p.id().to_string(), tape.mul(t, m).unwrap());
    }
    let spec = model.spec();
    let mut h = tape.constant(batch.x.clone());
    for (layer, ls) in spec.layers.iter().enumerate() {
        let w = |role| effective[&param_id(layer, role)];
        match *ls {
            LayerSpec::Dense {
                activation, bias, ..
            } => {
                h = tape.matmul(h, w(Role::Weight)).unwrap();
                if bias {
                    h = tape.add_bias(h, w(Role::Bias)).unwrap();
                }
                if activation == Activation::Relu {
                    h = tape.relu(h);
                }
            }
            LayerSpec::Conv2d {
                stride,
                padding,
                activation,
                bias,
                ..
            } => {
                h = tape.conv2d(h, w(Role::Weight), stride, padding).unwrap();
                if bias {
                    h = tape.add_channel_bias(h, w(Role::Bias)).unwrap();
                }
                if activation == Activation::Relu {
                    h = tape.relu(h);
                }
            }
            LayerSpec::MaxPool { size, stride } => h = tape.max_pool2d(h, size, stride).unwrap(),
            LayerSpec::Flatten => h = tape.flatten(h).unwrap(),
        }
    }
    let loss = match &batch.target {
        Target::Classes(labels) => tape.cross_entropy(h, labels).unwrap(),
        Target::Values(t) => tape.half_squared_error(h, t).unwrap(),
    };
    let all = tape.backward(loss).unwrap();
    let mut theta = GradientMap::new();
    let mut mask = GradientMap::new();
    for (k, g) in all.iter() {
        if let Some(id) = k.strip_prefix("theta:") {
            theta.insert(id, g.clone());
        } else if let Some(id) = k.strip_prefix("mask:") {
            mask.insert(id, g.clone());
        }
    }
    (theta, mask)
}

/// Random ReLU MLP: 1..=4 hidden layers (so ≤ 5 weight layers) of ≤ 64 units.
pub fn random_mlp_spec(rng: &mut ChaCha8Rng, bias: Option<bool>) -> ModelSpec {
    let depth = rng.gen_range(1..=5);
    let mut widths = vec![rng.gen_range(1..=12)];
    for _ in 1..depth {
        let wide = rng.gen_bool(0.1);
        widths.push(if wide { 64 } else { rng.gen_range(2..=24) });
    }
    widths.push(rng.gen_range(2..=6));
    let bias = bias.unwrap_or_else(|| rng.gen_bool(0.5));
    ModelSpec::mlp("random-mlp", &widths, bias)
}

/// Conv → ReLU → MaxPool → Flatten → Dense, small enough to probe every weight.
pub fn random_conv_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let in_channels = rng.gen_range(1..=2);
    let out_channels = rng.gen_range(1..=3);
    let size = rng.gen_range(5..=7);
    let padding = rng.gen_range(0..=1);
    let conv_side = size + 2 * padding - 3 + 1;
    let pooled = (conv_side - 2) / 2 + 1;
    let classes = rng.gen_range(2..=4);
    ModelSpec {
        name: "random-conv".into(),
        input_shape: vec![in_channels, size, size],
        classes,
        layers: vec![
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel: 3,
                stride: 1,
                padding,
                activation: Activation::Relu,
                bias: rng.gen_bool(0.5),
            },
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::dense(out_channels * pooled * pooled, classes, Activation::None, true),
        ],
        prune_biases: false,
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, spec: &ModelSpec, n: usize) -> Batch {
    let len: usize = spec.input_shape.iter().product();
    let x: Vec<f32> = (0..n * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut shape = vec![n];
    shape.extend(&spec.input_shape);
    let labels = (0..n).map(|_| rng.gen_range(0..spec.classes)).collect();
    Batch::classes(Tensor::new(shape, x).unwrap(), labels)
}

/// Masks each prunable element with probability `p`.
pub fn random_masks(rng: &mut ChaCha8Rng, model: &mut Model, p: f64) {
    for param in model.params_mut() {
        if !param.prunable() {
            continue;
        }
        for j in 0..param.len() {
            if rng.gen_bool(p) {
                param.prune(j);
            }
        }
    }
}

/// Average ranks, ties sharing the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// `max |a − b| / max |b|` over matching entries.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn as_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Spearman correlation between SNIP's `|θ ⊙ g|` and the exact `|ΔL_j|`
/// of removing each weight, on an 8–12–3 MLP (132 weights) after one epoch
/// of SGD (lr 0.005, momentum 0.9, batch 16) over 180 Gaussian-mixture
/// samples. Both are measured on the whole training set.
pub fn snip_fidelity(seed: u64) -> f64 {
    use prunelab::data::GaussianMixture;
    use prunelab::optim::{LrSchedule, OptimizerConfig, OptimizerKind};
    use prunelab::prune::{connection_sensitivity_exact, score_snip};
    use prunelab::train::{train_fresh, TrainSettings};

    let (train, _) = GaussianMixture {
        classes: 3,
        dim: 8,
        separation: 3.0,
        seed,
    }
    .split(60, 2)
    .unwrap();
    let settings = TrainSettings {
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Sgd { momentum: 0.9 },
            schedule: LrSchedule::Constant { lr: 0.005 },
        },
        batch_size: 16,
    };
    let mut model =
        prunelab::nn::build_model(ModelSpec::mlp("tiny", &[8, 12, 3], true), seed + 100).unwrap();
    train_fresh(&mut model, &train, &settings, 0..1, seed).unwrap();
    let batch = train.full_batch();
    let z = score_snip(&model, &batch).unwrap();
    let (mut approx, mut exact) = (Vec::new(), Vec::new());
    for p in model.prunable() {
        for j in 0..p.len() {
            approx.push(z.get(p.id()).unwrap().data()[j] as f64);
            exact.push(connection_sensitivity_exact(&model, &batch, p.id(), j).unwrap().abs());
        }
    }
    assert!(approx.len() <= 200);
    spearman(&approx, &exact)
}

/// Outcome of probing one model's weights with central differences.
pub struct GradCheck {
    pub rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares `model_grads` with `finite_diff_gradient` (step 1e-3) of the f64
/// reference loss, per effective weight. Probes whose ± evaluation switches
/// a ReLU or pooling branch are left out and counted.
pub fn gradient_check(model: &Model, batch: &Batch) -> GradCheck {
    let grads = model.model_grads(batch).unwrap();
    let base_ref = Reference::from_model(model);
    let base = base_ref.evaluate(&batch.x, &batch.target);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for p in model.params() {
        let at = p.effective();
        let crossed = std::cell::RefCell::new(vec![false; at.len()]);
        let fd = prunelab::tensor::finite_diff_gradient(
            |probe: &Tensor| {
                let mut r = Reference::from_model(model);
                r.weights
                    .insert(p.id().to_string(), as_f64(probe));
                let e = r.evaluate(&batch.x, &batch.target);
                if e.pattern != base.pattern {
                    let j = probe
                        .data()
                        .iter()
                        .zip(at.data())
                        .position(|(a, b)| a != b)
                        .unwrap();
                    crossed.borrow_mut()[j] = true;
                }
                Ok(e.loss)
            },
            &at,
            1e-3,
        )
        .unwrap();
        let g = grads.get(p.id()).unwrap();
        for (j, &bad) in crossed.borrow().iter().enumerate() {
            if bad {
                skipped += 1;
            } else {
                analytic.push(g.data()[j] as f64);
                numeric.push(fd.data()[j] as f64);
            }
        }
    }
    GradCheck {
        rel_err: rel_err(&analytic, &numeric),
        checked: analytic.len(),
        skipped,
    }
}
