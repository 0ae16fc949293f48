//! Model specifications, masked parameters and forward/gradient evaluation.
//!
//! Every forward pass reads the effective weights `w = θ ⊙ m`. Gradients
//! returned by [`Model::model_grads`] are taken with respect to `w`; the
//! gradients with respect to `θ` and `m` follow from the chain rule as
//! `m ⊙ g` and `θ ⊙ g`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradientMap, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        activation: Activation,
        #[serde(default = "default_true")]
        bias: bool,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize, activation: Activation, bias: bool) -> Self {
        LayerSpec::Dense {
            inputs,
            outputs,
            activation,
            bias,
        }
    }

    /// Output shape (without the batch dimension) for a given input shape.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => match input {
                &[n] if n == inputs => Ok(vec![outputs]),
                other => Err(format!("dense layer expects [{inputs}], got {other:?}")),
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => match *input {
                [c, h, w] if c == in_channels => {
                    if stride == 0 || kernel == 0 || kernel > h + 2 * padding || kernel > w + 2 * padding {
                        return Err(format!("conv kernel {kernel} does not fit {h}x{w}"));
                    }
                    Ok(vec![
                        out_channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ])
                }
                _ => Err(format!("conv layer expects [{in_channels}, H, W], got {input:?}")),
            },
            LayerSpec::MaxPool { size, stride } => match *input {
                [c, h, w] if size > 0 && stride > 0 && size <= h && size <= w => {
                    Ok(vec![c, (h - size) / stride + 1, (w - size) / stride + 1])
                }
                _ => Err(format!("max pool {size}/{stride} does not fit {input:?}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// (weight shape, bias shape, fan-in) for layers that carry parameters.
    fn param_shapes(&self) -> Option<(Vec<usize>, Option<Vec<usize>>, usize)> {
        match *self {
            LayerSpec::Dense {
                inputs,
                outputs,
                bias,
                ..
            } => Some((vec![inputs, outputs], bias.then(|| vec![outputs]), inputs)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                bias.then(|| vec![out_channels]),
                in_channels * kernel * kernel,
            )),
            LayerSpec::MaxPool { .. } | LayerSpec::Flatten => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input shape, e.g. `[784]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Whether biases take part in pruning and sparsity accounting.
    #[serde(default)]
    pub prune_biases: bool,
}

impl ModelSpec {
    /// Fully connected ReLU network; the last layer has no activation.
    pub fn mlp(name: &str, widths: &[usize], bias: bool) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 1 == n {
                    Activation::None
                } else {
                    Activation::Relu
                };
                LayerSpec::dense(w[0], w[1], act, bias)
            })
            .collect();
        ModelSpec {
            name: name.to_string(),
            input_shape: vec![widths[0]],
            classes: *widths.last().unwrap_or(&0),
            layers,
            prune_biases: false,
        }
    }

    /// The 784–300–100–10 desk MLP.
    pub fn lenet_300_100() -> Self {
        Self::mlp("lenet-300-100", &[784, 300, 100, 10], true)
    }

    /// `depth` hidden layers of `width` units between `inputs` and `classes`.
    pub fn deep_narrow(inputs: usize, depth: usize, width: usize, classes: usize) -> Self {
        let mut widths = vec![inputs];
        widths.extend(std::iter::repeat(width).take(depth));
        widths.push(classes);
        Self::mlp(&format!("deep-narrow-{depth}x{width}"), &widths, true)
    }

    /// Conv-ReLU-Pool ×2 followed by a dense classifier, for `channels×size×size` inputs.
    pub fn small_conv(channels: usize, size: usize, classes: usize) -> Self {
        let conv = |c_in, c_out| LayerSpec::Conv2d {
            in_channels: c_in,
            out_channels: c_out,
            kernel: 3,
            stride: 1,
            padding: 1,
            activation: Activation::Relu,
            bias: true,
        };
        let pool = LayerSpec::MaxPool { size: 2, stride: 2 };
        let side = size / 4;
        ModelSpec {
            name: "small-conv".into(),
            input_shape: vec![channels, size, size],
            classes,
            layers: vec![
                conv(channels, 8),
                pool.clone(),
                conv(8, 16),
                pool,
                LayerSpec::Flatten,
                LayerSpec::dense(16 * side * side, classes, Activation::None, true),
            ],
            prune_biases: false,
        }
    }

    /// Checks that layers compose and end in `classes` outputs.
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "input shape {:?}",
                self.input_shape
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("no layers".into()));
        }
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::InvalidSpec(format!("layer {i}: {e}")))?;
        }
        if shape != [self.classes] {
            return Err(Error::InvalidSpec(format!(
                "final output {shape:?} does not match {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("model spec serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let spec: ModelSpec =
            toml::from_str(text).map_err(|e| Error::InvalidSpec(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Weight,
    Bias,
}

/// A weight array `θ` with its binary mask `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    id: String,
    layer: usize,
    role: Role,
    value: Tensor,
    mask: Tensor,
    prunable: bool,
}

impl Parameter {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn prunable(&self) -> bool {
        self.prunable
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn is_pruned(&self, index: usize) -> bool {
        self.mask.data()[index] == 0.0
    }

    /// Zeroes the mask at `index`. `θ` is left untouched.
    pub fn prune(&mut self, index: usize) {
        self.mask.data_mut()[index] = 0.0;
    }

    pub fn set_mask(&mut self, mask: Tensor) -> Result<()> {
        if mask.shape() != self.value.shape() {
            return Err(Error::dims(format!(
                "mask {:?} for parameter {:?}",
                mask.shape(),
                self.value.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArg("mask entries must be 0 or 1".into()));
        }
        self.mask = mask;
        Ok(())
    }

    pub fn survivors(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }

    /// `θ ⊙ m`.
    pub fn effective(&self) -> Tensor {
        Tensor::new(
            self.value.shape().to_vec(),
            self.value
                .data()
                .iter()
                .zip(self.mask.data())
                .map(|(&t, &m)| if m != 0.0 { t } else { 0.0 })
                .collect(),
        )
        .expect("mask shape matches value")
    }
}

/// Inputs paired with either class labels (cross-entropy) or regression
/// targets (half squared error).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Classes(Vec<usize>),
    Values(Tensor),
}

impl Batch {
    pub fn classes(x: Tensor, labels: Vec<usize>) -> Self {
        Batch {
            x,
            target: Target::Classes(labels),
        }
    }

    pub fn values(x: Tensor, target: Tensor) -> Self {
        Batch {
            x,
            target: Target::Values(target),
        }
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Parameter>,
    seed: u64,
}

/// Id of a layer's parameter, zero-padded so lexicographic order is layer order.
pub fn param_id(layer: usize, role: Role) -> String {
    match role {
        Role::Weight => format!("{layer:02}.weight"),
        Role::Bias => format!("{layer:02}.bias"),
    }
}

/// Kaiming-uniform (fan-in) initialization; masks start all-ones.
pub fn build_model(spec: ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for (layer, ls) in spec.layers.iter().enumerate() {
        let Some((w_shape, b_shape, fan_in)) = ls.param_shapes() else {
            continue;
        };
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let dist = Uniform::new(-bound, bound);
        let n: usize = w_shape.iter().product();
        let w: Vec<f32> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        params.push(Parameter {
            id: param_id(layer, Role::Weight),
            layer,
            role: Role::Weight,
            mask: Tensor::ones(&w_shape),
            value: Tensor::new(w_shape, w)?,
            prunable: true,
        });
        if let Some(b_shape) = b_shape {
            let bound = (1.0 / fan_in as f64).sqrt() as f32;
            let dist = Uniform::new(-bound, bound);
            let b: Vec<f32> = (0..b_shape[0]).map(|_| dist.sample(&mut rng)).collect();
            params.push(Parameter {
                id: param_id(layer, Role::Bias),
                layer,
                role: Role::Bias,
                mask: Tensor::ones(&b_shape),
                value: Tensor::new(b_shape, b)?,
                prunable: spec.prune_biases,
            });
        }
    }
    Ok(Model { spec, params, seed })
}

impl Model {
    /// Assembles a model from explicit parameter values; masks start all-ones.
    pub fn from_values(spec: ModelSpec, values: Vec<(String, Tensor)>) -> Result<Model> {
        let mut model = build_model(spec, 0)?;
        for (id, value) in values {
            let p = model
                .param_mut(&id)
                .ok_or_else(|| Error::MissingParameter(id.clone()))?;
            if p.value.shape() != value.shape() {
                return Err(Error::dims(format!(
                    "value {:?} for `{id}` of shape {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, id: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.id == id)
    }

    pub fn param_mut(&mut self, id: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.id == id)
    }

    pub fn prunable(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter().filter(|p| p.prunable)
    }

    pub fn prunable_count(&self) -> usize {
        self.prunable().map(Parameter::len).sum()
    }

    pub fn survivor_count(&self) -> usize {
        self.prunable().map(Parameter::survivors).sum()
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    pub fn density(&self) -> f64 {
        match self.prunable_count() {
            0 => 1.0,
            n => self.survivor_count() as f64 / n as f64,
        }
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.density()
    }

    /// Records the forward pass on `tape`, registering each parameter's
    /// effective weights as a gradient leaf.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: &Tensor) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::dims(format!(
                "input {shape:?} does not match [N, {:?}]",
                self.spec.input_shape
            )));
        }
        let mut h = tape.constant(x.clone());
        for (layer, ls) in self.spec.layers.iter().enumerate() {
            match *ls {
                LayerSpec::Dense {
                    activation, bias, ..
                } => {
                    let w = self.leaf(tape, layer, Role::Weight);
                    h = tape.matmul(h, w)?;
                    if bias {
                        let b = self.leaf(tape, layer, Role::Bias);
                        h = tape.add_bias(h, b)?;
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
                    let k = self.leaf(tape, layer, Role::Weight);
                    h = tape.conv2d(h, k, stride, padding)?;
                    if bias {
                        let b = self.leaf(tape, layer, Role::Bias);
                        h = tape.add_channel_bias(h, b)?;
                    }
                    if activation == Activation::Relu {
                        h = tape.relu(h);
                    }
                }
                LayerSpec::MaxPool { size, stride } => h = tape.max_pool2d(h, size, stride)?,
                LayerSpec::Flatten => h = tape.flatten(h)?,
            }
        }
        Ok(h)
    }

    fn leaf(&self, tape: &mut Tape, layer: usize, role: Role) -> Var {
        let p = self
            .params
            .iter()
            .find(|p| p.layer == layer && p.role == role)
            .expect("parameters follow the spec");
        tape.param(p.id.clone(), p.effective())
    }

    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    fn loss_on_tape(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let logits = self.forward_on_tape(tape, &batch.x)?;
        match &batch.target {
            Target::Classes(labels) => tape.cross_entropy(logits, labels),
            Target::Values(t) => tape.half_squared_error(logits, t),
        }
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_on_tape(&mut tape, batch)?;
        tape.scalar_value(l)
    }

    /// Loss and `∂L/∂w` at the effective weights `w = θ ⊙ m`.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, GradientMap)> {
        let mut tape = Tape::new();
        let l = self.loss_on_tape(&mut tape, batch)?;
        let grads = tape.backward(l)?;
        Ok((tape.scalar_value(l)?, grads))
    }

    /// `∂L/∂w` at the effective weights. Masked positions may carry nonzero
    /// gradient.
    pub fn model_grads(&self, batch: &Batch) -> Result<GradientMap> {
        Ok(self.loss_and_grads(batch)?.1)
    }

    /// `∂L/∂m = θ ⊙ ∂L/∂w` for every prunable parameter.
    pub fn mask_gradient(&self, grads: &GradientMap) -> Result<GradientMap> {
        self.prunable()
            .map(|p| {
                let g = grads
                    .get(&p.id)
                    .ok_or_else(|| Error::MissingParameter(p.id.clone()))?;
                Ok((p.id.clone(), p.value.zip_map(g, |t, g| t * g)?))
            })
            .collect()
    }

    /// `∂L/∂θ = m ⊙ ∂L/∂w` for every parameter present in `grads`.
    pub fn theta_gradient(&self, grads: &GradientMap) -> Result<GradientMap> {
        self.params
            .iter()
            .map(|p| {
                let g = grads
                    .get(&p.id)
                    .ok_or_else(|| Error::MissingParameter(p.id.clone()))?;
                Ok((p.id.clone(), p.mask.zip_map(g, |m, g| m * g)?))
            })
            .collect()
    }

    /// Ids of layers whose prunable weights are all masked out.
    pub fn collapsed_layers(&self) -> Vec<usize> {
        self.prunable()
            .filter(|p| p.role == Role::Weight && p.survivors() == 0)
            .map(|p| p.layer)
            .collect()
    }
}

/// Mean softmax cross-entropy as a one-element tensor.
pub fn loss_ce(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    Ok(tape.value(loss).clone())
}
