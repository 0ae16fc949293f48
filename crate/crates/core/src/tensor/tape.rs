//! Wengert-list tape for reverse-mode differentiation.
//!
//! Operations append nodes in execution order, so the node list is always a
//! valid topological order and the backward sweep is a single reverse scan.

use std::collections::BTreeMap;

use super::{to_f32, to_f64, ConvGeometry, PoolGeometry, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    AddChannelBias(usize, usize),
    Relu(usize),
    Conv2d {
        input: usize,
        kernels: usize,
        geom: ConvGeometry,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Reshape(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    HalfSquaredError {
        pred: usize,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Gradients keyed by parameter id, each shaped like its parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap(BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.0.get(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, grad: Tensor) {
        self.0.insert(id.into(), grad);
    }

    pub fn contains(&self, id: &str) -> bool {
        self.0.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }
}

impl FromIterator<(String, Tensor)> for GradientMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        GradientMap(iter.into_iter().collect())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: impl Into<String>, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param: Some(id.into()),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a length-`k` bias to every row of an `n×k` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, k) = self.value(x).as_matrix()?;
        let b = self.value(bias);
        if b.len() != k {
            return Err(Error::dims(format!("bias of {} for {k} columns", b.len())));
        }
        let b = b.data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(k) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x.0, bias.0), &[x.0, bias.0]))
    }

    /// Adds a per-channel bias to an `N×C×H×W` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let &[_, c, h, w] = shape.as_slice() else {
            return Err(Error::dims(format!("channel bias needs N×C×H×W, got {shape:?}")));
        };
        let b = self.value(bias).data().to_vec();
        if b.len() != c {
            return Err(Error::dims(format!("bias of {} for {c} channels", b.len())));
        }
        let mut out = self.value(x).clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let bv = b[i % c];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(out, Op::AddChannelBias(x.0, bias.0), &[x.0, bias.0]))
    }

    /// Rectifier; its adjoint at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x.0), &[x.0])
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(input).shape(),
            self.value(kernels).shape(),
            stride,
            padding,
        )?;
        let out = geom.forward(
            &to_f64(self.value(input).data()),
            &to_f64(self.value(kernels).data()),
        );
        let out = Tensor::new(geom.output_shape(), to_f32(&out))?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input: input.0,
                kernels: kernels.0,
                geom,
            },
            &[input.0, kernels.0],
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (geom, shape) = PoolGeometry::new(self.value(x).shape(), size, stride)?;
        let (values, argmax) = geom.forward(self.value(x).data());
        let out = Tensor::new(shape, values)?;
        Ok(self.push(out, Op::MaxPool { input: x.0, argmax }, &[x.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x.0), &[x.0]))
    }

    /// Collapses all but the leading (batch) dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let batch = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[batch, rest])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| (v as f64 * factor) as f32);
        self.push(out, Op::Scale(x.0, factor), &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum() as f32);
        self.push(out, Op::Sum(x.0), &[x.0])
    }

    /// Mean softmax cross-entropy of `n×K` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).as_matrix()?;
        if labels.len() != n {
            return Err(Error::dims(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let data = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0f64;
        for (row, &label) in data.chunks(k).zip(labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            total += z.ln() - (row[label] as f64 - max);
            probs.extend(exps.iter().map(|e| e / z));
        }
        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            &[logits.0],
        ))
    }

    /// `0.5 · Σ (pred − target)² / n` over an `n×…` prediction.
    pub fn half_squared_error(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::dims(format!(
                "prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let n = p.shape()[0] as f64;
        let loss: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            * 0.5
            / n;
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::HalfSquaredError {
                pred: pred.0,
                target: to_f64(target.data()),
            },
            &[pred.0],
        ))
    }

    /// Loss value recorded at `v`, widened to `f64`.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::NotScalar(t.len()));
        }
        Ok(t.data()[0] as f64)
    }

    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        backward(self, loss)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], idx: usize, contribution: Vec<f64>) {
    match &mut adj[idx] {
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contribution),
    }
}

/// Reverse sweep from a scalar `loss`, returning adjoints for every
/// parameter leaf recorded on the tape.
pub fn backward(tape: &Tape, loss: Var) -> Result<GradientMap> {
    let nodes = &tape.nodes;
    let loss_len = nodes[loss.0].value.len();
    if loss_len != 1 {
        return Err(Error::NotScalar(loss_len));
    }
    let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
    adj[loss.0] = Some(vec![1.0]);
    let mut grads = GradientMap::new();

    for i in (0..=loss.0).rev() {
        let node = &nodes[i];
        let Some(g) = adj[i].take() else {
            continue;
        };
        if !node.needs_grad {
            continue;
        }
        let needs = |j: usize| nodes[j].needs_grad;
        match &node.op {
            Op::Leaf => {
                if let Some(id) = &node.param {
                    grads.insert(id.clone(), Tensor::new(node.value.shape().to_vec(), to_f32(&g))?);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = nodes[*a].value.as_matrix()?;
                let (_, n) = nodes[*b].value.as_matrix()?;
                if needs(*a) {
                    let bv = to_f64(nodes[*b].value.data());
                    let mut da = vec![0.0; m * k];
                    super::gemm::gemm(
                        m,
                        n,
                        k,
                        super::gemm::Operand::row_major(&g, n),
                        super::gemm::Operand::transposed(&bv, n),
                        &mut da,
                        false,
                    );
                    accumulate(&mut adj, *a, da);
                }
                if needs(*b) {
                    let av = to_f64(nodes[*a].value.data());
                    let mut db = vec![0.0; k * n];
                    super::gemm::gemm(
                        k,
                        m,
                        n,
                        super::gemm::Operand::transposed(&av, k),
                        super::gemm::Operand::row_major(&g, n),
                        &mut db,
                        false,
                    );
                    accumulate(&mut adj, *b, db);
                }
            }
            Op::AddBias(x, b) => {
                if needs(*b) {
                    let k = nodes[*b].value.len();
                    let mut db = vec![0.0; k];
                    for row in g.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    accumulate(&mut adj, *b, db);
                }
                if needs(*x) {
                    accumulate(&mut adj, *x, g);
                }
            }
            Op::AddChannelBias(x, b) => {
                if needs(*b) {
                    let shape = nodes[*x].value.shape();
                    let (c, plane) = (shape[1], shape[2] * shape[3]);
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    accumulate(&mut adj, *b, db);
                }
                if needs(*x) {
                    accumulate(&mut adj, *x, g);
                }
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &out)| if out > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(&mut adj, *x, dx);
            }
            Op::Conv2d {
                input,
                kernels,
                geom,
            } => {
                let (d_in, d_k) = geom.backward(
                    &to_f64(nodes[*input].value.data()),
                    &to_f64(nodes[*kernels].value.data()),
                    &g,
                );
                if needs(*input) {
                    accumulate(&mut adj, *input, d_in);
                }
                if needs(*kernels) {
                    accumulate(&mut adj, *kernels, d_k);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; nodes[*input].value.len()];
                for (&src, &gv) in argmax.iter().zip(&g) {
                    dx[src] += gv;
                }
                accumulate(&mut adj, *input, dx);
            }
            Op::Reshape(x) => accumulate(&mut adj, *x, g),
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(&mut adj, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(&mut adj, *b, g);
                }
            }
            Op::Mul(a, b) => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                if needs(*a) {
                    let da = g.iter().zip(bv).map(|(&gv, &y)| gv * y as f64).collect();
                    accumulate(&mut adj, *a, da);
                }
                if needs(*b) {
                    let db = g.iter().zip(av).map(|(&gv, &x)| gv * x as f64).collect();
                    accumulate(&mut adj, *b, db);
                }
            }
            Op::Scale(x, factor) => {
                accumulate(&mut adj, *x, g.iter().map(|v| v * factor).collect());
            }
            Op::Sum(x) => {
                accumulate(&mut adj, *x, vec![g[0]; nodes[*x].value.len()]);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut d = probs.clone();
                for (row, &label) in labels.iter().enumerate() {
                    d[row * k + label] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                accumulate(&mut adj, *logits, d);
            }
            Op::HalfSquaredError { pred, target } => {
                let p = &nodes[*pred].value;
                let scale = g[0] / p.shape()[0] as f64;
                let d = p
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&a, &b)| (a as f64 - b) * scale)
                    .collect();
                accumulate(&mut adj, *pred, d);
            }
        }
    }

    // Parameters the loss never reached still get a (zero) entry.
    for node in &nodes[..=loss.0] {
        if let (Op::Leaf, Some(id)) = (&node.op, &node.param) {
            if !grads.contains(id) {
                grads.insert(id.clone(), Tensor::zeros(node.value.shape()));
            }
        }
    }
    Ok(grads)
}
