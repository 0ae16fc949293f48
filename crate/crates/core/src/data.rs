//! IDX image/label files, seeded Gaussian-mixture fixtures and batching.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
    stats: NormStats,
}

/// Channel count of a per-sample shape: the leading axis of `C×H×W`, else 1.
fn channels_of(sample_shape: &[usize]) -> usize {
    if sample_shape.len() == 3 {
        sample_shape[0]
    } else {
        1
    }
}

impl Dataset {
    /// Normalizes raw inputs with `stats`, or with their own statistics when
    /// `stats` is `None`.
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
        stats: Option<NormStats>,
    ) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let channels = channels_of(&inputs.shape()[1..]);
        let stats = match stats {
            Some(s) if s.mean.len() != channels || s.std.len() != channels => {
                return Err(Error::InvalidArg(format!(
                    "normalization stats for {} channels, data has {channels}",
                    s.mean.len()
                )))
            }
            Some(s) => s,
            None => compute_stats(&inputs, channels),
        };
        let mut inputs = inputs;
        let per_channel = inputs.len() / inputs.shape()[0] / channels;
        for (i, chunk) in inputs.data_mut().chunks_mut(per_channel).enumerate() {
            let c = i % channels;
            let (mean, std) = (stats.mean[c], stats.std[c]);
            chunk
                .iter_mut()
                .for_each(|v| *v = ((*v as f64 - mean) / std) as f32);
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            split,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Same samples viewed with a different per-sample shape (e.g. flattened).
    pub fn reshaped(&self, sample_shape: &[usize]) -> Result<Dataset> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(sample_shape);
        Ok(Dataset {
            inputs: self.inputs.reshape(&shape)?,
            ..self.clone()
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let stride = self.inputs.len() / self.len();
        let mut x = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            x.extend_from_slice(&self.inputs.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Batch::classes(
            Tensor::new(shape, x).expect("batch shape"),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// All samples, in order, as a single batch.
    pub fn full_batch(&self) -> Batch {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }
}

fn compute_stats(inputs: &Tensor, channels: usize) -> NormStats {
    let per_channel = inputs.len() / inputs.shape()[0] / channels;
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut count = vec![0usize; channels];
    for (i, chunk) in inputs.data().chunks(per_channel).enumerate() {
        let c = i % channels;
        for &v in chunk {
            sum[c] += v as f64;
            sq[c] += (v as f64) * (v as f64);
        }
        count[c] += chunk.len();
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    let std = sq
        .iter()
        .zip(&count)
        .zip(&mean)
        .map(|((q, &n), m)| {
            let var = (q / n as f64 - m * m).max(0.0);
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    NormStats { mean, std }
}

/// Raw IDX image file contents (`count × rows × cols` unsigned bytes).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Raw IDX label file contents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxLabels {
    pub labels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::TruncatedFile(format!("{what} header")))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = read_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

impl IdxImages {
    pub fn count(&self) -> usize {
        match self.rows * self.cols {
            0 => 0,
            n => self.pixels.len() / n,
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        check_magic(bytes, IDX_IMAGES_MAGIC, "image")?;
        let count = read_u32(bytes, 4, "image")? as usize;
        let rows = read_u32(bytes, 8, "image")? as usize;
        let cols = read_u32(bytes, 12, "image")? as usize;
        let need = count * rows * cols;
        let payload = &bytes[16..];
        if payload.len() < need {
            return Err(Error::TruncatedFile(format!(
                "image payload has {} of {need} bytes",
                payload.len()
            )));
        }
        if payload.len() > need {
            return Err(Error::InvalidArg(format!(
                "{} trailing bytes after image payload",
                payload.len() - need
            )));
        }
        Ok(IdxImages {
            rows,
            cols,
            pixels: payload.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for dim in [self.count(), self.rows, self.cols] {
            out.extend_from_slice(&(dim as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }
}

impl IdxLabels {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        check_magic(bytes, IDX_LABELS_MAGIC, "label")?;
        let count = read_u32(bytes, 4, "label")? as usize;
        let payload = &bytes[8..];
        if payload.len() < count {
            return Err(Error::TruncatedFile(format!(
                "label payload has {} of {count} bytes",
                payload.len()
            )));
        }
        if payload.len() > count {
            return Err(Error::InvalidArg(format!(
                "{} trailing bytes after label payload",
                payload.len() - count
            )));
        }
        Ok(IdxLabels {
            labels: payload.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.labels.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.labels.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.labels);
        out
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Decodes an image/label pair into a `n×1×rows×cols` dataset with pixels
/// scaled to `[0, 1]` and then normalized. Test splits should pass the
/// training statistics.
pub fn load_idx_split(
    images_path: &Path,
    labels_path: &Path,
    classes: Option<usize>,
    split: Split,
    stats: Option<NormStats>,
) -> Result<Dataset> {
    let images = IdxImages::parse(&read_file(images_path)?)?;
    let labels = IdxLabels::parse(&read_file(labels_path)?)?;
    if images.count() != labels.labels.len() {
        return Err(Error::CountMismatch {
            images: images.count(),
            labels: labels.labels.len(),
        });
    }
    if images.count() == 0 {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<usize> = labels.labels.iter().map(|&l| l as usize).collect();
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let inputs = Tensor::new(
        vec![images.count(), 1, images.rows, images.cols],
        images.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )?;
    Dataset::new(inputs, labels, classes, split, stats)
}

/// Training-split IDX dataset normalized with its own statistics.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    load_idx_split(images_path, labels_path, None, Split::Train, None)
}

/// Parameters of a Gaussian-mixture classification fixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub classes: usize,
    pub dim: usize,
    /// Minimum pairwise distance between class means, in units of the unit
    /// per-coordinate noise.
    pub separation: f64,
    pub seed: u64,
}

impl GaussianMixture {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArg(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.dim == 0 {
            return Err(Error::InvalidArg("dimension must be positive".into()));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::InvalidArg(format!("separation {}", self.separation)));
        }
        Ok(())
    }

    /// Class means scaled so the closest pair sits exactly `separation` apart.
    pub fn means(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0));
        let mut means: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let mut min_dist = f64::INFINITY;
        for a in 0..self.classes {
            for b in a + 1..self.classes {
                let d: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(d);
            }
        }
        if !(min_dist > 0.0) {
            return Err(Error::InvalidArg("degenerate class means".into()));
        }
        let scale = self.separation / min_dist;
        means.iter_mut().flatten().for_each(|v| *v *= scale);
        Ok(means)
    }

    /// Raw (unnormalized) samples from sub-stream `stream`, classes interleaved.
    fn raw(&self, per_class: usize, stream: u64) -> Result<(Tensor, Vec<usize>)> {
        if per_class == 0 {
            return Err(Error::InvalidArg("per_class must be positive".into()));
        }
        let means = self.means()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, stream));
        let n = per_class * self.classes;
        let mut x = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % self.classes;
            for &m in &means[c] {
                let noise: f64 = StandardNormal.sample(&mut rng);
                x.push((m + noise) as f32);
            }
            labels.push(c);
        }
        Ok((Tensor::new(vec![n, self.dim], x)?, labels))
    }

    /// Train and test splits drawn from disjoint streams; the test split is
    /// normalized with training statistics.
    pub fn split(&self, train_per_class: usize, test_per_class: usize) -> Result<(Dataset, Dataset)> {
        let (x, y) = self.raw(train_per_class, 1)?;
        let train = Dataset::new(x, y, self.classes, Split::Train, None)?;
        let (x, y) = self.raw(test_per_class, 2)?;
        let test = Dataset::new(x, y, self.classes, Split::Test, Some(train.stats().clone()))?;
        Ok((train, test))
    }
}

/// Balanced `classes`-way Gaussian clusters in `dim` dimensions.
pub fn synth_gaussians(
    classes: usize,
    dim: usize,
    per_class: usize,
    seed: u64,
    separation: f64,
) -> Result<Dataset> {
    let mix = GaussianMixture {
        classes,
        dim,
        separation,
        seed,
    };
    let (x, y) = mix.raw(per_class, 1)?;
    Dataset::new(x, y, classes, Split::Train, None)
}

/// Seeded per-epoch shuffling over a dataset. Iterating yields the batches of
/// the current epoch; [`BatchIterator::next_epoch`] reshuffles.
#[derive(Debug)]
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
}

pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<BatchIterator<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArg("batch size must be at least 1".into()));
    }
    let mut it = BatchIterator {
        dataset,
        batch_size,
        seed,
        epoch: 0,
        order: Vec::new(),
        cursor: 0,
    };
    it.shuffle();
    Ok(it)
}

impl BatchIterator<'_> {
    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.epoch as u64));
        self.order = (0..self.dataset.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_epoch(&mut self) {
        self.epoch += 1;
        self.shuffle();
    }

    /// Index batches of the current epoch, from the start.
    pub fn index_batches(&self) -> Vec<Vec<usize>> {
        self.order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.dataset.batch(&self.order[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }
}

/// Draws independent random batches (without replacement within a batch).
#[derive(Debug)]
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArg("batch size must be at least 1".into()));
        }
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(BatchSampler {
            dataset,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self) -> Batch {
        let n = self.dataset.len();
        let idx = index::sample(&mut self.rng, n, self.batch_size.min(n)).into_vec();
        self.dataset.batch(&idx)
    }
}
