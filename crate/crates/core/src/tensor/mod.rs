//! Dense `f32` tensors, a recording tape for reverse-mode differentiation,
//! and a central-difference gradient oracle.
//!
//! Values are stored as `f32`. Every contraction (matrix products,
//! convolutions, reductions) accumulates in `f64` and rounds once on store,
//! and every adjoint produced by [`Tape::backward`] is accumulated in `f64`.

mod gemm;
mod gradcheck;
mod tape;

pub use gradcheck::finite_diff_gradient;
pub use tape::{backward, GradientMap, Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major `f32` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dims(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dims(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dims("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dims(format!(
                "elementwise shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix()?;
        let (k2, n) = other.as_matrix()?;
        if k != k2 {
            return Err(Error::dims(format!(
                "matmul of {m}x{k} by {k2}x{n}: inner dimensions differ"
            )));
        }
        let a = to_f64(&self.data);
        let b = to_f64(&other.data);
        let mut c = vec![0.0f64; m * n];
        gemm::gemm(
            m,
            k,
            n,
            gemm::Operand::row_major(&a, k),
            gemm::Operand::row_major(&b, n),
            &mut c,
            false,
        );
        Ok(Tensor {
            shape: vec![m, n],
            data: to_f32(&c),
        })
    }

    pub(crate) fn as_matrix(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::dims(format!("expected a matrix, got shape {other:?}"))),
        }
    }
}

pub(crate) fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub(crate) fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Geometry of a 2-D cross-correlation over an `N×C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[batch, channels, height, width], &[filters, kc, kh, kw]) = (input, kernels) else {
            return Err(Error::dims(format!(
                "conv2d expects N×C×H×W input and F×C×kh×kw kernels, got {input:?} and {kernels:?}"
            )));
        };
        if stride == 0 {
            return Err(Error::dims("conv2d stride must be positive"));
        }
        if kc != channels {
            return Err(Error::dims(format!(
                "conv2d kernel has {kc} channels, input has {channels}"
            )));
        }
        if kh > height + 2 * padding || kw > width + 2 * padding {
            return Err(Error::dims(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                height + 2 * padding,
                width + 2 * padding
            )));
        }
        Ok(ConvGeometry {
            batch,
            channels,
            height,
            width,
            filters,
            kh,
            kw,
            stride,
            padding,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel offset within one sample for column entry (row, pixel), if in bounds.
    fn source(&self, row: usize, pixel: usize) -> Option<usize> {
        let c = row / (self.kh * self.kw);
        let i = (row / self.kw) % self.kh;
        let j = row % self.kw;
        let oy = pixel / self.out_w;
        let ox = pixel % self.out_w;
        let y = (oy * self.stride + i).checked_sub(self.padding)?;
        let x = (ox * self.stride + j).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then(|| (c * self.height + y) * self.width + x)
    }

    /// Unfolds one sample into a `(C·kh·kw) × (H'·W')` column matrix.
    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let p = self.out_pixels();
        for row in 0..self.patch_len() {
            for pixel in 0..p {
                cols[row * p + pixel] = self.source(row, pixel).map_or(0.0, |s| sample[s]);
            }
        }
    }

    fn col2im(&self, cols: &[f64], sample: &mut [f64]) {
        let p = self.out_pixels();
        for row in 0..self.patch_len() {
            for pixel in 0..p {
                if let Some(s) = self.source(row, pixel) {
                    sample[s] += cols[row * p + pixel];
                }
            }
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.out_h, self.out_w]
    }

    pub fn forward(&self, input: &[f64], kernels: &[f64]) -> Vec<f64> {
        let (plen, p) = (self.patch_len(), self.out_pixels());
        let in_len = self.channels * self.height * self.width;
        let out_len = self.filters * p;
        let mut out = vec![0.0; self.batch * out_len];
        let mut cols = vec![0.0; plen * p];
        for n in 0..self.batch {
            self.im2col(&input[n * in_len..(n + 1) * in_len], &mut cols);
            gemm::gemm(
                self.filters,
                plen,
                p,
                gemm::Operand::row_major(kernels, plen),
                gemm::Operand::row_major(&cols, p),
                &mut out[n * out_len..(n + 1) * out_len],
                false,
            );
        }
        out
    }

    /// Returns (input adjoint, kernel adjoint) for an output adjoint.
    pub fn backward(&self, input: &[f64], kernels: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (plen, p) = (self.patch_len(), self.out_pixels());
        let in_len = self.channels * self.height * self.width;
        let out_len = self.filters * p;
        let mut d_input = vec![0.0; self.batch * in_len];
        let mut d_kernels = vec![0.0; self.filters * plen];
        let mut cols = vec![0.0; plen * p];
        let mut d_cols = vec![0.0; plen * p];
        for n in 0..self.batch {
            let g = &grad_out[n * out_len..(n + 1) * out_len];
            self.im2col(&input[n * in_len..(n + 1) * in_len], &mut cols);
            // dK += G · colsᵀ
            gemm::gemm(
                self.filters,
                p,
                plen,
                gemm::Operand::row_major(g, p),
                gemm::Operand::transposed(&cols, p),
                &mut d_kernels,
                true,
            );
            // dcols = Kᵀ · G
            gemm::gemm(
                plen,
                self.filters,
                p,
                gemm::Operand::transposed(kernels, plen),
                gemm::Operand::row_major(g, p),
                &mut d_cols,
                false,
            );
            self.col2im(&d_cols, &mut d_input[n * in_len..(n + 1) * in_len]);
        }
        (d_input, d_kernels)
    }
}

/// Cross-correlation of `input` (N×C×H×W) with `kernels` (F×C×kh×kw).
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let geom = ConvGeometry::new(input.shape(), kernels.shape(), stride, padding)?;
    let out = geom.forward(&to_f64(input.data()), &to_f64(kernels.data()));
    Tensor::new(geom.output_shape(), to_f32(&out))
}

/// Window geometry for max pooling without padding.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeometry {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub size: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], size: usize, stride: usize) -> Result<(Self, Vec<usize>)> {
        let &[n, c, h, w] = input else {
            return Err(Error::dims(format!("max pool expects N×C×H×W, got {input:?}")));
        };
        if size == 0 || stride == 0 || size > h || size > w {
            return Err(Error::dims(format!(
                "pool window {size} (stride {stride}) does not fit {h}x{w}"
            )));
        }
        let geom = PoolGeometry {
            planes: n * c,
            height: h,
            width: w,
            size,
            stride,
            out_h: (h - size) / stride + 1,
            out_w: (w - size) / stride + 1,
        };
        Ok((geom, vec![n, c, geom.out_h, geom.out_w]))
    }

    /// Pooled values and, for each output, the flat index of the first maximal input.
    pub fn forward(&self, input: &[f32]) -> (Vec<f32>, Vec<usize>) {
        let mut values = Vec::with_capacity(self.planes * self.out_h * self.out_w);
        let mut argmax = Vec::with_capacity(values.capacity());
        for plane in 0..self.planes {
            let base = plane * self.height * self.width;
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let mut best = base + oy * self.stride * self.width + ox * self.stride;
                    for i in 0..self.size {
                        for j in 0..self.size {
                            let idx = base + (oy * self.stride + i) * self.width + ox * self.stride + j;
                            if input[idx] > input[best] {
                                best = idx;
                            }
                        }
                    }
                    values.push(input[best]);
                    argmax.push(best);
                }
            }
        }
        (values, argmax)
    }
}

pub fn max_pool2d(input: &Tensor, size: usize, stride: usize) -> Result<Tensor> {
    let (geom, shape) = PoolGeometry::new(input.shape(), size, stride)?;
    let (values, _) = geom.forward(input.data());
    Tensor::new(shape, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_inconsistent_shape() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0], &[7.0]]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_small_product() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn conv_unit_kernel_doubles() {
        let x = Tensor::new(vec![1, 1, 2, 3], vec![1.0, -2.0, 3.0, 4.5, 0.0, 6.0]).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 3]);
        assert_eq!(y.data(), &[2.0, -4.0, 6.0, 9.0, 0.0, 12.0]);
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_kernel_too_large() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 5, 5]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(Error::DimensionMismatch(_))));
        // padding 1 makes the same kernel fit
        assert_eq!(conv2d(&x, &k, 1, 1).unwrap().shape(), &[1, 1, 1, 1]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::ones(&[1, 2, 3, 3]);
        let k = Tensor::ones(&[1, 1, 2, 2]);
        assert!(conv2d(&x, &k, 1, 0).is_err());
    }

    #[test]
    fn conv_stride_and_padding_shape() {
        let x = Tensor::ones(&[2, 3, 7, 5]);
        let k = Tensor::ones(&[4, 3, 3, 3]);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 3]);
        // corner window sees a 2x2 patch of ones per channel
        assert_eq!(y.data()[0], 12.0);
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = Tensor::new(
            vec![1, 1, 2, 4],
            vec![1.0, 5.0, -1.0, 0.0, 2.0, 3.0, 7.0, 7.0],
        )
        .unwrap();
        let y = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
    }
}
