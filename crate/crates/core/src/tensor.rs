//! Dense row-major `f64` tensors and the numerical kernels the classifier is
//! built from: matrix products, strided/padded 2-D cross-correlation and its
//! two adjoints, the logistic sigmoid, reductions and seeded sampling.
//!
//! There are no strides or views. Every tensor owns a flat buffer whose length
//! equals the product of its extents, and every operation returns a fresh
//! tensor.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    /// Panics on a zero extent; shapes passed here are fixed by the caller.
    pub fn full(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("invalid shape");
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the flat buffer; the length is fixed so the shape
    /// invariant cannot be broken through it.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "zip_with")?;
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

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::dim(format!(
                "dot of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn sq_norm(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2, "row() on a non-matrix");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    fn expect_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim(format!("invalid shape {shape:?}")));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `[m×k] · [k×n] → [m×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim(format!(
            "matmul of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Stride/padding description of one convolution, resolved against concrete
/// input and kernel extents.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_channels: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn resolve(
        channels: usize,
        in_h: usize,
        in_w: usize,
        kernel_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel_shape.len() != 4 {
            return Err(Error::dim(format!(
                "kernels must be K×C×kh×kw, got {kernel_shape:?}"
            )));
        }
        if kernel_shape[1] != channels {
            return Err(Error::dim(format!(
                "kernels {kernel_shape:?} expect {} channels, input has {channels}",
                kernel_shape[1]
            )));
        }
        if stride == 0 {
            return Err(Error::dim("stride must be positive"));
        }
        let (k_h, k_w) = (kernel_shape[2], kernel_shape[3]);
        let extent = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * pad;
            if padded < k {
                return Err(Error::dim(format!(
                    "non-positive output extent: input {len}, pad {pad}, kernel {k}"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(ConvGeom {
            channels,
            in_h,
            in_w,
            out_channels: kernel_shape[0],
            k_h,
            k_w,
            out_h: extent(in_h, k_h)?,
            out_w: extent(in_w, k_w)?,
            stride,
            pad,
        })
    }

    fn from_input(input: &Tensor, kernel_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.shape.len() != 3 {
            return Err(Error::dim(format!(
                "conv input must be C×H×W, got {:?}",
                input.shape
            )));
        }
        let s = &input.shape;
        ConvGeom::resolve(s[0], s[1], s[2], kernel_shape, stride, pad)
    }

    fn out_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_h, self.out_w]
    }

    fn check_upstream(&self, upstream: &Tensor) -> Result<()> {
        if upstream.shape != self.out_shape() {
            return Err(Error::dim(format!(
                "upstream {:?} does not match conv output {:?}",
                upstream.shape,
                self.out_shape()
            )));
        }
        Ok(())
    }

    /// Output positions `o` whose tap `o*stride + offset - pad` lands inside
    /// `[0, in_len)`.
    fn valid(&self, offset: usize, in_len: usize, out_len: usize) -> std::ops::Range<usize> {
        let shift = offset as isize - self.pad as isize;
        let s = self.stride as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // largest o with o*s + shift <= in_len - 1
        let top = in_len as isize - 1 - shift;
        let hi = if top < 0 { 0 } else { (top / s + 1).min(out_len as isize) };
        let lo = lo.min(out_len as isize);
        lo as usize..(hi.max(lo)) as usize
    }

    /// Visits every (kernel tap, output row) pair with in-bounds input rows.
    /// The callback receives the flat offsets of the kernel weight, the
    /// output row start, the input row start and the valid output column
    /// range for that tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, std::ops::Range<usize>, isize)) {
        let in_plane = self.in_h * self.in_w;
        let out_plane = self.out_h * self.out_w;
        for k in 0..self.out_channels {
            for c in 0..self.channels {
                for ki in 0..self.k_h {
                    let rows = self.valid(ki, self.in_h, self.out_h);
                    for kj in 0..self.k_w {
                        let cols = self.valid(kj, self.in_w, self.out_w);
                        if cols.is_empty() {
                            continue;
                        }
                        let w_idx = ((k * self.channels + c) * self.k_h + ki) * self.k_w + kj;
                        let col_shift = kj as isize - self.pad as isize;
                        for oh in rows.clone() {
                            let ih = oh * self.stride + ki - self.pad;
                            let out_row = k * out_plane + oh * self.out_w;
                            let in_row = c * in_plane + ih * self.in_w;
                            f(w_idx, out_row, in_row, cols.clone(), col_shift);
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding, no bias.
pub fn correlate(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::from_input(input, &kernels.shape, stride, pad)?;
    let mut out = vec![0.0; g.out_channels * g.out_h * g.out_w];
    let s = g.stride;
    g.for_each_tap(|w_idx, out_row, in_row, cols, shift| {
        let w = kernels.data[w_idx];
        for ow in cols {
            let iw = (ow * s) as isize + shift;
            out[out_row + ow] += w * input.data[in_row + iw as usize];
        }
    });
    Tensor::new(&g.out_shape(), out)
}

/// Cross-correlation with zero padding plus a per-output-channel bias.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if bias.shape != [kernels.shape.first().copied().unwrap_or(0)] {
        return Err(Error::dim(format!(
            "bias {:?} does not match kernels {:?}",
            bias.shape, kernels.shape
        )));
    }
    let mut out = correlate(input, kernels, stride, pad)?;
    let plane = out.shape[1] * out.shape[2];
    for (k, chunk) in out.data.chunks_mut(plane).enumerate() {
        let b = bias.data[k];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

/// Adjoint of [`correlate`] with respect to its input: maps an output-space
/// tensor back to a `C×in_h×in_w` tensor.
pub fn conv2d_input_grad(
    kernels: &Tensor,
    upstream: &Tensor,
    input_hw: (usize, usize),
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let channels = *kernels
        .shape
        .get(1)
        .ok_or_else(|| Error::dim(format!("bad kernel shape {:?}", kernels.shape)))?;
    let g = ConvGeom::resolve(channels, input_hw.0, input_hw.1, &kernels.shape, stride, pad)?;
    g.check_upstream(upstream)?;
    let mut out = vec![0.0; channels * g.in_h * g.in_w];
    let s = g.stride;
    g.for_each_tap(|w_idx, out_row, in_row, cols, shift| {
        let w = kernels.data[w_idx];
        for ow in cols {
            let iw = (ow * s) as isize + shift;
            out[in_row + iw as usize] += w * upstream.data[out_row + ow];
        }
    });
    Tensor::new(&[channels, g.in_h, g.in_w], out)
}

/// Adjoint of [`correlate`] with respect to its kernels.
pub fn conv2d_kernel_grad(
    input: &Tensor,
    upstream: &Tensor,
    kernel_hw: (usize, usize),
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if upstream.shape.len() != 3 {
        return Err(Error::dim(format!(
            "upstream must be K×H'×W', got {:?}",
            upstream.shape
        )));
    }
    let channels = *input.shape.first().unwrap_or(&0);
    let k_shape = [upstream.shape[0], channels, kernel_hw.0, kernel_hw.1];
    let g = ConvGeom::from_input(input, &k_shape, stride, pad)?;
    g.check_upstream(upstream)?;
    let mut out = vec![0.0; k_shape.iter().product()];
    let s = g.stride;
    g.for_each_tap(|w_idx, out_row, in_row, cols, shift| {
        let mut acc = 0.0;
        for ow in cols {
            let iw = (ow * s) as isize + shift;
            acc += upstream.data[out_row + ow] * input.data[in_row + iw as usize];
        }
        out[w_idx] += acc;
    });
    Tensor::new(&k_shape, out)
}

/// Per-channel sum of a `K×H×W` tensor: the bias adjoint.
pub fn channel_sums(t: &Tensor) -> Tensor {
    let k = t.shape[0];
    let plane = t.len() / k;
    Tensor::from_vec(t.data.chunks(plane).map(|c| c.iter().sum()).collect())
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// All three adjoints of [`conv2d`] for a given upstream gradient.
pub fn conv2d_grads(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
    upstream: &Tensor,
) -> Result<Conv2dGrads> {
    let g = ConvGeom::from_input(input, &kernels.shape, stride, pad)?;
    g.check_upstream(upstream)?;
    Ok(Conv2dGrads {
        input: conv2d_input_grad(kernels, upstream, (g.in_h, g.in_w), stride, pad)?,
        kernels: conv2d_kernel_grad(input, upstream, (g.k_h, g.k_w), stride, pad)?,
        bias: channel_sums(upstream),
    })
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(t: &Tensor) -> Tensor {
    t.map(sigmoid_scalar)
}

/// Backpropagates `upstream` through a sigmoid whose forward output was `out`.
pub fn sigmoid_grad(out: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    out.zip_with(upstream, |o, u| u * o * (1.0 - o))
}

/// Numerically stable softmax of a logit vector (max subtracted before
/// exponentiation).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let (exps, total) = shifted_exps(logits);
    exps.into_iter().map(|e| e / total).collect()
}

/// `exp(y_j - max y)` for every entry, with their sum.
pub(crate) fn shifted_exps(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&y| (y - max).exp()).collect();
    let total = exps.iter().sum();
    (exps, total)
}

/// `log Σ exp(y_j)` via the max-shifted form.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&y| (y - max).exp()).sum::<f64>().ln()
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "mse")?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Seeded generator: ChaCha8 stream, uniforms from the top 53 bits of each
/// 64-bit draw, normals by the Box–Muller transform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // rejection sampling keeps the draw unbiased
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn sample_normal(&mut self, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = self.next_normal());
        t
    }

    pub fn sample_uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "uniform bounds need lo < hi, got [{lo}, {hi})"
            )));
        }
        check_shape(shape)?;
        let mut t = Tensor::zeros(shape);
        for v in t.data.iter_mut() {
            // guard the rounding case lo + (hi-lo)*u == hi
            let s = lo + (hi - lo) * self.next_f64();
            *v = if s < hi { s } else { lo };
        }
        Ok(t)
    }
}
