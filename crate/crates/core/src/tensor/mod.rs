//! Dense row-major tensors and the numeric kernels every model component is
//! built from.
//!
//! Storage is always `f64`. A tensor tagged [`DType::F32`] keeps every stored
//! value rounded to the nearest `f32`, so results match single-precision
//! storage while the 64-bit verification mode ([`DType::F64`]) keeps full
//! precision for finite-difference checks.

pub mod autograd;
pub mod kernels;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use autograd::{Gradients, Tape, Var};
pub use kernels::{ConvMode, ConvSpec};

/// Element type of a tensor's stored values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    /// The wider of two element types.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &self.dtype)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, rounding `data` to the element type.
    pub fn new(shape: &[usize], data: Vec<f64>, dtype: DType) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), data, dtype))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if dtype == DType::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        Tensor {
            shape,
            data,
            dtype,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel], dtype)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        Self::full(shape, 0.0, dtype)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Self {
        Self::full(shape, 1.0, dtype)
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::from_parts(vec![1], vec![value], dtype)
    }

    pub fn eye(n: usize, dtype: DType) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data, dtype)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, dtype: DType, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Self::from_parts(shape.to_vec(), data, dtype)
    }

    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: &[usize],
        lo: f64,
        hi: f64,
        dtype: DType,
        rng: &mut R,
    ) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_parts(shape.to_vec(), data, dtype)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Replaces the contents in place, keeping shape and dtype.
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::shape("assign", &self.shape, &[values.len()]));
        }
        let dtype = self.dtype;
        for (dst, &v) in self.data.iter_mut().zip(values) {
            *dst = dtype.round(v);
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        let v = self.dtype.round(value);
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Mutable access to the raw buffer. Callers are responsible for keeping
    /// values representable in the tensor's dtype.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.clone(), dtype)
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::invalid("item", format!("shape {:?} is not a scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[a, b] => Ok((a, b)),
            s => Err(Error::invalid("dims2", format!("expected rank 2, got {s:?}"))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[a, b, c] => Ok((a, b, c)),
            s => Err(Error::invalid("dims3", format!("expected rank 3, got {s:?}"))),
        }
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            dtype: self.dtype,
            requires_grad: self.requires_grad,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        Ok(Self::from_parts(
            vec![n, m],
            kernels::transpose(&self.data, m, n),
            self.dtype,
        ))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.dtype,
        )
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            self.dtype.promote(other.dtype),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Bitwise equality of shape and contents (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        Ok(Self::from_parts(
            vec![m, n],
            kernels::matmul(&self.data, &other.data, m, k, n),
            self.dtype.promote(other.dtype),
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::invalid("softmax", format!("axis {axis} for rank {}", self.rank())));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; self.numel()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = self.data[(o * len + j) * inner + i];
                }
                kernels::softmax_inplace(&mut buf);
                for (j, &b) in buf.iter().enumerate() {
                    out[(o * len + j) * inner + i] = b;
                }
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out, self.dtype))
    }

    /// Row-wise layer normalization of an `[N, C]` matrix with per-channel affine.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (n, c) = self.dims2()?;
        if gain.numel() != c || bias.numel() != c {
            return Err(Error::shape("layer_norm", &self.shape, gain.shape()));
        }
        let (norm, _) = kernels::normalize_rows(&self.data, n, c, kernels::NORM_EPS);
        let mut out = norm;
        for row in out.chunks_mut(c) {
            for ((v, &g), &b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
                *v = *v * g + b;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out, self.dtype.promote(gain.dtype)))
    }

    pub fn silu(&self) -> Tensor {
        self.map(kernels::silu)
    }

    pub fn gelu(&self) -> Tensor {
        self.map(kernels::gelu)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(kernels::sigmoid)
    }

    pub fn softplus(&self) -> Tensor {
        self.map(kernels::softplus)
    }

    /// 2-D cross-correlation of a `[C_in, H, W]` input with zero padding.
    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
        let geo = kernels::ConvGeometry::new(self.shape(), kernel.shape(), spec)?;
        if let Some(b) = bias {
            if b.numel() != geo.c_out {
                return Err(Error::shape("conv2d", kernel.shape(), b.shape()));
            }
        }
        let out = kernels::conv2d(&self.data, &kernel.data, bias.map(|b| b.data()), &geo);
        Ok(Self::from_parts(
            vec![geo.c_out, geo.h_out, geo.w_out],
            out,
            self.dtype.promote(kernel.dtype),
        ))
    }

    /// Causal per-channel 1-D convolution over the rows of an `[L, D]` sequence
    /// with a `[D, width]` kernel; tap `width - 1` multiplies the current token.
    pub fn conv1d_depthwise(&self, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (l, d) = self.dims2()?;
        let (kd, width) = kernel.dims2()?;
        if kd != d {
            return Err(Error::shape("conv1d_depthwise", &self.shape, &kernel.shape));
        }
        if let Some(b) = bias {
            if b.numel() != d {
                return Err(Error::shape("conv1d_depthwise", &kernel.shape, b.shape()));
            }
        }
        let out = kernels::conv1d_causal(&self.data, &kernel.data, bias.map(|b| b.data()), l, d, width);
        Ok(Self::from_parts(self.shape.clone(), out, self.dtype.promote(kernel.dtype)))
    }

    /// Bilinear interpolation of an `[H, W, C]` feature grid at `[N, 2]` points
    /// given as `(x, y)` = (column, row) in cell units. Points are clamped to
    /// `[0, W-1] x [0, H-1]` before interpolation.
    pub fn bilinear_sample(&self, points: &Tensor) -> Result<Tensor> {
        let (h, w, c) = self.dims3()?;
        let (n, two) = points.dims2()?;
        if two != 2 {
            return Err(Error::shape("bilinear_sample", &self.shape, &points.shape));
        }
        let out = kernels::bilinear_sample(&self.data, h, w, c, &points.data);
        Ok(Self::from_parts(vec![n, c], out, self.dtype.promote(points.dtype)))
    }
}
