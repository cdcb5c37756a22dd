//! Dense row-major tensors and the handful of layer operations the network
//! needs, each with a hand-written backward pass.
//!
//! Activations use channel-last layout `[H, W, C]`; convolution weights are
//! `[kh, kw, Cin, Cout]`.

mod conv;
mod grad_check;
mod optim;
mod pool;
mod softmax;
pub mod tnsr;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub use conv::{
    conv2d, conv2d_backward, deconv2d_width, deconv2d_width_backward, ConvGrads, DECONV_KERNEL_W,
    DECONV_PAD_W, DECONV_STRIDE_W,
};
pub use grad_check::{grad_check, GradCheck};
pub use optim::sgd_step;
pub use pool::{maxpool_width, maxpool_width_backward, Pooled};
pub use softmax::{softmax_channels, softmax_channels_backward};
pub(crate) use softmax::softmax_in_place;

/// Floating-point element type. `f32` is the operational precision, `f64`
/// exists for gradient checking.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Debug + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} hold {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        let mut t = Self::zeros(dims);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `values` into the gradient buffer.
    pub fn accumulate_grad(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{} values for tensor of {}", values.len(), self.data.len()),
            ));
        }
        for (g, &v) in self.grad_mut().iter_mut().zip(values) {
            *g += v;
        }
        Ok(())
    }

    /// Reinterprets the same data under new extents.
    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "dot",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
            grad: None,
        })
    }

    pub(crate) fn hwc(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(op, format!("expected rank 3, got {:?}", self.dims))),
        }
    }
}

/// Concatenates two `[H, W, *]` tensors along channels.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, ca) = a.hwc("concat_channels")?;
    let (hb, wb, cb) = b.hwc("concat_channels")?;
    if (h, w) != (hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    let c = ca + cb;
    let mut data = Vec::with_capacity(h * w * c);
    for (pa, pb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    Tensor::from_vec(&[h, w, c], data)
}

/// Splits a `[H, W, ca + cb]` tensor back into its two channel groups.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, c) = t.hwc("split_channels")?;
    if ca == 0 || ca >= c {
        return Err(Error::shape("split_channels", format!("split {ca} of {c}")));
    }
    let cb = c - ca;
    let mut da = Vec::with_capacity(h * w * ca);
    let mut db = Vec::with_capacity(h * w * cb);
    for px in t.data().chunks_exact(c) {
        da.extend_from_slice(&px[..ca]);
        db.extend_from_slice(&px[ca..]);
    }
    Ok((
        Tensor::from_vec(&[h, w, ca], da)?,
        Tensor::from_vec(&[h, w, cb], db)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

/// Convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub activation: Activation,
}

impl ConvSpec {
    /// Stride-1 kernel with "same" padding.
    pub fn same(kernel_h: usize, kernel_w: usize, activation: Activation) -> Self {
        ConvSpec {
            kernel_h,
            kernel_w,
            stride_h: 1,
            stride_w: 1,
            pad_h: kernel_h / 2,
            pad_w: kernel_w / 2,
            activation,
        }
    }

    pub fn with_stride(mut self, stride_h: usize, stride_w: usize) -> Self {
        self.stride_h = stride_h;
        self.stride_w = stride_w;
        self
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::InvalidArgument(format!("degenerate conv spec {self:?}")));
        }
        let ph = h + 2 * self.pad_h;
        let pw = w + 2 * self.pad_w;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} exceeds padded input {ph}x{pw}", self.kernel_h, self.kernel_w),
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride_h + 1,
            (pw - self.kernel_w) / self.stride_w + 1,
        ))
    }
}
