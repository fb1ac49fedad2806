//! Dense row-major tensors and the forward/backward numeric kernels the
//! network engine is built from.
//!
//! Images and feature stacks are `[C, H, W]`; convolution weights are
//! `[K, C, kh, kw]`. Every op here is a pure function of its arguments.
//! Summation order inside each op is fixed, so results are bit-for-bit
//! reproducible for a given precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is the working precision; `f64` is the
/// verification precision used by gradient checks.
pub trait Real:
    Float + Sum + AddAssign + SubAssign + MulAssign + Default + Debug + Display + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!(
                    "shape {shape:?} holds {expected} elements but {} were given",
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor from `f64` values, rounding into `T`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(
                op,
                format!("expected rank-3 [C,H,W], got shape {:?}", self.shape),
            )),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
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

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| !v.is_zero()).count()
    }

    /// Channel `i` of a `[C, H, W]` tensor as an `[H, W]` tensor.
    pub fn channel(&self, i: usize) -> Result<Self> {
        let (c, h, w) = self.dims3("channel")?;
        if i >= c {
            return Err(Error::shape(
                "channel",
                format!("channel axis: index {i} but tensor has {c} channels"),
            ));
        }
        Ok(Tensor {
            shape: vec![h, w],
            data: self.data[i * h * w..(i + 1) * h * w].to_vec(),
        })
    }

    /// All channels except `skip`, stacked as `[C-1, H, W]`.
    pub fn channels_except(&self, skip: usize) -> Result<Self> {
        let (c, h, w) = self.dims3("channels_except")?;
        if skip >= c {
            return Err(Error::shape(
                "channels_except",
                format!("channel axis: index {skip} but tensor has {c} channels"),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity((c - 1) * plane);
        for ch in (0..c).filter(|&ch| ch != skip) {
            data.extend_from_slice(&self.data[ch * plane..(ch + 1) * plane]);
        }
        Ok(Tensor {
            shape: vec![c - 1, h, w],
            data,
        })
    }
}

/// How a ReLU routes gradient on the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReluRule {
    /// Ordinary gradient: pass where the forward input was positive.
    Plain,
    /// Deconvnet: rectify the gradient itself, ignoring the forward input.
    Deconv,
    /// Guided backprop: pass only where both forward input and gradient are positive.
    Guided,
}

/// `l1 = Σ|x|`, `l2 = sqrt(Σx²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms<T> {
    pub l1: T,
    pub l2: T,
}

pub fn norms<T: Real>(x: &Tensor<T>) -> Norms<T> {
    let mut l1 = T::zero();
    let mut sq = T::zero();
    for &v in x.data() {
        l1 += v.abs();
        sq += v * v;
    }
    Norms { l1, l2: sq.sqrt() }
}

fn conv_dims<T: Real>(
    op: &'static str,
    input_shape: (usize, usize, usize),
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (c, h, w) = input_shape;
    let (k, wc, kh, kw) = match weights.shape()[..] {
        [k, wc, kh, kw] => (k, wc, kh, kw),
        _ => {
            return Err(Error::shape(
                op,
                format!(
                    "weights must be [K,C,kh,kw], got shape {:?}",
                    weights.shape()
                ),
            ))
        }
    };
    if stride == 0 {
        return Err(Error::shape(op, "stride must be positive"));
    }
    if wc != c {
        return Err(Error::shape(
            op,
            format!("in-channel axis: input has {c} channels, weights expect {wc}"),
        ));
    }
    if h + 2 * pad < kh {
        return Err(Error::shape(
            op,
            format!("height axis: padded input height {} < kernel height {kh}", h + 2 * pad),
        ));
    }
    if w + 2 * pad < kw {
        return Err(Error::shape(
            op,
            format!("width axis: padded input width {} < kernel width {kw}", w + 2 * pad),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok((k, kh, kw, oh, ow, c))
}

/// Output positions `o` in `[lo, hi)` for which `o*stride + tap - pad` falls inside `[0, len)`.
#[inline]
fn valid_span(tap: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + pad > tap {
        ((len - 1 + pad - tap) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Zero-padded 2-D cross-correlation (no kernel flip).
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3("conv2d_forward")?;
    let (k, kh, kw, oh, ow, _) = conv_dims("conv2d_forward", (c, h, w), weights, stride, pad)?;
    if bias.len() != k {
        return Err(Error::shape(
            "conv2d_forward",
            format!("bias axis: {} values for {k} out-channels", bias.len()),
        ));
    }
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![T::zero(); k * oh * ow];
    for (ko, plane) in out.chunks_mut(oh * ow).enumerate() {
        plane.fill(bias.data()[ko]);
        for ci in 0..c {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let (oy0, oy1) = valid_span(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let wv = wt[((ko * c + ci) * kh + ky) * kw + kx];
                    let (ox0, ox1) = valid_span(kx, pad, stride, w, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &src[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow + ox0..oy * ow + ox1];
                        if stride == 1 {
                            let ix0 = ox0 + kx - pad;
                            for (o, &v) in orow.iter_mut().zip(&row[ix0..ix0 + (ox1 - ox0)]) {
                                *o += wv * v;
                            }
                        } else {
                            for (j, o) in orow.iter_mut().enumerate() {
                                *o += wv * row[(ox0 + j) * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![k, oh, ow], out)
}

/// Gradient of `sum(upstream ⊙ conv2d_forward(x))` with respect to `x`
/// (a transposed convolution of `upstream` by `weights`).
pub fn conv2d_input_grad<T: Real>(
    upstream: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let (c, h, w) = match input_shape[..] {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::shape(
                "conv2d_input_grad",
                format!("input shape must be [C,H,W], got {input_shape:?}"),
            ))
        }
    };
    let (k, kh, kw, oh, ow, _) = conv_dims("conv2d_input_grad", (c, h, w), weights, stride, pad)?;
    if upstream.shape() != [k, oh, ow] {
        return Err(Error::shape(
            "conv2d_input_grad",
            format!(
                "upstream has shape {:?}, forward output would be [{k}, {oh}, {ow}]",
                upstream.shape()
            ),
        ));
    }
    let g = upstream.data();
    let wt = weights.data();
    let mut out = vec![T::zero(); c * h * w];
    for ko in 0..k {
        let gplane = &g[ko * oh * ow..(ko + 1) * oh * ow];
        for (ci, dst) in out.chunks_mut(h * w).enumerate() {
            for ky in 0..kh {
                let (oy0, oy1) = valid_span(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let wv = wt[((ko * c + ci) * kh + ky) * kw + kx];
                    let (ox0, ox1) = valid_span(kx, pad, stride, w, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow + ox0..oy * ow + ox1];
                        let drow = &mut dst[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let ix0 = ox0 + kx - pad;
                            for (d, &gv) in drow[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        } else {
                            for (j, &gv) in grow.iter().enumerate() {
                                drow[(ox0 + j) * stride + kx - pad] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Routes `upstream` back through a ReLU whose forward input was `forward_x`.
pub fn relu_backward<T: Real>(
    upstream: &Tensor<T>,
    forward_x: &Tensor<T>,
    rule: ReluRule,
) -> Result<Tensor<T>> {
    let zero = T::zero();
    match rule {
        ReluRule::Plain => {
            upstream.zip_map(forward_x, "relu_backward", |g, x| if x > zero { g } else { zero })
        }
        ReluRule::Deconv => {
            upstream.expect_same_shape(forward_x, "relu_backward")?;
            Ok(upstream.map(|g| g.max(zero)))
        }
        ReluRule::Guided => upstream.zip_map(forward_x, "relu_backward", |g, x| {
            if x > zero && g > zero {
                g
            } else {
                zero
            }
        }),
    }
}

/// Argmax locations recorded by [`maxpool_forward`], one flat input index
/// per output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Switches {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl Switches {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn flat(&self) -> &[usize] {
        &self.argmax
    }

    /// `(row, col)` in the input plane of the max chosen for output `(c, oy, ox)`.
    pub fn position(&self, c: usize, oy: usize, ox: usize) -> (usize, usize) {
        let (oh, ow) = (self.output_shape[1], self.output_shape[2]);
        let (h, w) = (self.input_shape[1], self.input_shape[2]);
        let flat = self.argmax[(c * oh + oy) * ow + ox] - c * h * w;
        (flat / w, flat % w)
    }
}

/// Windowed max. Ties go to the first maximum in row-major scan order.
pub fn maxpool_forward<T: Real>(
    x: &Tensor<T>,
    size: usize,
    stride: usize,
) -> Result<(Tensor<T>, Switches)> {
    let (c, h, w) = x.dims3("maxpool_forward")?;
    if size == 0 || stride == 0 {
        return Err(Error::shape("maxpool_forward", "window and stride must be positive"));
    }
    if h < size || w < size {
        return Err(Error::shape(
            "maxpool_forward",
            format!("window {size}x{size} larger than input plane {h}x{w}"),
        ));
    }
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let data = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let switches = Switches {
        input_shape: vec![c, h, w],
        output_shape: vec![c, oh, ow],
        argmax,
    };
    Ok((Tensor::new(vec![c, oh, ow], out)?, switches))
}

pub fn maxpool_backward<T: Real>(
    upstream: &Tensor<T>,
    switches: &Switches,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if upstream.shape() != switches.output_shape() {
        return Err(Error::shape(
            "maxpool_backward",
            format!(
                "upstream shape {:?} does not match pooled shape {:?}",
                upstream.shape(),
                switches.output_shape()
            ),
        ));
    }
    if input_shape != switches.input_shape() {
        return Err(Error::shape(
            "maxpool_backward",
            format!(
                "input shape {input_shape:?} does not match recorded {:?}",
                switches.input_shape()
            ),
        ));
    }
    let mut out = Tensor::zeros(input_shape);
    let dst = out.data_mut();
    for (&g, &idx) in upstream.data().iter().zip(switches.flat()) {
        dst[idx] += g;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    /// Straight quadruple loop over (k, oy, ox, taps) with explicit bounds checks.
    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (c, h, w) = x.dims3("naive").unwrap();
        let (k, kh, kw) = (wt.shape()[0], wt.shape()[2], wt.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; k * oh * ow];
        for ko in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[ko];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt.data()[((ko * c + ci) * kh + ky) * kw + kx]
                                    * x.data()[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(ko * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::new(vec![k, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_small_example() {
        let x = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t(&[1, 1, 2, 2], &[1., 0., 0., 1.]);
        let b = t(&[1], &[0.]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[6., 8., 12., 14.]);
        assert_eq!(y, naive_conv(&x, &w, &[0.], 1, 0));
    }

    #[test]
    fn conv_identity_and_zero_input() {
        let x = t(&[1, 2, 3], &[1., -2., 3., 0.5, 5., 6.]);
        let w = t(&[1, 1, 1, 1], &[1.]);
        let b = t(&[1], &[0.]);
        assert_eq!(conv2d_forward(&x, &w, &b, 1, 0).unwrap(), x);

        let z = Tensor::<f64>::zeros(&[2, 4, 4]);
        let w = Tensor::full(&[3, 2, 3, 3], 0.7);
        let b = t(&[3], &[1.5, -2., 0.25]);
        let y = conv2d_forward(&z, &w, &b, 1, 1).unwrap();
        for k in 0..3 {
            assert!(y.channel(k).unwrap().data().iter().all(|&v| v == b.data()[k]));
        }
    }

    #[test]
    fn conv_matches_naive_with_padding_and_stride() {
        let mut rng = crate::rng::SplitMix64::new(11);
        for &(c, h, w, k, kh, stride, pad) in &[
            (2, 5, 6, 3, 3, 1, 1),
            (3, 7, 7, 2, 3, 2, 1),
            (1, 6, 5, 4, 2, 2, 0),
            (2, 4, 4, 2, 3, 3, 2),
        ] {
            let x = Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.next_signed()).collect()).unwrap();
            let wt = Tensor::new(vec![k, c, kh, kh], (0..k * c * kh * kh).map(|_| rng.next_signed()).collect()).unwrap();
            let b: Vec<f64> = (0..k).map(|_| rng.next_signed()).collect();
            let fast = conv2d_forward(&x, &wt, &Tensor::new(vec![k], b.clone()).unwrap(), stride, pad).unwrap();
            let slow = naive_conv(&x, &wt, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let x = Tensor::<f32>::zeros(&[3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        let b = Tensor::<f32>::zeros(&[2]);
        let err = conv2d_forward(&x, &w, &b, 1, 0).unwrap_err().to_string();
        assert!(err.contains("in-channel"), "{err}");
        let w = Tensor::<f32>::zeros(&[2, 3, 5, 3]);
        let err = conv2d_forward(&x, &w, &b, 1, 0).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
        let w = Tensor::<f32>::zeros(&[2, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[3]), 1, 0).unwrap_err().to_string();
        assert!(err.contains("bias"), "{err}");
    }

    #[test]
    fn input_grad_trivial_cases() {
        let w = t(&[1, 1, 1, 1], &[1.]);
        let u = t(&[1, 2, 2], &[1., -2., 3., 4.]);
        assert_eq!(conv2d_input_grad(&u, &w, 1, 0, &[1, 2, 2]).unwrap(), u);

        let w = Tensor::<f64>::full(&[2, 3, 3, 3], 0.3);
        let u = Tensor::zeros(&[2, 4, 4]);
        let g = conv2d_input_grad(&u, &w, 1, 1, &[3, 4, 4]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));

        let err = conv2d_input_grad(&Tensor::<f64>::zeros(&[2, 3, 3]), &w, 1, 1, &[3, 4, 4]);
        assert!(err.is_err());
    }

    #[test]
    fn input_grad_matches_finite_differences() {
        let mut rng = crate::rng::SplitMix64::new(5);
        for case in 0..100 {
            let (stride, pad) = [(1, 0), (1, 1), (2, 1), (2, 0)][case % 4];
            let x = Tensor::new(vec![1, 4, 4], (0..16).map(|_| rng.next_signed()).collect()).unwrap();
            let wt = Tensor::new(vec![1, 1, 2, 2], (0..4).map(|_| rng.next_signed()).collect()).unwrap();
            let b = Tensor::zeros(&[1]);
            let y = conv2d_forward(&x, &wt, &b, stride, pad).unwrap();
            let u = Tensor::new(y.shape().to_vec(), (0..y.len()).map(|_| rng.next_signed()).collect()).unwrap();
            let g = conv2d_input_grad(&u, &wt, stride, pad, x.shape()).unwrap();
            let f = |x: &Tensor<f64>| -> f64 {
                let y = conv2d_forward(x, &wt, &b, stride, pad).unwrap();
                y.data().iter().zip(u.data()).map(|(a, b)| a * b).sum()
            };
            let h = 1e-4;
            let mut max_rel = 0.0f64;
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                let denom = fd.abs().max(g.data()[i].abs()).max(1e-8);
                max_rel = max_rel.max((fd - g.data()[i]).abs() / denom);
            }
            assert!(max_rel <= 1e-4, "case {case}: rel err {max_rel}");
        }
    }

    #[test]
    fn relu_forward_cases() {
        assert_eq!(relu_forward(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
        assert!(relu_forward(&t(&[2], &[-1., -3.])).data().iter().all(|&v| v == 0.));
        let pos = t(&[2], &[0.5, 3.]);
        assert_eq!(relu_forward(&pos), pos);
    }

    #[test]
    fn relu_backward_rules() {
        let one = |v: f64| t(&[1], &[v]);
        let b = |g, x, r| relu_backward(&one(g), &one(x), r).unwrap().data()[0];
        assert_eq!(b(-3., 2., ReluRule::Guided), 0.);
        assert_eq!(b(3., -2., ReluRule::Deconv), 3.);
        assert_eq!(b(3., -2., ReluRule::Plain), 0.);
        assert_eq!(b(3., 2., ReluRule::Guided), 3.);
        assert_eq!(b(-3., 2., ReluRule::Plain), -3.);
        assert_eq!(b(-3., 2., ReluRule::Deconv), 0.);
        assert!(relu_backward(&one(1.), &t(&[2], &[1., 1.]), ReluRule::Plain).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let (y, s) = maxpool_forward(&t(&[1, 2, 2], &[1., 2., 3., 4.]), 2, 2).unwrap();
        assert_eq!(y.data(), &[4.]);
        assert_eq!(s.position(0, 0, 0), (1, 1));

        let (y, s) = maxpool_forward(&Tensor::<f64>::full(&[2, 4, 4], 3.), 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.));
        for c in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    assert_eq!(s.position(c, oy, ox), (oy * 2, ox * 2));
                }
            }
        }

        let (y, s) = maxpool_forward(&t(&[1, 2, 2], &[1., 9., 9., 1.]), 2, 2).unwrap();
        assert_eq!(y.data(), &[9.]);
        assert_eq!(s.position(0, 0, 0), (0, 1));

        assert!(maxpool_forward(&Tensor::<f64>::zeros(&[1, 1, 3]), 2, 2).is_err());
    }

    #[test]
    fn maxpool_backward_routes() {
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let (_, s) = maxpool_forward(&x, 2, 2).unwrap();
        let g = maxpool_backward(&t(&[1, 1, 1], &[5.]), &s, &[1, 2, 2]).unwrap();
        assert_eq!(g.data(), &[0., 0., 0., 5.]);
        let g = maxpool_backward(&t(&[1, 1, 1], &[0.]), &s, &[1, 2, 2]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.));
        assert!(maxpool_backward(&t(&[1, 1, 2], &[0., 0.]), &s, &[1, 2, 2]).is_err());
    }

    #[test]
    fn norms_examples() {
        assert_eq!(norms(&t(&[1, 2], &[3., 4.])), Norms { l1: 7., l2: 5. });
        assert_eq!(norms(&Tensor::<f64>::zeros(&[2, 2])), Norms { l1: 0., l2: 0. });
        assert_eq!(norms(&t(&[1], &[-2.])), Norms { l1: 2., l2: 2. });
    }

    #[test]
    fn channel_slicing() {
        let x = t(&[3, 1, 2], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(x.channel(1).unwrap().data(), &[3., 4.]);
        let rest = x.channels_except(1).unwrap();
        assert_eq!(rest.shape(), &[2, 1, 2]);
        assert_eq!(rest.data(), &[1., 2., 5., 6.]);
        assert!(x.channel(3).is_err());
    }
}
