//! Dense rank-4 `f64` tensors in NHWC layout.
//!
//! Every activation, mask and parameter in the crate is a [`Tensor`]. Feature
//! maps use `[batch, height, width, channels]`; convolution kernels reuse the
//! same container as `[kh, kw, c_in, c_out]`, and per-channel vectors are
//! `[1, 1, 1, c]`.

use std::fmt;

use crate::error::{Error, Result};

/// Four-dimensional extent, outermost first.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([n, h, w, c])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }

    pub fn h(&self) -> usize {
        self.0[1]
    }

    pub fn w(&self) -> usize {
        self.0[2]
    }

    pub fn c(&self) -> usize {
        self.0[3]
    }

    /// Same batch and spatial extent with a different channel count.
    pub fn with_channels(&self, c: usize) -> Self {
        Shape([self.0[0], self.0[1], self.0[2], c])
    }

    /// Row-major strides.
    pub fn strides(&self) -> [usize; 4] {
        let d = self.0;
        [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1]
    }

    /// Shape obtained by broadcasting `self` against `other` (dims must match
    /// or be 1).
    pub fn broadcast(&self, other: &Shape) -> Result<Shape> {
        let mut out = [0; 4];
        for (i, slot) in out.iter_mut().enumerate() {
            let (a, b) = (self.0[i], other.0[i]);
            *slot = if a == b || b == 1 {
                a
            } else if a == 1 {
                b
            } else {
                return Err(Error::shape(format!("cannot broadcast {self:?} with {other:?}")));
            };
        }
        Ok(Shape(out))
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, h, w, c] = self.0;
        write!(f, "[{n}x{h}x{w}x{c}]")
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f(n, y, x, c)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [n, h, w, c] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for k in 0..c {
                        data.push(f(b, y, x, k));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

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

    #[inline]
    pub fn offset(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        let [_, h, w, ch] = self.shape.0;
        ((n * h + y) * w + x) * ch + c
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.offset(n, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: f64) {
        let o = self.offset(n, y, x, c);
        self.data[o] = v;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!("expected {shape:?}, got {:?}", self.shape)));
        }
        Ok(())
    }

    /// One batch item as a `[1, h, w, c]` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let [_, h, w, c] = self.shape.0;
        let len = h * w * c;
        Tensor { shape: Shape::new(1, h, w, c), data: self.data[n * len..(n + 1) * len].to_vec() }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let [_, h, w, c] = first.shape.0;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut n = 0;
        for t in items {
            let [tn, th, tw, tc] = t.shape.0;
            if (th, tw, tc) != (h, w, c) {
                return Err(Error::shape(format!("stack: {:?} vs {:?}", first.shape, t.shape)));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: Shape::new(n, h, w, c), data })
    }

    /// Bilinear resampling to `out_h x out_w` with half-pixel centres
    /// (`align_corners = false`).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Tensor {
        let [n, h, w, c] = self.shape.0;
        if (h, w) == (out_h, out_w) {
            return self.clone();
        }
        let ys = bilinear_taps(h, out_h);
        let xs = bilinear_taps(w, out_w);
        let mut out = Tensor::zeros(Shape::new(n, out_h, out_w, c));
        for b in 0..n {
            for (oy, ty) in ys.iter().enumerate() {
                for (ox, tx) in xs.iter().enumerate() {
                    let dst = out.offset(b, oy, ox, 0);
                    for (iy, wy) in [(ty.lo, ty.w_lo), (ty.hi, ty.w_hi)] {
                        for (ix, wx) in [(tx.lo, tx.w_lo), (tx.hi, tx.w_hi)] {
                            let wgt = wy * wx;
                            if wgt == 0.0 {
                                continue;
                            }
                            let src = self.offset(b, iy, ix, 0);
                            for k in 0..c {
                                out.data[dst + k] += wgt * self.data[src + k];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Nearest-neighbour resampling using the same half-pixel convention.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Tensor {
        let [n, h, w, c] = self.shape.0;
        let pick = |len: usize, out: usize, i: usize| -> usize {
            let src = ((i as f64 + 0.5) * len as f64 / out as f64).floor() as usize;
            src.min(len - 1)
        };
        Tensor::from_fn(Shape::new(n, out_h, out_w, c), |b, y, x, k| {
            self.at(b, pick(h, out_h, y), pick(w, out_w, x), k)
        })
    }

    /// Extends the bottom and right edges to `out_h x out_w` by mirror
    /// reflection without repeating the edge pixel.
    pub fn pad_reflect(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let [n, h, w, c] = self.shape.0;
        if out_h < h || out_w < w {
            return Err(Error::shape(format!("cannot pad {h}x{w} down to {out_h}x{out_w}")));
        }
        let mirror = |i: usize, len: usize| -> usize {
            if len == 1 {
                return 0;
            }
            let period = 2 * (len - 1);
            let r = i % period;
            if r < len {
                r
            } else {
                period - r
            }
        };
        Ok(Tensor::from_fn(Shape::new(n, out_h, out_w, c), |b, y, x, k| self.at(b, mirror(y, h), mirror(x, w), k)))
    }

    /// The top-left `out_h x out_w` window.
    pub fn crop(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let [n, h, w, c] = self.shape.0;
        if out_h > h || out_w > w {
            return Err(Error::shape(format!("cannot crop {h}x{w} to {out_h}x{out_w}")));
        }
        Ok(Tensor::from_fn(Shape::new(n, out_h, out_w, c), |b, y, x, k| self.at(b, y, x, k)))
    }
}

/// Interpolation taps for one output coordinate.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

/// Source taps for resampling an axis of length `len` to `out`.
pub(crate) fn bilinear_taps(len: usize, out: usize) -> Vec<Tap> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, w_lo: 1.0 - frac, w_hi: frac }
        })
        .collect()
}
