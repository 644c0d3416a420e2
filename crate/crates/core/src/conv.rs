//! 2-D convolution over NHWC tensors via im2col and `dgemm`.
//!
//! Kernels are stored `[kh, kw, c_in, c_out]`, which flattens row-major to the
//! `(kh*kw*c_in) x c_out` matrix the column buffer multiplies against. Batch
//! items are processed sequentially and weight gradients are accumulated in
//! batch order, so results do not depend on scheduling.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec { stride: 1, padding: dilation * (kernel - 1) / 2, dilation }
    }

    pub const fn strided(stride: usize, padding: usize) -> Self {
        ConvSpec { stride, padding, dilation: 1 }
    }

    fn out_len(&self, len: usize, k: usize) -> Result<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return Err(Error::shape(format!(
                "kernel span {span} does not fit input length {len} with padding {}",
                self.padding
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

struct Geometry {
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cout: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn new(x: Shape, w: Shape, spec: ConvSpec) -> Result<Self> {
        let [kh, kw, cin, cout] = w.0;
        if cin != x.c() {
            return Err(Error::shape(format!(
                "conv kernel {w:?} expects {cin} input channels, input is {x:?}"
            )));
        }
        Ok(Geometry {
            h: x.h(),
            w: x.w(),
            c: cin,
            kh,
            kw,
            oh: spec.out_len(x.h(), kh)?,
            ow: spec.out_len(x.w(), kw)?,
            cout,
            spec,
        })
    }

    fn rows(&self) -> usize {
        self.oh * self.ow
    }

    fn k(&self) -> usize {
        self.kh * self.kw * self.c
    }

    /// Calls `f(col_offset, input_offset)` for every in-bounds tap of output
    /// row `(oy, ox)`.
    #[inline]
    fn taps(&self, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
        let s = self.spec;
        for ky in 0..self.kh {
            let iy = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            for kx in 0..self.kw {
                let ix = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                if ix < 0 || ix >= self.w as isize {
                    continue;
                }
                let col = (ky * self.kw + kx) * self.c;
                let src = (iy as usize * self.w + ix as usize) * self.c;
                f(col, src);
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let k = self.k();
        cols.fill(0.0);
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * k..][..k];
                self.taps(oy, ox, |col, src| {
                    row[col..col + self.c].copy_from_slice(&x[src..src + self.c]);
                });
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let k = self.k();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols[(oy * self.ow + ox) * k..][..k];
                self.taps(oy, ox, |col, src| {
                    for (g, v) in gx[src..src + self.c].iter_mut().zip(&row[col..col + self.c]) {
                        *g += v;
                    }
                });
            }
        }
    }
}

/// `c = a * b + beta * c` for row-major matrices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches; `c` is
    // dense row-major with row stride `n`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let g = Geometry::new(x.shape(), w.shape(), spec)?;
    if let Some(b) = bias {
        b.expect_shape(Shape::new(1, 1, 1, g.cout))?;
    }
    let n = x.shape().n();
    let mut out = Tensor::zeros(Shape::new(n, g.oh, g.ow, g.cout));
    let (in_len, out_len) = (g.h * g.w * g.c, g.rows() * g.cout);
    let pointwise = spec.is_pointwise(g.kh, g.kw);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; g.rows() * g.k()] };
    for b in 0..n {
        let xi = &x.data()[b * in_len..][..in_len];
        let a: &[f64] = if pointwise {
            xi
        } else {
            g.im2col(xi, &mut cols);
            &cols
        };
        let yi = &mut out.data_mut()[b * out_len..][..out_len];
        gemm(g.rows(), g.k(), g.cout, a, (g.k(), 1), w.data(), (g.cout, 1), 0.0, yi);
        if let Some(bias) = bias {
            for row in yi.chunks_exact_mut(g.cout) {
                for (v, bv) in row.iter_mut().zip(bias.data()) {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(x: &Tensor, w: &Tensor, spec: ConvSpec, gy: &Tensor) -> Result<ConvGrads> {
    let g = Geometry::new(x.shape(), w.shape(), spec)?;
    let n = x.shape().n();
    gy.expect_shape(Shape::new(n, g.oh, g.ow, g.cout))?;
    let (in_len, out_len) = (g.h * g.w * g.c, g.rows() * g.cout);
    let pointwise = spec.is_pointwise(g.kh, g.kw);
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(Shape::new(1, 1, 1, g.cout));
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; g.rows() * g.k()] };
    let mut dcols = vec![0.0; g.rows() * g.k()];
    for b in 0..n {
        let xi = &x.data()[b * in_len..][..in_len];
        let gyi = &gy.data()[b * out_len..][..out_len];
        for row in gyi.chunks_exact(g.cout) {
            for (acc, v) in gb.data_mut().iter_mut().zip(row) {
                *acc += v;
            }
        }
        let a: &[f64] = if pointwise {
            xi
        } else {
            g.im2col(xi, &mut cols);
            &cols
        };
        // dW += cols^T * gy
        gemm(g.k(), g.rows(), g.cout, a, (1, g.k()), gyi, (g.cout, 1), 1.0, gw.data_mut());
        // dcols = gy * W^T
        gemm(g.rows(), g.cout, g.k(), gyi, (g.cout, 1), w.data(), (1, g.cout), 0.0, &mut dcols);
        let gxi = &mut gx.data_mut()[b * in_len..][..in_len];
        if pointwise {
            gxi.copy_from_slice(&dcols);
        } else {
            g.col2im(&dcols, gxi);
        }
    }
    Ok(ConvGrads { input: gx, weight: gw, bias: gb })
}
