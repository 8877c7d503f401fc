//! Dense channel-major tensors and the raster kernels the model is built from.
//!
//! Layout is always contiguous row-major over `shape`; a `[C, H, W]` tensor
//! stores channel planes back to back.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a [C, H, W] tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Channels `[start, start + len)` of a `[C, ...]` tensor.
    pub fn channels(&self, start: usize, len: usize) -> Tensor {
        let plane: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor {
            shape,
            data: self.data[start * plane..(start + len) * plane].to_vec(),
        }
    }

    /// Mirror along the last (width) axis.
    pub fn flip_horizontal(&self) -> Tensor {
        let w = *self.shape.last().expect("rank >= 1");
        let mut data = self.data.clone();
        for row in data.chunks_mut(w.max(1)) {
            row.reverse();
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` for row-major operands.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: slice lengths are checked above and strides describe
    // exactly the row-major (or transposed) layout of each operand.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Output spatial size of a convolution.
pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfold `[C, H, W]` into `[C*k*k, Ho*Wo]` patches (zero padding).
pub(crate) fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: scatter-add patches back onto `[C, H, W]`.
pub(crate) fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution of `[Cin, H, W]` with `[Cout, Cin, k, k]` weights.
pub(crate) fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let [cout, cin, k, k2] = weight.shape()[..] else {
        return Err(Error::shape(format!(
            "conv weight must be [Cout, Cin, k, k], got {:?}",
            weight.shape()
        )));
    };
    if cin != c || k != k2 {
        return Err(Error::shape(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape(format!(
            "input {h}x{w} smaller than kernel {k}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(format!(
                "conv bias {:?} does not match {cout} output channels",
                b.shape()
            )));
        }
    }
    let (cols, ho, wo) = im2col(x.data(), (c, h, w), k, stride, pad);
    let mut out = vec![0.0; cout * ho * wo];
    if let Some(b) = bias {
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * ho * wo..(o + 1) * ho * wo].fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(
        cout,
        c * k * k,
        ho * wo,
        1.0,
        weight.data(),
        false,
        &cols,
        false,
        beta,
        &mut out,
    );
    Tensor::new(vec![cout, ho, wo], out)
}

/// Source taps for half-pixel-centred bilinear resampling along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(in_size: usize, out_size: usize) -> Vec<Tap> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_size - 1);
            let hi = (lo + 1).min(in_size - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of every channel plane of `[C, H, W]`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear resize of an empty raster"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ci in 0..c {
        let src = &x.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * out_h * out_w..(ci + 1) * out_h * out_w];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &src[a.lo * w..(a.lo + 1) * w];
            let r1 = &src[a.hi * w..(a.hi + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.lo] * (1.0 - b.frac) + r0[b.hi] * b.frac;
                let bot = r1[b.lo] * (1.0 - b.frac) + r1[b.hi] * b.frac;
                dst[oy * out_w + ox] = top * (1.0 - a.frac) + bot * a.frac;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Adjoint of [`resize_bilinear`]: maps a gradient on the output raster
/// back onto the `in_h x in_w` input raster.
pub(crate) fn resize_bilinear_adjoint(
    grad: &Tensor,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor> {
    let (c, out_h, out_w) = grad.chw()?;
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(grad.clone());
    }
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let mut out = vec![0.0; c * in_h * in_w];
    for ci in 0..c {
        let g = &grad.data()[ci * out_h * out_w..(ci + 1) * out_h * out_w];
        let dst = &mut out[ci * in_h * in_w..(ci + 1) * in_h * in_w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                let top = v * (1.0 - a.frac);
                let bot = v * a.frac;
                dst[a.lo * in_w + b.lo] += top * (1.0 - b.frac);
                dst[a.lo * in_w + b.hi] += top * b.frac;
                dst[a.hi * in_w + b.lo] += bot * (1.0 - b.frac);
                dst[a.hi * in_w + b.hi] += bot * b.frac;
            }
        }
    }
    Tensor::new(vec![c, in_h, in_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = x.chw().unwrap();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let mut out = Tensor::zeros(&[cout, ho, wo]);
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at3(ci, iy as usize, ix as usize)
                                    * w.data()[((o * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out.data_mut()[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor::from_fn(&[2, 7, 6], |i| ((i * 37 % 11) as f64) / 11.0 - 0.4);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 13 % 7) as f64) / 7.0 - 0.5);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let fast = conv2d(&x, &w, None, stride, pad).unwrap();
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let dims = (2, 5, 6);
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let (cols, _, _) = im2col(&x, dims, 3, 2, 1);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, dims, 3, 2, 1);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn resize_adjoint_and_constants() {
        let x = Tensor::full(&[1, 4, 4], 0.7);
        let up = resize_bilinear(&x, 16, 16).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.7).abs() < 1e-15));

        let x = Tensor::from_fn(&[2, 5, 3], |i| (i as f64 * 0.3).sin());
        let y = resize_bilinear(&x, 8, 7).unwrap();
        let g = Tensor::from_fn(&[2, 8, 7], |i| (i as f64 * 0.7).cos());
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let back = resize_bilinear_adjoint(&g, 5, 3).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
