//! Convolution as im2col plus row-wise axpy/dot kernels, and the small
//! shape-changing layers around it.

use super::Real;

/// Channel-major activation of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![F::zero(); c * h * w],
        }
    }

    #[inline]
    pub fn plane(&self, ch: usize) -> &[F] {
        let n = self.h * self.w;
        &self.data[ch * n..(ch + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, ch: usize) -> &mut [F] {
        let n = self.h * self.w;
        &mut self.data[ch * n..(ch + 1) * n]
    }
}

#[inline]
pub(crate) fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Dot product accumulated in f64 across eight independent lanes.
#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i].to_acc() * y[i].to_acc();
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x.to_acc() * y.to_acc();
    }
    lanes.iter().sum::<f64>() + tail
}

#[inline]
pub(crate) fn sum<F: Real>(a: &[F]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let ch = a.chunks_exact(8);
    let rest = ch.remainder();
    for x in ch {
        for i in 0..8 {
            lanes[i] += x[i].to_acc();
        }
    }
    lanes.iter().sum::<f64>() + rest.iter().map(|v| v.to_acc()).sum::<f64>()
}

/// Square convolution with zero padding `k / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    /// `[out_c][in_c][k][k]`
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

/// Column matrix of a convolution input: one row of `oh * ow` values per
/// `(in_channel, ky, kx)` tap.
#[derive(Debug, Clone)]
pub struct Columns<F> {
    pub rows: usize,
    pub oh: usize,
    pub ow: usize,
    pub data: Vec<F>,
}

impl<F: Real> Columns<F> {
    #[inline]
    fn row(&self, j: usize) -> &[F] {
        let n = self.oh * self.ow;
        &self.data[j * n..(j + 1) * n]
    }
}

impl<F: Real> Conv2d<F> {
    pub fn zeros(in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        Self {
            in_c,
            out_c,
            k,
            stride,
            weight: vec![F::zero(); out_c * in_c * k * k],
            bias: vec![F::zero(); out_c],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.k / 2;
        ((h + 2 * p - self.k) / self.stride + 1, (w + 2 * p - self.k) / self.stride + 1)
    }

    pub fn im2col(&self, x: &Tensor<F>) -> Columns<F> {
        debug_assert_eq!(x.c, self.in_c);
        let (oh, ow) = self.out_dims(x.h, x.w);
        let p = self.k / 2;
        let s = self.stride;
        let n = oh * ow;
        let mut data = vec![F::zero(); self.fan_in() * n];
        for ic in 0..self.in_c {
            let src = x.plane(ic);
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let j = (ic * self.k + ky) * self.k + kx;
                    let dst = &mut data[j * n..(j + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            // valid ox: 0 <= ox + kx - p < w
                            let lo = p.saturating_sub(kx);
                            let hi = (x.w + p - kx).min(ow);
                            if lo < hi {
                                drow[lo..hi].copy_from_slice(&srow[lo + kx - p..hi + kx - p]);
                            }
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Columns {
            rows: self.fan_in(),
            oh,
            ow,
            data,
        }
    }

    /// Scatter-adds column gradients back onto the input raster.
    fn col2im(&self, cols: &Columns<F>, h: usize, w: usize) -> Tensor<F> {
        let mut dx = Tensor::zeros(self.in_c, h, w);
        let p = self.k / 2;
        let s = self.stride;
        let (oh, ow) = (cols.oh, cols.ow);
        for ic in 0..self.in_c {
            let dst = dx.plane_mut(ic);
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let j = (ic * self.k + ky) * self.k + kx;
                    let src = cols.row(j);
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let srow = &src[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let lo = p.saturating_sub(kx);
                            let hi = (w + p - kx).min(ow);
                            if lo < hi {
                                for (d, &v) in drow[lo + kx - p..hi + kx - p].iter_mut().zip(&srow[lo..hi]) {
                                    *d = *d + v;
                                }
                            }
                        } else {
                            for (ox, &v) in srow.iter().enumerate() {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    drow[ix as usize] = drow[ix as usize] + v;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward_cols(&self, cols: &Columns<F>) -> Tensor<F> {
        let mut y = Tensor::zeros(self.out_c, cols.oh, cols.ow);
        let fan = self.fan_in();
        for oc in 0..self.out_c {
            let out = y.plane_mut(oc);
            out.iter_mut().for_each(|v| *v = self.bias[oc]);
            let wrow = &self.weight[oc * fan..(oc + 1) * fan];
            for (j, &wv) in wrow.iter().enumerate() {
                if wv != F::zero() {
                    axpy(wv, cols.row(j), out);
                }
            }
        }
        y
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        self.forward_cols(&self.im2col(x))
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input_grad`.
    pub fn backward(
        &self,
        cols: &Columns<F>,
        in_dims: (usize, usize),
        dy: &Tensor<F>,
        grad: &mut ConvGrad,
        need_input_grad: bool,
    ) -> Option<Tensor<F>> {
        let fan = self.fan_in();
        for oc in 0..self.out_c {
            let g = dy.plane(oc);
            grad.bias[oc] += sum(g);
            let gw = &mut grad.weight[oc * fan..(oc + 1) * fan];
            for (j, gv) in gw.iter_mut().enumerate() {
                *gv += dot(g, cols.row(j));
            }
        }
        if !need_input_grad {
            return None;
        }
        let n = cols.oh * cols.ow;
        let mut dcols = Columns {
            rows: fan,
            oh: cols.oh,
            ow: cols.ow,
            data: vec![F::zero(); fan * n],
        };
        for oc in 0..self.out_c {
            let g = dy.plane(oc);
            let wrow = &self.weight[oc * fan..(oc + 1) * fan];
            for (j, &wv) in wrow.iter().enumerate() {
                axpy(wv, g, &mut dcols.data[j * n..(j + 1) * n]);
            }
        }
        Some(self.col2im(&dcols, in_dims.0, in_dims.1))
    }
}

/// Parameter gradients of one convolution, accumulated in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like<F>(conv: &Conv2d<F>) -> Self {
        Self {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }

    pub fn add(&mut self, other: &ConvGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

pub fn relu_inplace<F: Real>(x: &mut Tensor<F>) {
    for v in &mut x.data {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Zeroes gradient entries where the activation was clipped.
pub fn relu_backward<F: Real>(activation: &Tensor<F>, grad: &mut Tensor<F>) {
    for (g, &a) in grad.data.iter_mut().zip(&activation.data) {
        if a <= F::zero() {
            *g = F::zero();
        }
    }
}

pub fn upsample2<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.c, h2, w2);
    for ch in 0..x.c {
        let src = x.plane(ch);
        let dst = y.plane_mut(ch);
        for r in 0..h2 {
            let srow = &src[(r / 2) * x.w..(r / 2 + 1) * x.w];
            for (c, d) in dst[r * w2..(r + 1) * w2].iter_mut().enumerate() {
                *d = srow[c / 2];
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward<F: Real>(dy: &Tensor<F>) -> Tensor<F> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for ch in 0..dy.c {
        let src = dy.plane(ch);
        let dst = dx.plane_mut(ch);
        for r in 0..dy.h {
            for c in 0..dy.w {
                let i = (r / 2) * w + c / 2;
                dst[i] = dst[i] + src[r * dy.w + c];
            }
        }
    }
    dx
}

pub fn concat<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Splits a gradient of `concat(a, b)` at `a_channels`.
pub fn split<F: Real>(x: Tensor<F>, a_channels: usize) -> (Tensor<F>, Tensor<F>) {
    let n = x.h * x.w;
    let mut data = x.data;
    let rest = data.split_off(a_channels * n);
    (
        Tensor {
            c: a_channels,
            h: x.h,
            w: x.w,
            data,
        },
        Tensor {
            c: x.c - a_channels,
            h: x.h,
            w: x.w,
            data: rest,
        },
    )
}
