//! Forward and adjoint kernels for the learned layers: dense and depthwise
//! convolution, batch/layer normalization and windowed cross-attention.

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        x: [usize; 4],
        wshape: [usize; 4],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let [_, cin, h, w] = x;
        let [cout, cin_g, kh, kw] = wshape;
        if kh != kw {
            return Err(Error::Shape(format!("non-square kernel {kh}x{kw}")));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::Shape(format!(
                "conv expects {} input channels per group, weight {:?} with {groups} groups, got {cin}",
                cin_g, wshape
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Dimension(format!(
                "conv kernel {kh} stride {stride} does not fit {h}x{w} with pad {pad}"
            )));
        }
        Ok(ConvGeom {
            cin,
            cout,
            k: kh,
            stride,
            pad,
            groups,
            h,
            w,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cin == self.cout && self.groups > 1
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn macs_per_sample(&self) -> u64 {
        (self.cout * (self.cin / self.groups) * self.k * self.k * self.ho * self.wo) as u64
    }
}

/// Valid output index range `[lo, hi)` along one axis for kernel tap `kt`.
#[inline]
fn tap_range(kt: usize, pad: usize, stride: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    // need 0 <= o*stride + kt - pad < len_in
    let lo = if pad > kt { (pad - kt).div_ceil(stride) } else { 0 };
    let hi = if len_in + pad > kt { (len_in + pad - kt - 1) / stride + 1 } else { 0 };
    (lo.min(len_out), hi.min(len_out).max(lo.min(len_out)))
}

/// Writes the patch matrix of one sample into `col`, row `r` starting at
/// `r * ld + off`.
fn im2col<T: Float>(x: &[T], c: usize, g: &ConvGeom, col: &mut [T], ld: usize, off: usize) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let hw_out = g.ho * g.wo;
    for ci in 0..c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = tap_range(ky, p, s, g.h, g.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = tap_range(kx, p, s, g.w, g.wo);
                let row = &mut col[((ci * k + ky) * k + kx) * ld + off..][..hw_out];
                row.iter_mut().for_each(|v| *v = T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    if s == 1 {
                        let off = ox_lo + kx - p;
                        dst[ox_lo..ox_hi].copy_from_slice(&src[off..off + ox_hi - ox_lo]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_acc<T: Float>(col: &[T], c: usize, g: &ConvGeom, x: &mut [T], ld: usize, off: usize) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let hw_out = g.ho * g.wo;
    for ci in 0..c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = tap_range(ky, p, s, g.h, g.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = tap_range(kx, p, s, g.w, g.wo);
                let row = &col[((ci * k + ky) * k + kx) * ld + off..][..hw_out];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * s + kx - p] += src[ox];
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators so the sum vectorizes.
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = acc.iter().copied().fold(T::zero(), |p, q| p + q);
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// Depthwise correlation of one plane with one `k×k` kernel, accumulated
/// into `out`.
fn dw_plane_forward<T: Float>(x: &[T], kern: &[T], g: &ConvGeom, out: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    for ky in 0..k {
        let (oy_lo, oy_hi) = tap_range(ky, p, s, g.h, g.ho);
        for kx in 0..k {
            let wv = kern[ky * k + kx];
            let (ox_lo, ox_hi) = tap_range(kx, p, s, g.w, g.wo);
            for oy in oy_lo..oy_hi {
                let iy = oy * s + ky - p;
                let src = &x[iy * g.w..(iy + 1) * g.w];
                let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                if s == 1 {
                    if ox_lo < ox_hi {
                        let off = ox_lo + kx - p;
                        for (d, &v) in dst[ox_lo..ox_hi].iter_mut().zip(&src[off..off + ox_hi - ox_lo]) {
                            *d += wv * v;
                        }
                    }
                } else {
                    for ox in ox_lo..ox_hi {
                        dst[ox] += wv * src[ox * s + kx - p];
                    }
                }
            }
        }
    }
}

fn dw_plane_backward<T: Float>(
    x: &[T],
    kern: &[T],
    dy: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dk: &mut [T],
    need_dk: bool,
) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let mut dx = dx;
    for ky in 0..k {
        let (oy_lo, oy_hi) = tap_range(ky, p, s, g.h, g.ho);
        for kx in 0..k {
            let wv = kern[ky * k + kx];
            let (ox_lo, ox_hi) = tap_range(kx, p, s, g.w, g.wo);
            let mut acc = T::zero();
            for oy in oy_lo..oy_hi {
                let iy = oy * s + ky - p;
                let g_row = &dy[oy * g.wo..(oy + 1) * g.wo];
                if need_dk {
                    let x_row = &x[iy * g.w..(iy + 1) * g.w];
                    if s == 1 && ox_lo < ox_hi {
                        let off = ox_lo + kx - p;
                        acc += dot(&g_row[ox_lo..ox_hi], &x_row[off..off + ox_hi - ox_lo]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            acc += g_row[ox] * x_row[ox * s + kx - p];
                        }
                    }
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let d_row = &mut dx[iy * g.w..(iy + 1) * g.w];
                    if s == 1 && ox_lo < ox_hi {
                        let off = ox_lo + kx - p;
                        let d = &mut d_row[off..off + ox_hi - ox_lo];
                        for (d, &gv) in d.iter_mut().zip(&g_row[ox_lo..ox_hi]) {
                            *d += wv * gv;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            d_row[ox * s + kx - p] += wv * g_row[ox];
                        }
                    }
                }
            }
            dk[ky * k + kx] += acc;
        }
    }
}

/// Upper bound on elements in one batched patch matrix.
const COL_BUDGET: usize = 1 << 20;

fn sample_chunk(kk: usize, hw: usize, n: usize) -> usize {
    (COL_BUDGET / (kk * hw).max(1)).clamp(1, n.max(1))
}

/// Gathers channels `c0..c0 + c` of samples `s0..s0 + ns` into a
/// `[c, ns * hw]` matrix.
fn gather_channels<T: Float>(t: &Tensor<T>, s0: usize, ns: usize, c0: usize, c: usize, dst: &mut [T]) {
    let hw = t.h() * t.w();
    let ld = ns * hw;
    for j in 0..ns {
        let src = &t.sample(s0 + j)[c0 * hw..(c0 + c) * hw];
        for ci in 0..c {
            dst[ci * ld + j * hw..][..hw].copy_from_slice(&src[ci * hw..(ci + 1) * hw]);
        }
    }
}

fn scatter_channels<T: Float>(src: &[T], t: &mut Tensor<T>, s0: usize, ns: usize, c0: usize, c: usize) {
    let hw = t.h() * t.w();
    let ld = ns * hw;
    for j in 0..ns {
        let dst = &mut t.sample_mut(s0 + j)[c0 * hw..(c0 + c) * hw];
        for ci in 0..c {
            dst[ci * hw..(ci + 1) * hw].copy_from_slice(&src[ci * ld + j * hw..][..hw]);
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let n = x.n();
    let mut out = Tensor::zeros([n, g.cout, g.ho, g.wo]);
    let hw_out = g.ho * g.wo;
    let hw_in = g.h * g.w;
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let kk = cin_g * g.k * g.k;
    if g.is_depthwise() {
        for s in 0..n {
            for c in 0..g.cin {
                let kern = &w.data()[c * g.k * g.k..(c + 1) * g.k * g.k];
                dw_plane_forward(x.plane(s, c), kern, g, out.plane_mut(s, c));
            }
        }
    } else {
        let chunk = sample_chunk(kk, hw_out, n);
        let mut col = vec![T::zero(); kk * chunk * hw_out];
        let mut res = vec![T::zero(); cout_g * chunk * hw_out];
        for s0 in (0..n).step_by(chunk) {
            let ns = chunk.min(n - s0);
            let ld = ns * hw_out;
            for gi in 0..g.groups {
                if g.is_pointwise() {
                    gather_channels(x, s0, ns, gi * cin_g, cin_g, &mut col);
                } else {
                    for j in 0..ns {
                        let xg = &x.sample(s0 + j)[gi * cin_g * hw_in..(gi + 1) * cin_g * hw_in];
                        im2col(xg, cin_g, g, &mut col, ld, j * hw_out);
                    }
                }
                let wg = &w.data()[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                matmul_acc(cout_g, kk, ld, wg, false, &col, false, &mut res, T::zero());
                scatter_channels(&res, &mut out, s0, ns, gi * cout_g, cout_g);
            }
        }
    }
    if let Some(b) = b {
        for s in 0..n {
            for c in 0..g.cout {
                let bv = b.data()[c];
                out.plane_mut(s, c).iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` only when `need_dx`, `dw` and `db` are
/// zero unless `need_dw`.
pub(crate) fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let n = x.n();
    let hw_out = g.ho * g.wo;
    let hw_in = g.h * g.w;
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let kk = cin_g * g.k * g.k;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([1, g.cout, 1, 1]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    if need_dw {
        for s in 0..n {
            for c in 0..g.cout {
                db.data_mut()[c] += dy.plane(s, c).iter().copied().sum::<T>();
            }
        }
    }
    if g.is_depthwise() {
        let kk2 = g.k * g.k;
        let mut scratch = vec![T::zero(); kk2];
        for s in 0..n {
            for c in 0..g.cin {
                let kern = &w.data()[c * kk2..(c + 1) * kk2];
                let dk = if need_dw { &mut dw.data_mut()[c * kk2..(c + 1) * kk2] } else { &mut scratch[..] };
                let dxp = dx.as_mut().map(|d| d.plane_mut(s, c));
                dw_plane_backward(x.plane(s, c), kern, dy.plane(s, c), g, dxp, dk, need_dw);
            }
        }
        return (dx, dw, db);
    }
    let chunk = sample_chunk(kk, hw_out, n);
    let mut col = vec![T::zero(); kk * chunk * hw_out];
    let mut dyc = vec![T::zero(); cout_g * chunk * hw_out];
    let mut dxc = vec![T::zero(); if need_dx { kk * chunk * hw_out } else { 0 }];
    for s0 in (0..n).step_by(chunk) {
        let ns = chunk.min(n - s0);
        let ld = ns * hw_out;
        for gi in 0..g.groups {
            gather_channels(dy, s0, ns, gi * cout_g, cout_g, &mut dyc);
            if need_dw {
                if g.is_pointwise() {
                    gather_channels(x, s0, ns, gi * cin_g, cin_g, &mut col);
                } else {
                    for j in 0..ns {
                        let xg = &x.sample(s0 + j)[gi * cin_g * hw_in..(gi + 1) * cin_g * hw_in];
                        im2col(xg, cin_g, g, &mut col, ld, j * hw_out);
                    }
                }
                let dwg = &mut dw.data_mut()[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                matmul_acc(cout_g, ld, kk, &dyc, false, &col, true, dwg, T::one());
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &w.data()[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                matmul_acc(kk, cout_g, ld, wg, true, &dyc, false, &mut dxc, T::zero());
                if g.is_pointwise() {
                    scatter_channels(&dxc, dx, s0, ns, gi * cin_g, cin_g);
                } else {
                    for j in 0..ns {
                        let dxg = &mut dx.sample_mut(s0 + j)[gi * cin_g * hw_in..(gi + 1) * cin_g * hw_in];
                        col2im_acc(&dxc, cin_g, g, dxg, ld, j * hw_out);
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise convolution where every sample carries its own kernels
/// (`kern` has shape `[N, C, k, k]`).
pub(crate) fn dw_per_sample_forward<T: Float>(x: &Tensor<T>, kern: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let mut out = Tensor::zeros([x.n(), x.c(), g.ho, g.wo]);
    let kk = g.k * g.k;
    for s in 0..x.n() {
        for c in 0..x.c() {
            let kr = &kern.sample(s)[c * kk..(c + 1) * kk];
            dw_plane_forward(x.plane(s, c), kr, g, out.plane_mut(s, c));
        }
    }
    out
}

pub(crate) fn dw_per_sample_backward<T: Float>(
    x: &Tensor<T>,
    kern: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let kk = g.k * g.k;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dk = Tensor::zeros(kern.shape());
    for s in 0..x.n() {
        for c in 0..x.c() {
            let kr = &kern.sample(s)[c * kk..(c + 1) * kk];
            let dkr = &mut dk.sample_mut(s)[c * kk..(c + 1) * kk];
            let dxp = dx.as_mut().map(|d| d.plane_mut(s, c));
            dw_plane_backward(x.plane(s, c), kr, dy.plane(s, c), g, dxp, dkr, true);
        }
    }
    (dx, dk)
}

/// Statistics saved by a normalization forward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormSaved<T: Float> {
    pub xhat: Tensor<T>,
    /// One entry per normalized group (channel for batch norm, pixel for
    /// layer norm).
    pub inv_std: Vec<T>,
}

/// Batch normalization over (N, H, W) per channel using batch statistics.
/// Returns the output, saved state, and the biased batch mean and variance.
pub(crate) fn batch_norm_train<T: Float>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Tensor<T>, NormSaved<T>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.shape();
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for smp in 0..n {
            s += x.plane(smp, ch).iter().map(|v| v.f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut q = 0.0;
        for smp in 0..n {
            q += x.plane(smp, ch).iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = q / m;
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for smp in 0..n {
        for ch in 0..c {
            let mu = T::of(mean[ch]);
            let inv = inv_std[ch];
            let src = x.plane(smp, ch);
            let xh = xhat.plane_mut(smp, ch);
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = (v - mu) * inv;
            }
            let (gm, bt) = (gamma[ch], beta[ch]);
            let xh = xhat.plane(smp, ch).to_vec();
            for (d, v) in y.plane_mut(smp, ch).iter_mut().zip(xh) {
                *d = gm * v + bt;
            }
        }
    }
    (y, NormSaved { xhat, inv_std }, mean, var)
}

/// Returns `(dx, dgamma, dbeta)` for training-mode batch normalization.
pub(crate) fn batch_norm_train_backward<T: Float>(
    dy: &Tensor<T>,
    saved: &NormSaved<T>,
    gamma: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dy.shape();
    let m = T::of((n * h * w) as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for smp in 0..n {
            for (&g, &xh) in dy.plane(smp, ch).iter().zip(saved.xhat.plane(smp, ch)) {
                sum_dy += g;
                sum_dy_xh += g * xh;
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let k = gamma[ch] * saved.inv_std[ch] / m;
        for smp in 0..n {
            let g_p = dy.plane(smp, ch);
            let xh_p = saved.xhat.plane(smp, ch);
            let dst = dx.plane_mut(smp, ch);
            for i in 0..h * w {
                dst[i] = k * (m * g_p[i] - sum_dy - xh_p[i] * sum_dy_xh);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Layer normalization across channels at every pixel, with per-channel
/// affine parameters.
pub(crate) fn layer_norm_channels<T: Float>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Tensor<T>, NormSaved<T>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); n * hw];
    let cn = c as f64;
    for s in 0..n {
        let xs = x.sample(s);
        let mut mean = vec![0.0f64; hw];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(&xs[ch * hw..(ch + 1) * hw]) {
                *m += v.f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= cn);
        let mut var = vec![0.0f64; hw];
        for ch in 0..c {
            for ((q, v), m) in var.iter_mut().zip(&xs[ch * hw..(ch + 1) * hw]).zip(&mean) {
                *q += (v.f64() - m).powi(2);
            }
        }
        let inv: Vec<T> = var.iter().map(|q| T::of(1.0 / (q / cn + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
        let xh = xhat.sample_mut(s);
        for ch in 0..c {
            for i in 0..hw {
                xh[ch * hw + i] = (xs[ch * hw + i] - mean_t[i]) * inv[i];
            }
        }
        let ys = y.sample_mut(s);
        for ch in 0..c {
            for i in 0..hw {
                ys[ch * hw + i] = gamma[ch] * xh[ch * hw + i] + beta[ch];
            }
        }
        inv_std[s * hw..(s + 1) * hw].copy_from_slice(&inv);
    }
    (y, NormSaved { xhat, inv_std })
}

pub(crate) fn layer_norm_channels_backward<T: Float>(
    dy: &Tensor<T>,
    saved: &NormSaved<T>,
    gamma: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dy.shape();
    let hw = h * w;
    let cn = T::of(c as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        let g = dy.sample(s);
        let xh = saved.xhat.sample(s);
        let mut sum_d = vec![T::zero(); hw];
        let mut sum_dx = vec![T::zero(); hw];
        for ch in 0..c {
            for i in 0..hw {
                let d = g[ch * hw + i] * gamma[ch];
                sum_d[i] += d;
                sum_dx[i] += d * xh[ch * hw + i];
                dgamma[ch] += g[ch * hw + i] * xh[ch * hw + i];
                dbeta[ch] += g[ch * hw + i];
            }
        }
        let inv = &saved.inv_std[s * hw..(s + 1) * hw];
        let out = dx.sample_mut(s);
        for ch in 0..c {
            for i in 0..hw {
                let d = g[ch * hw + i] * gamma[ch];
                out[ch * hw + i] = inv[i] / cn * (cn * d - sum_d[i] - xh[ch * hw + i] * sum_dx[i]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Geometry of the shared-affinity window attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeom {
    pub win_h: usize,
    pub win_w: usize,
    pub heads: usize,
}

impl WindowGeom {
    pub fn tokens(&self) -> usize {
        self.win_h * self.win_w
    }

    pub(crate) fn validate(&self, d: usize, h: usize, w: usize) -> Result<()> {
        if self.win_h == 0 || self.win_w == 0 || h % self.win_h != 0 || w % self.win_w != 0 {
            return Err(Error::Config(format!(
                "window {}x{} does not divide feature map {h}x{w}",
                self.win_h, self.win_w
            )));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide dim {d}", self.heads)));
        }
        Ok(())
    }
}

/// Per-window saved state: the row-softmax affinity `M` and the column sums
/// used to renormalize its transpose.
#[derive(Clone, Debug)]
pub(crate) struct AttnSaved<T: Float> {
    pub m: Vec<T>,
    pub colsum: Vec<T>,
}

fn gather<T: Float>(t: &Tensor<T>, s: usize, c0: usize, dh: usize, y0: usize, x0: usize, g: &WindowGeom, out: &mut [T]) {
    // token-major: out[tok * dh + d]
    let w = t.w();
    for d in 0..dh {
        let p = t.plane(s, c0 + d);
        for wy in 0..g.win_h {
            for wx in 0..g.win_w {
                out[(wy * g.win_w + wx) * dh + d] = p[(y0 + wy) * w + x0 + wx];
            }
        }
    }
}

fn scatter<T: Float>(src: &[T], t: &mut Tensor<T>, s: usize, c0: usize, dh: usize, y0: usize, x0: usize, g: &WindowGeom) {
    let w = t.w();
    for d in 0..dh {
        let p = t.plane_mut(s, c0 + d);
        for wy in 0..g.win_h {
            for wx in 0..g.win_w {
                p[(y0 + wy) * w + x0 + wx] += src[(wy * g.win_w + wx) * dh + d];
            }
        }
    }
}

fn softmax_rows<T: Float>(m: &mut [T], t: usize) {
    for row in m.chunks_mut(t) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
}

/// Shared-affinity window cross-attention.
///
/// Inputs are `[N, D, H, W]`. Output is `[N, 2D, H, W]`: channels `0..D`
/// hold `M·Vf` (queries from the image branch), channels `D..2D` hold
/// `P·Vh` with `P` the row-renormalized transpose of `M`.
pub(crate) fn window_attention_forward<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    vf: &Tensor<T>,
    vh: &Tensor<T>,
    g: &WindowGeom,
) -> (Tensor<T>, AttnSaved<T>) {
    let [n, d, h, w] = q.shape();
    let dh = d / g.heads;
    let t = g.tokens();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let nwin = (h / g.win_h) * (w / g.win_w);
    let mut out = Tensor::zeros([n, 2 * d, h, w]);
    let mut saved = AttnSaved {
        m: Vec::with_capacity(n * nwin * g.heads * t * t),
        colsum: Vec::with_capacity(n * nwin * g.heads * t),
    };
    let mut qb = vec![T::zero(); t * dh];
    let mut kb = vec![T::zero(); t * dh];
    let mut vfb = vec![T::zero(); t * dh];
    let mut vhb = vec![T::zero(); t * dh];
    let mut ob = vec![T::zero(); t * dh];
    let mut pm = vec![T::zero(); t * t];
    for s in 0..n {
        for y0 in (0..h).step_by(g.win_h) {
            for x0 in (0..w).step_by(g.win_w) {
                for hd in 0..g.heads {
                    let c0 = hd * dh;
                    gather(q, s, c0, dh, y0, x0, g, &mut qb);
                    gather(k, s, c0, dh, y0, x0, g, &mut kb);
                    gather(vf, s, c0, dh, y0, x0, g, &mut vfb);
                    gather(vh, s, c0, dh, y0, x0, g, &mut vhb);
                    let mut m = vec![T::zero(); t * t];
                    matmul_acc(t, dh, t, &qb, false, &kb, true, &mut m, T::zero());
                    m.iter_mut().for_each(|v| *v = *v * scale);
                    softmax_rows(&mut m, t);
                    matmul_acc(t, t, dh, &m, false, &vfb, false, &mut ob, T::zero());
                    scatter(&ob, &mut out, s, c0, dh, y0, x0, g);
                    let mut colsum = vec![T::zero(); t];
                    for i in 0..t {
                        for j in 0..t {
                            colsum[j] += m[i * t + j];
                        }
                    }
                    for j in 0..t {
                        for i in 0..t {
                            pm[j * t + i] = m[i * t + j] / colsum[j];
                        }
                    }
                    matmul_acc(t, t, dh, &pm, false, &vhb, false, &mut ob, T::zero());
                    scatter(&ob, &mut out, s, d + c0, dh, y0, x0, g);
                    saved.m.extend_from_slice(&m);
                    saved.colsum.extend_from_slice(&colsum);
                }
            }
        }
    }
    (out, saved)
}

/// Returns gradients for `(q, k, vf, vh)`.
pub(crate) fn window_attention_backward<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    vf: &Tensor<T>,
    vh: &Tensor<T>,
    dout: &Tensor<T>,
    saved: &AttnSaved<T>,
    g: &WindowGeom,
) -> [Tensor<T>; 4] {
    let [n, d, h, w] = q.shape();
    let dh = d / g.heads;
    let t = g.tokens();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(q.shape());
    let mut dvf = Tensor::zeros(q.shape());
    let mut dvh = Tensor::zeros(q.shape());
    let mut qb = vec![T::zero(); t * dh];
    let mut kb = vec![T::zero(); t * dh];
    let mut vfb = vec![T::zero(); t * dh];
    let mut vhb = vec![T::zero(); t * dh];
    let mut doh = vec![T::zero(); t * dh];
    let mut dof = vec![T::zero(); t * dh];
    let mut tmp = vec![T::zero(); t * dh];
    let mut dm = vec![T::zero(); t * t];
    let mut dp = vec![T::zero(); t * t];
    let mut pm = vec![T::zero(); t * t];
    let mut idx = 0;
    for s in 0..n {
        for y0 in (0..h).step_by(g.win_h) {
            for x0 in (0..w).step_by(g.win_w) {
                for hd in 0..g.heads {
                    let c0 = hd * dh;
                    let m = &saved.m[idx * t * t..(idx + 1) * t * t];
                    let colsum = &saved.colsum[idx * t..(idx + 1) * t];
                    idx += 1;
                    gather(q, s, c0, dh, y0, x0, g, &mut qb);
                    gather(k, s, c0, dh, y0, x0, g, &mut kb);
                    gather(vf, s, c0, dh, y0, x0, g, &mut vfb);
                    gather(vh, s, c0, dh, y0, x0, g, &mut vhb);
                    gather(dout, s, c0, dh, y0, x0, g, &mut doh);
                    gather(dout, s, d + c0, dh, y0, x0, g, &mut dof);
                    for j in 0..t {
                        for i in 0..t {
                            pm[j * t + i] = m[i * t + j] / colsum[j];
                        }
                    }
                    // out_h = M Vf
                    matmul_acc(t, t, dh, m, true, &doh, false, &mut tmp, T::zero());
                    scatter(&tmp, &mut dvf, s, c0, dh, y0, x0, g);
                    matmul_acc(t, dh, t, &doh, false, &vfb, true, &mut dm, T::zero());
                    // out_f = P Vh
                    matmul_acc(t, t, dh, &pm, true, &dof, false, &mut tmp, T::zero());
                    scatter(&tmp, &mut dvh, s, c0, dh, y0, x0, g);
                    matmul_acc(t, dh, t, &dof, false, &vhb, true, &mut dp, T::zero());
                    // P[j,i] = M[i,j] / c_j
                    for j in 0..t {
                        let mut r = T::zero();
                        for i in 0..t {
                            r += dp[j * t + i] * pm[j * t + i];
                        }
                        for i in 0..t {
                            dm[i * t + j] += (dp[j * t + i] - r) / colsum[j];
                        }
                    }
                    // row softmax
                    for i in 0..t {
                        let row_m = &m[i * t..(i + 1) * t];
                        let row_d = &mut dm[i * t..(i + 1) * t];
                        let dot: T = row_m.iter().zip(row_d.iter()).map(|(&a, &b)| a * b).sum();
                        for (dv, &mv) in row_d.iter_mut().zip(row_m) {
                            *dv = mv * (*dv - dot) * scale;
                        }
                    }
                    matmul_acc(t, t, dh, &dm, false, &kb, false, &mut tmp, T::zero());
                    scatter(&tmp, &mut dq, s, c0, dh, y0, x0, g);
                    matmul_acc(t, t, dh, &dm, true, &qb, false, &mut tmp, T::zero());
                    scatter(&tmp, &mut dk, s, c0, dh, y0, x0, g);
                }
            }
        }
    }
    [dq, dk, dvf, dvh]
}
