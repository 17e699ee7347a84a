//! Frequency-band kernels: one-level orthonormal Haar DWT and its inverse,
//! pooling-based low/high splitting, and sRGB to CIELAB conversion.
//!
//! Haar convention for a 2x2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2     HL = (a - b + c - d) / 2
//! LH = (a + b - c - d) / 2     HH = (a - b - c + d) / 2
//! ```
//!
//! The transform is orthonormal, so the inverse is also its adjoint; the
//! autograd ops reuse these kernels for both directions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Output of one Haar level: the approximation band plus the detail bands
/// stacked band-major along channels as `[LH, HL, HH]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyBands<T: Float = f32> {
    pub ll: Tensor<T>,
    pub high: Tensor<T>,
}

impl<T: Float> FrequencyBands<T> {
    /// Sum of squares over all four bands.
    pub fn energy(&self) -> f64 {
        let sq = |t: &Tensor<T>| t.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        sq(&self.ll) + sq(&self.high)
    }
}

/// How the high band of a pooling split is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighPassMode {
    /// `high = maxpool(x)`.
    #[default]
    Maxpool,
    /// `high = maxpool(x) - avgpool(x)`.
    Residual,
}

pub(crate) fn check_even(shape: [usize; 4]) -> Result<()> {
    if shape[2] % 2 != 0 {
        return Err(Error::Dimension(format!("haar transform needs even height, got H={}", shape[2])));
    }
    if shape[3] % 2 != 0 {
        return Err(Error::Dimension(format!("haar transform needs even width, got W={}", shape[3])));
    }
    Ok(())
}

/// Packed forward Haar: `[N, C, H, W] -> [N, 4C, H/2, W/2]` with channel
/// groups `[LL | LH | HL | HH]`.
pub(crate) fn haar_forward_packed<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (h2, w2) = (h / 2, w / 2);
    let half = T::of(0.5);
    let mut out = Tensor::zeros([n, 4 * c, h2, w2]);
    for s in 0..n {
        for ch in 0..c {
            let p = x.plane(s, ch);
            let mut ll = vec![T::zero(); h2 * w2];
            let mut lh = vec![T::zero(); h2 * w2];
            let mut hl = vec![T::zero(); h2 * w2];
            let mut hh = vec![T::zero(); h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    let a = p[2 * y * w + 2 * xx];
                    let b = p[2 * y * w + 2 * xx + 1];
                    let cc = p[(2 * y + 1) * w + 2 * xx];
                    let d = p[(2 * y + 1) * w + 2 * xx + 1];
                    let i = y * w2 + xx;
                    ll[i] = (a + b + cc + d) * half;
                    hl[i] = (a - b + cc - d) * half;
                    lh[i] = (a + b - cc - d) * half;
                    hh[i] = (a - b - cc + d) * half;
                }
            }
            out.plane_mut(s, ch).copy_from_slice(&ll);
            out.plane_mut(s, c + ch).copy_from_slice(&lh);
            out.plane_mut(s, 2 * c + ch).copy_from_slice(&hl);
            out.plane_mut(s, 3 * c + ch).copy_from_slice(&hh);
        }
    }
    out
}

/// Packed inverse Haar: `[N, 4C, h, w] -> [N, C, 2h, 2w]`.
pub(crate) fn haar_inverse_packed<T: Float>(b: &Tensor<T>) -> Tensor<T> {
    let [n, c4, h2, w2] = b.shape();
    let c = c4 / 4;
    let (h, w) = (2 * h2, 2 * w2);
    let half = T::of(0.5);
    let mut out = Tensor::zeros([n, c, h, w]);
    for s in 0..n {
        for ch in 0..c {
            let ll = b.plane(s, ch).to_vec();
            let lh = b.plane(s, c + ch).to_vec();
            let hl = b.plane(s, 2 * c + ch).to_vec();
            let hh = b.plane(s, 3 * c + ch).to_vec();
            let p = out.plane_mut(s, ch);
            for y in 0..h2 {
                for xx in 0..w2 {
                    let i = y * w2 + xx;
                    let (l, lhv, hlv, hhv) = (ll[i], lh[i], hl[i], hh[i]);
                    p[2 * y * w + 2 * xx] = (l + hlv + lhv + hhv) * half;
                    p[2 * y * w + 2 * xx + 1] = (l - hlv + lhv - hhv) * half;
                    p[(2 * y + 1) * w + 2 * xx] = (l + hlv - lhv - hhv) * half;
                    p[(2 * y + 1) * w + 2 * xx + 1] = (l - hlv - lhv + hhv) * half;
                }
            }
        }
    }
    out
}

pub(crate) fn split_channels<T: Float>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let [n, _, h, w] = x.shape();
    let mut out = Tensor::zeros([n, len, h, w]);
    for s in 0..n {
        let hw = h * w;
        out.sample_mut(s).copy_from_slice(&x.sample(s)[start * hw..(start + len) * hw]);
    }
    out
}

pub(crate) fn concat_channels<T: Float>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    let [n, _, h, w] = first.shape();
    for p in parts {
        if p.n() != n || p.h() != h || p.w() != w {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?} along channels",
                p.shape(),
                first.shape()
            )));
        }
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let mut out = Tensor::zeros([n, c, h, w]);
    for s in 0..n {
        let mut o = 0;
        let dst = out.sample_mut(s);
        for p in parts {
            let src = p.sample(s);
            dst[o..o + src.len()].copy_from_slice(src);
            o += src.len();
        }
    }
    Ok(out)
}

/// One-level Haar DWT.
pub fn haar_dwt<T: Float>(x: &Tensor<T>) -> Result<FrequencyBands<T>> {
    check_even(x.shape())?;
    let packed = haar_forward_packed(x);
    let c = x.c();
    Ok(FrequencyBands { ll: split_channels(&packed, 0, c), high: split_channels(&packed, c, 3 * c) })
}

/// Exact inverse of [`haar_dwt`].
pub fn haar_idwt<T: Float>(bands: &FrequencyBands<T>) -> Result<Tensor<T>> {
    let (ll, high) = (&bands.ll, &bands.high);
    if high.c() != 3 * ll.c() {
        return Err(Error::Shape(format!(
            "high band has {} channels, expected 3 x {} = {}",
            high.c(),
            ll.c(),
            3 * ll.c()
        )));
    }
    if high.n() != ll.n() || high.h() != ll.h() || high.w() != ll.w() {
        return Err(Error::Shape(format!(
            "band shapes {:?} and {:?} are inconsistent",
            ll.shape(),
            high.shape()
        )));
    }
    Ok(haar_inverse_packed(&concat_channels(&[ll, high])?))
}

/// Window placement of a pooling split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub k: usize,
    pub stride: usize,
    pub pad_lo: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    /// Padding chosen so the output is exactly `input / stride`.
    pub fn new(h: usize, w: usize, k: usize, stride: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("pooling kernel must be at least 1".into()));
        }
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Dimension(format!(
                "spatial dims {h}x{w} are not divisible by stride {stride}"
            )));
        }
        let pad_total = k.saturating_sub(stride);
        Ok(PoolGeom { k, stride, pad_lo: pad_total / 2, h, w, ho: h / stride, wo: w / stride })
    }

    #[inline]
    fn window(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad_lo as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.k as isize).max(0) as usize).min(len);
        (lo, hi)
    }
}

impl PoolGeom {
    fn windows(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        ((0..self.ho).map(|o| self.window(o, self.h)).collect(), (0..self.wo).map(|o| self.window(o, self.w)).collect())
    }
}

pub(crate) fn avg_pool_forward<T: Float>(x: &Tensor<T>, g: &PoolGeom) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    let mut out = Tensor::zeros([n, c, g.ho, g.wo]);
    let (wy, wx) = g.windows();
    let mut rows = vec![T::zero(); g.h * g.wo];
    for s in 0..n {
        for ch in 0..c {
            let p = x.plane(s, ch);
            for y in 0..g.h {
                let src = &p[y * g.w..(y + 1) * g.w];
                for (ox, &(x0, x1)) in wx.iter().enumerate() {
                    rows[y * g.wo + ox] = src[x0..x1].iter().copied().sum();
                }
            }
            let o = out.plane_mut(s, ch);
            for (oy, &(y0, y1)) in wy.iter().enumerate() {
                let dst = &mut o[oy * g.wo..(oy + 1) * g.wo];
                for y in y0..y1 {
                    for (d, &r) in dst.iter_mut().zip(&rows[y * g.wo..(y + 1) * g.wo]) {
                        *d += r;
                    }
                }
                for (d, &(x0, x1)) in dst.iter_mut().zip(&wx) {
                    *d = *d / T::of(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Float>(dy: &Tensor<T>, g: &PoolGeom) -> Tensor<T> {
    let [n, c, _, _] = dy.shape();
    let mut dx = Tensor::zeros([n, c, g.h, g.w]);
    let (wy, wx) = g.windows();
    let mut rows = vec![T::zero(); g.h * g.wo];
    let mut scaled = vec![T::zero(); g.wo];
    for s in 0..n {
        for ch in 0..c {
            let gp = dy.plane(s, ch);
            rows.iter_mut().for_each(|v| *v = T::zero());
            for (oy, &(y0, y1)) in wy.iter().enumerate() {
                for (ox, &(x0, x1)) in wx.iter().enumerate() {
                    scaled[ox] = gp[oy * g.wo + ox] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                }
                for y in y0..y1 {
                    for (r, &v) in rows[y * g.wo..(y + 1) * g.wo].iter_mut().zip(&scaled) {
                        *r += v;
                    }
                }
            }
            let d = dx.plane_mut(s, ch);
            for y in 0..g.h {
                let dst = &mut d[y * g.w..(y + 1) * g.w];
                for (ox, &(x0, x1)) in wx.iter().enumerate() {
                    let v = rows[y * g.wo + ox];
                    dst[x0..x1].iter_mut().for_each(|e| *e += v);
                }
            }
        }
    }
    dx
}

/// Max pooling; also returns the in-plane index of every winner (first
/// maximum in row-major order on ties).
pub(crate) fn max_pool_forward<T: Float>(x: &Tensor<T>, g: &PoolGeom) -> (Tensor<T>, Vec<u32>) {
    let [n, c, _, _] = x.shape();
    let mut out = Tensor::zeros([n, c, g.ho, g.wo]);
    let mut arg = vec![0u32; n * c * g.ho * g.wo];
    let (wy, wx) = g.windows();
    let mut rows = vec![T::zero(); g.h * g.wo];
    let mut row_arg = vec![0u32; g.h * g.wo];
    let per = g.ho * g.wo;
    for s in 0..n {
        for ch in 0..c {
            let p = x.plane(s, ch);
            for y in 0..g.h {
                let src = &p[y * g.w..(y + 1) * g.w];
                for (ox, &(x0, x1)) in wx.iter().enumerate() {
                    let mut best = T::neg_infinity();
                    let mut bi = x0;
                    for (xx, &v) in src.iter().enumerate().take(x1).skip(x0) {
                        if v > best {
                            best = v;
                            bi = xx;
                        }
                    }
                    rows[y * g.wo + ox] = best;
                    row_arg[y * g.wo + ox] = (y * g.w + bi) as u32;
                }
            }
            let base = (s * c + ch) * per;
            let o = out.plane_mut(s, ch);
            for (oy, &(y0, y1)) in wy.iter().enumerate() {
                for ox in 0..g.wo {
                    let mut best = T::neg_infinity();
                    let mut bi = row_arg[y0 * g.wo + ox];
                    for y in y0..y1 {
                        let v = rows[y * g.wo + ox];
                        if v > best {
                            best = v;
                            bi = row_arg[y * g.wo + ox];
                        }
                    }
                    o[oy * g.wo + ox] = best;
                    arg[base + oy * g.wo + ox] = bi;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward<T: Float>(dy: &Tensor<T>, arg: &[u32], g: &PoolGeom) -> Tensor<T> {
    let [n, c, _, _] = dy.shape();
    let mut dx = Tensor::zeros([n, c, g.h, g.w]);
    let per = g.ho * g.wo;
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * per;
            let gp = dy.plane(s, ch);
            let d = dx.plane_mut(s, ch);
            for i in 0..per {
                d[arg[base + i] as usize] += gp[i];
            }
        }
    }
    dx
}

/// Splits `x` into an average-pooled low band and a max-pooled high band
/// with identical window geometry. Output dims are the input dims divided by
/// `stride`.
pub fn lowhigh_split<T: Float>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    mode: HighPassMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(1..=2).contains(&stride) {
        return Err(Error::Config(format!("stride must be 1 or 2, got {stride}")));
    }
    let g = PoolGeom::new(x.h(), x.w(), kernel, stride)?;
    let low = avg_pool_forward(x, &g);
    let (mut high, _) = max_pool_forward(x, &g);
    if mode == HighPassMode::Residual {
        high = high.zip_map(&low, |h, l| h - l)?;
    }
    Ok((low, high))
}

/// D65 reference white (2 degree observer).
pub const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

#[inline]
fn srgb_expand(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > 0.008856 {
        t.cbrt()
    } else {
        7.787 * t + 16.0 / 116.0
    }
}

/// Converts one sRGB triple in `[0, 1]` (values clipped) to CIELAB.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|v| srgb_expand(v.clamp(0.0, 1.0)));
    let mut xyz = [0.0; 3];
    for (i, row) in SRGB_TO_XYZ.iter().enumerate() {
        xyz[i] = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / D65_WHITE[0]);
    let fy = lab_f(xyz[1] / D65_WHITE[1]);
    let fz = lab_f(xyz[2] / D65_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts a 3-channel sRGB tensor to CIELAB (`L` in `[0, 100]`).
pub fn srgb_to_lab<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.c() != 3 {
        return Err(Error::Shape(format!("sRGB to Lab needs 3 channels, got {}", x.c())));
    }
    let mut out = Tensor::zeros(x.shape());
    let hw = x.h() * x.w();
    for s in 0..x.n() {
        let src = x.sample(s);
        let dst = out.sample_mut(s);
        for i in 0..hw {
            let lab = srgb_pixel_to_lab([src[i].f64(), src[hw + i].f64(), src[2 * hw + i].f64()]);
            for ch in 0..3 {
                dst[ch * hw + i] = T::of(lab[ch]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haar_rejects_odd_axis_by_name() {
        let e = haar_dwt(&Tensor::<f32>::zeros([1, 1, 3, 4])).unwrap_err();
        assert!(e.to_string().contains("height"), "{e}");
        let e = haar_dwt(&Tensor::<f32>::zeros([1, 1, 4, 5])).unwrap_err();
        assert!(e.to_string().contains("width"), "{e}");
    }

    #[test]
    fn idwt_rejects_bad_channel_ratio() {
        let b = FrequencyBands { ll: Tensor::<f32>::zeros([1, 2, 2, 2]), high: Tensor::zeros([1, 5, 2, 2]) };
        assert!(matches!(haar_idwt(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn split_geometry() {
        let g = PoolGeom::new(8, 8, 3, 1).unwrap();
        assert_eq!((g.ho, g.pad_lo), (8, 1));
        let g = PoolGeom::new(8, 8, 2, 2).unwrap();
        assert_eq!((g.ho, g.pad_lo), (4, 0));
        assert!(matches!(PoolGeom::new(7, 8, 2, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn lab_rejects_wrong_channel_count() {
        assert!(matches!(srgb_to_lab(&Tensor::<f64>::zeros([1, 4, 2, 2])), Err(Error::Shape(_))));
    }

    #[test]
    fn residual_high_pass_is_nonnegative() {
        let x = Tensor::<f64>::from_fn([1, 2, 4, 4], |[_, c, y, x]| ((c * 7 + y * 3 + x * 5) % 11) as f64);
        let (_, high) = lowhigh_split(&x, 2, 2, HighPassMode::Residual).unwrap();
        assert!(high.data().iter().all(|&v| v >= 0.0));
    }

    use crate::testutil::rand_tensor;

    /// Separable oracle: `H B H^T` with the 1-D orthonormal Haar matrix,
    /// returned as `[LL, LH, HL, HH]` for one 2x2 block.
    fn tensor_product_haar(b: [[f64; 2]; 2]) -> [f64; 4] {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let hm = [[r, r], [r, -r]];
        let mut t = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                t[i][j] = (0..2).map(|k| hm[i][k] * b[k][j]).sum();
            }
        }
        let mut o = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                o[i][j] = (0..2).map(|k| t[i][k] * hm[j][k]).sum();
            }
        }
        // rows vary along height, columns along width
        [o[0][0], o[1][0], o[0][1], o[1][1]]
    }

    #[test]
    fn worked_block_matches_separable_oracle() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = haar_dwt(&x).unwrap();
        let got = [b.ll.data()[0], b.high.data()[0], b.high.data()[1], b.high.data()[2]];
        let oracle = tensor_product_haar([[1.0, 2.0], [3.0, 4.0]]);
        // LL, LH, HL, HH
        let expect = [5.0, -2.0, -1.0, 0.0];
        for i in 0..4 {
            assert!((got[i] - expect[i]).abs() < 1e-12);
            assert!((oracle[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn random_blocks_match_separable_oracle() {
        let x = rand_tensor::<f64>([2, 3, 6, 8], 1, -1.0, 1.0);
        let b = haar_dwt(&x).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for by in 0..3 {
                    for bx in 0..4 {
                        let px = |dy, dx| x.at([n, c, 2 * by + dy, 2 * bx + dx]);
                        let o = tensor_product_haar([[px(0, 0), px(0, 1)], [px(1, 0), px(1, 1)]]);
                        assert!((b.ll.at([n, c, by, bx]) - o[0]).abs() < 1e-12);
                        for band in 0..3 {
                            assert!((b.high.at([n, band * 3 + c, by, bx]) - o[band + 1]).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn constant_images() {
        let b = haar_dwt(&Tensor::<f32>::zeros([1, 2, 4, 4])).unwrap();
        assert!(b.ll.data().iter().chain(b.high.data()).all(|v| *v == 0.0));
        let b = haar_dwt(&Tensor::<f32>::full([1, 2, 4, 4], 0.3)).unwrap();
        assert!(b.ll.data().iter().all(|v| (*v - 0.6).abs() < 1e-7));
        assert!(b.high.data().iter().all(|v| *v == 0.0));
        let bands = FrequencyBands { ll: Tensor::<f64>::full([1, 1, 2, 2], 1.4), high: Tensor::zeros([1, 3, 2, 2]) };
        assert!(haar_idwt(&bands).unwrap().data().iter().all(|v| (*v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn round_trip_and_energy() {
        let x = rand_tensor::<f64>([1, 1, 8, 8], 2, -1.0, 1.0);
        let b = haar_dwt(&x).unwrap();
        assert!(haar_idwt(&b).unwrap().max_abs_diff(&x) < 1e-10);
        let e: f64 = x.data().iter().map(|v| v * v).sum();
        assert!((b.energy() - e).abs() <= 1e-10 * e);
        let x = rand_tensor::<f32>([2, 3, 32, 16], 3, 0.0, 1.0);
        assert!(haar_idwt(&haar_dwt(&x).unwrap()).unwrap().max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn pooling_worked_example_and_constants() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (lo, hi) = lowhigh_split(&x, 2, 2, HighPassMode::Maxpool).unwrap();
        assert_eq!((lo.data(), hi.data()), (&[2.5][..], &[4.0][..]));
        let c = Tensor::<f64>::full([1, 2, 8, 8], 0.37);
        for (k, s) in [(1, 1), (2, 2), (3, 1), (3, 2), (4, 2), (5, 1)] {
            let (lo, hi) = lowhigh_split(&c, k, s, HighPassMode::Maxpool).unwrap();
            assert_eq!(lo.shape(), [1, 2, 8 / s, 8 / s]);
            assert!(lo.data().iter().all(|v| (*v - 0.37).abs() < 1e-15), "k {k} s {s}");
            assert!(hi.data().iter().all(|v| *v == 0.37));
        }
        let x = rand_tensor::<f64>([1, 2, 6, 6], 4, -1.0, 1.0);
        let (lo, hi) = lowhigh_split(&x, 1, 1, HighPassMode::Maxpool).unwrap();
        assert!(lo == x && hi == x);
        assert!(matches!(lowhigh_split(&x, 2, 3, HighPassMode::Maxpool), Err(Error::Config(_))));
        assert!(matches!(lowhigh_split(&x, 0, 1, HighPassMode::Maxpool), Err(Error::Config(_))));
    }

    #[test]
    fn pooling_matches_window_scan() {
        let x = rand_tensor::<f64>([1, 2, 16, 16], 5, -1.0, 1.0);
        let (lo, hi) = lowhigh_split(&x, 2, 2, HighPassMode::Maxpool).unwrap();
        for c in 0..2 {
            for y in 0..8 {
                for xx in 0..8 {
                    let w: Vec<f64> = (0..4).map(|i| x.at([0, c, 2 * y + i / 2, 2 * xx + i % 2])).collect();
                    let mean = w.iter().sum::<f64>() / 4.0;
                    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    assert!((lo.at([0, c, y, xx]) - mean).abs() < 1e-12);
                    assert_eq!(hi.at([0, c, y, xx]), max);
                    assert!(lo.at([0, c, y, xx]) <= hi.at([0, c, y, xx]));
                }
            }
        }
    }

    // skimage.color.rgb2lab reference values, computed once offline.
    const LAB_ORACLE: [([f64; 3], [f64; 3]); 5] = [
        ([0.5, 0.5, 0.5], [53.38896474, -0.00146850, 0.00278359]),
        ([0.25, 0.25, 0.25], [26.98291780, -0.00090966, 0.00172429]),
        ([0.75, 0.75, 0.75], [77.43137188, -0.00197731, 0.00374806]),
        ([0.18, 0.18, 0.18], [18.89075050, -0.00073840, 0.00139967]),
        ([0.2, 0.5, 0.8], [52.25206058, 2.77602273, -46.28571386]),
    ];

    #[test]
    fn lab_endpoints_and_reference_values() {
        let w = srgb_pixel_to_lab([1.0, 1.0, 1.0]);
        assert!((w[0] - 100.0).abs() < 1e-3 && w[1].abs() < 0.01 && w[2].abs() < 0.01, "{w:?}");
        assert_eq!(srgb_pixel_to_lab([0.0, 0.0, 0.0]).map(|v| v.abs()), [0.0, 0.0, 0.0]);
        for (rgb, lab) in LAB_ORACLE {
            let got = srgb_pixel_to_lab(rgb);
            for i in 0..3 {
                assert!((got[i] - lab[i]).abs() < 0.05, "{rgb:?}: {got:?} vs {lab:?}");
            }
        }
    }

    #[test]
    fn lab_lightness_is_monotone_in_gray() {
        let mut prev = -1.0;
        for i in 0..=256 {
            let g = i as f64 / 256.0;
            let l = srgb_pixel_to_lab([g, g, g])[0];
            assert!(l > prev, "gray {g}");
            prev = l;
        }
        let t = Tensor::<f32>::from_fn([1, 3, 1, 2], |[_, _, _, x]| x as f32);
        let lab = srgb_to_lab(&t).unwrap();
        assert!(lab.at([0, 0, 0, 0]).abs() < 1e-6 && (lab.at([0, 0, 0, 1]) - 100.0).abs() < 1e-3);
    }
}
