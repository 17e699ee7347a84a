//! Training objective and evaluation metrics.
//!
//! The objective is `mean|I_r - I| + lambda * (1 - SSIM(I_r, I))`. Metrics are
//! PSNR, Gaussian-windowed SSIM, region-masked error in CIELAB, and an
//! optional external perceptual scorer.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::freqkernels::srgb_pixel_to_lab;
use crate::tensor::{Float, Tensor};

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the structural term; 0 gives plain L1.
    pub lambda_ssim: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_ssim: 0.4, ssim_window: 11, ssim_sigma: 1.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ssim >= 0.0) {
            return Err(Error::Config(format!("lambda_ssim must be >= 0, got {}", self.lambda_ssim)));
        }
        if self.ssim_window == 0 || self.ssim_window % 2 == 0 {
            return Err(Error::Config(format!("ssim_window must be odd, got {}", self.ssim_window)));
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(Error::Config("ssim_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn check_ssim_dims(shape: [usize; 4], window: usize) -> Result<()> {
    if shape[2] < window || shape[3] < window {
        return Err(Error::Dimension(format!(
            "image {}x{} is smaller than the {window}x{window} SSIM window",
            shape[2], shape[3]
        )));
    }
    Ok(())
}

/// Differentiable mean SSIM over space and channels (valid filtering).
pub fn ssim_var<T: Float>(g: &mut Tape<T>, a: Var, b: Var, cfg: &LossConfig) -> Result<Var> {
    let shape = g.shape(a);
    if g.shape(b) != shape {
        return Err(Error::Shape(format!("SSIM inputs {:?} and {:?} differ", shape, g.shape(b))));
    }
    check_ssim_dims(shape, cfg.ssim_window)?;
    let k = cfg.ssim_window;
    let taps = gaussian_taps(k, cfg.ssim_sigma);
    let c = shape[1];
    let kern = Tensor::from_fn([c, 1, k, k], |[_, _, y, x]| T::of(taps[y] * taps[x]));
    let kern = g.constant(kern);
    let blur = |g: &mut Tape<T>, v: Var| g.conv2d(v, kern, None, 1, 0, c);
    let mu_a = blur(g, a)?;
    let mu_b = blur(g, b)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = blur(g, aa)?;
    let e_bb = blur(g, bb)?;
    let e_ab = blur(g, ab)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let s_aa = g.sub(e_aa, mu_aa)?;
    let s_bb = g.sub(e_bb, mu_bb)?;
    let s_ab = g.sub(e_ab, mu_ab)?;
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let n1 = g.scale(mu_ab, 2.0);
    let n1 = g.add_scalar(n1, c1);
    let n2 = g.scale(s_ab, 2.0);
    let n2 = g.add_scalar(n2, c2);
    let d1 = g.add(mu_aa, mu_bb)?;
    let d1 = g.add_scalar(d1, c1);
    let d2 = g.add(s_aa, s_bb)?;
    let d2 = g.add_scalar(d2, c2);
    let num = g.mul(n1, n2)?;
    let den = g.mul(d1, d2)?;
    let map = g.div(num, den)?;
    Ok(g.mean_all(map))
}

/// Loss nodes of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub l1: Var,
    /// `lambda * (1 - SSIM)`; absent when lambda is 0.
    pub ssim_term: Option<Var>,
}

/// Differentiable training objective.
pub fn loss_var<T: Float>(g: &mut Tape<T>, i_r: Var, i: Var, cfg: &LossConfig) -> Result<LossParts> {
    if g.shape(i_r) != g.shape(i) {
        return Err(Error::Shape(format!("loss inputs {:?} and {:?} differ", g.shape(i_r), g.shape(i))));
    }
    let d = g.sub(i_r, i)?;
    let ad = g.abs(d);
    let l1 = g.mean_all(ad);
    if cfg.lambda_ssim == 0.0 {
        return Ok(LossParts { total: l1, l1, ssim_term: None });
    }
    let s = ssim_var(g, i_r, i, cfg)?;
    let one_minus = g.scale(s, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let term = g.scale(one_minus, cfg.lambda_ssim);
    let total = g.add(l1, term)?;
    Ok(LossParts { total, l1, ssim_term: Some(term) })
}

/// Objective value for two tensors.
pub fn loss<T: Float>(i_r: &Tensor<T>, i: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    let mut g = Tape::<T>::inference();
    let a = g.constant(i_r.clone());
    let b = g.constant(i.clone());
    let parts = loss_var(&mut g, a, b, cfg)?;
    Ok(g.value(parts.total).data()[0].f64())
}

pub fn mse<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b, "mse")?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Float>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Valid separable filtering of one plane with symmetric taps.
fn blur_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| taps[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| taps[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Gaussian-windowed SSIM (peak 1), averaged over space and channels.
pub fn ssim<T: Float>(a: &Tensor<T>, b: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    check_ssim_dims(a.shape(), cfg.ssim_window)?;
    let taps = gaussian_taps(cfg.ssim_window, cfg.ssim_sigma);
    let (h, w) = (a.h(), a.w());
    let (c1, c2) = (SSIM_K1.powi(2), SSIM_K2.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for s in 0..a.n() {
        for c in 0..a.c() {
            let pa: Vec<f64> = a.plane(s, c).iter().map(|v| v.f64()).collect();
            let pb: Vec<f64> = b.plane(s, c).iter().map(|v| v.f64()).collect();
            let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(&pb).map(|(&x, &y)| f(x, y)).collect() };
            let mu_a = blur_valid(&pa, h, w, &taps);
            let mu_b = blur_valid(&pb, h, w, &taps);
            let e_aa = blur_valid(&prod(&|x, _| x * x), h, w, &taps);
            let e_bb = blur_valid(&prod(&|_, y| y * y), h, w, &taps);
            let e_ab = blur_valid(&prod(&|x, y| x * y), h, w, &taps);
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let saa = e_aa[i] - ma * ma;
                let sbb = e_bb[i] - mb * mb;
                let sab = e_ab[i] - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * sab + c2)) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
            }
            count += mu_a.len();
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabErrorMode {
    /// Mean absolute Lab difference (the customary "RMSE" of the ISTD
    /// protocol).
    #[default]
    MaeLab,
    /// Root of the mean squared Lab difference over the region.
    RmseLab,
}

/// Lab-space error per mask-defined region. Empty regions are NaN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetricRow {
    pub shadow: f64,
    pub shadow_free: f64,
    pub total: f64,
    pub shadow_pixels: usize,
    pub free_pixels: usize,
}

/// Error between `pred` and `gt` in CIELAB over the shadow (`mask = 1`),
/// shadow-free (`mask = 0`) and whole-image regions.
pub fn lab_region_error<T: Float>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    mask: &Tensor<T>,
    mode: LabErrorMode,
) -> Result<RegionMetricRow> {
    pred.expect_same_shape(gt, "lab_region_error")?;
    if pred.c() != 3 {
        return Err(Error::Shape(format!("lab_region_error needs 3-channel images, got {}", pred.c())));
    }
    let [n, _, h, w] = pred.shape();
    if mask.shape() != [n, 1, h, w] {
        return Err(Error::Shape(format!("mask {:?} does not match images {:?}", mask.shape(), pred.shape())));
    }
    if let Some(v) = mask.data().iter().find(|v| **v != T::zero() && **v != T::one()) {
        return Err(Error::Validation(format!("mask must be binary, found value {v}")));
    }
    let hw = h * w;
    // [shadow, free]: sum of per-pixel error (mae) or squared error (rmse)
    let mut acc = [0.0f64; 2];
    let mut cnt = [0usize; 2];
    for s in 0..n {
        let (ps, gs, ms) = (pred.sample(s), gt.sample(s), mask.sample(s));
        for i in 0..hw {
            let lp = srgb_pixel_to_lab([ps[i].f64(), ps[hw + i].f64(), ps[2 * hw + i].f64()]);
            let lg = srgb_pixel_to_lab([gs[i].f64(), gs[hw + i].f64(), gs[2 * hw + i].f64()]);
            let e = match mode {
                LabErrorMode::MaeLab => (0..3).map(|c| (lp[c] - lg[c]).abs()).sum::<f64>() / 3.0,
                LabErrorMode::RmseLab => (0..3).map(|c| (lp[c] - lg[c]).powi(2)).sum::<f64>() / 3.0,
            };
            let r = if ms[i] == T::one() { 0 } else { 1 };
            acc[r] += e;
            cnt[r] += 1;
        }
    }
    let fin = |sum: f64, k: usize| -> f64 {
        if k == 0 {
            return f64::NAN;
        }
        match mode {
            LabErrorMode::MaeLab => sum / k as f64,
            LabErrorMode::RmseLab => (sum / k as f64).sqrt(),
        }
    };
    if cnt[0] == 0 {
        log::warn!("lab_region_error: shadow region is empty");
    }
    if cnt[1] == 0 {
        log::warn!("lab_region_error: shadow-free region is empty");
    }
    Ok(RegionMetricRow {
        shadow: fin(acc[0], cnt[0]),
        shadow_free: fin(acc[1], cnt[1]),
        total: fin(acc[0] + acc[1], cnt[0] + cnt[1]),
        shadow_pixels: cnt[0],
        free_pixels: cnt[1],
    })
}

/// External perceptual metric: a command run with the prediction and
/// reference paths appended, printing one decimal number.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerceptualScorer {
    pub cmd: Option<String>,
}

impl PerceptualScorer {
    pub fn new(cmd: Option<String>) -> Self {
        PerceptualScorer { cmd: cmd.filter(|c| !c.trim().is_empty()) }
    }

    pub fn is_configured(&self) -> bool {
        self.cmd.is_some()
    }

    /// `None` when unconfigured or when the scorer fails.
    pub fn score(&self, pred_path: &Path, gt_path: &Path) -> Option<f64> {
        let cmd = self.cmd.as_deref()?;
        let mut parts = cmd.split_whitespace();
        let program = parts.next()?;
        let out = match Command::new(program).args(parts).arg(pred_path).arg(gt_path).output() {
            Ok(o) => o,
            Err(e) => {
                log::warn!("perceptual scorer `{cmd}` could not start: {e}");
                return None;
            }
        };
        if !out.status.success() {
            log::warn!(
                "perceptual scorer `{cmd}` exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            );
            return None;
        }
        let text = String::from_utf8_lossy(&out.stdout);
        match text.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Some(v),
            _ => {
                log::warn!("perceptual scorer `{cmd}` printed `{}`, not a number", text.trim());
                None
            }
        }
    }
}
