//! The full encoder-decoder: stem, pooled low/high split, per-stage band
//! routing, global context branch, decoder fusion and residual head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BufferUpdate, Tape, Var};
use crate::blocks::{BlockConfig, Conv2d, Gcb, Hfb, Lfb, WaSam};
use crate::error::{Error, Result};
use crate::freqkernels::HighPassMode;
use crate::kernels::WindowGeom;
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stages: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    /// Feed Haar bands into the low path and the decoder attention.
    pub use_dwt_feats: bool,
    /// Split the stem output into pooled low/high branches.
    pub use_rgb_split: bool,
    pub high_pass_mode: HighPassMode,
    pub gcb_depth: usize,
    pub window_size: usize,
    pub heads: usize,
    pub num_experts: usize,
    pub dropout_rate: f64,
    pub negative_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 4,
            base_channels: 32,
            channel_cap: 256,
            use_dwt_feats: true,
            use_rgb_split: true,
            high_pass_mode: HighPassMode::Maxpool,
            gcb_depth: 2,
            window_size: 8,
            heads: 1,
            num_experts: 4,
            dropout_rate: 0.1,
            negative_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.stages > 8 {
            return Err(Error::Config(format!("stages must be in 1..=8, got {}", self.stages)));
        }
        if self.base_channels == 0 || self.channel_cap < self.base_channels {
            return Err(Error::Config("base_channels must be positive and not exceed channel_cap".into()));
        }
        if self.gcb_depth == 0 || self.window_size == 0 || self.heads == 0 || self.num_experts == 0 {
            return Err(Error::Config("gcb_depth, window_size, heads and num_experts must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        for s in 0..self.stages {
            if self.width(s) % self.heads != 0 {
                return Err(Error::Config(format!("{} heads do not divide stage width {}", self.heads, self.width(s))));
            }
        }
        Ok(())
    }

    /// Output width of encoder stage `s`.
    pub fn width(&self, s: usize) -> usize {
        (self.base_channels << s).min(self.channel_cap)
    }

    /// Width of the low-path input entering stage `s`.
    fn low_in(&self, s: usize) -> usize {
        if s == 0 {
            self.base_channels
        } else {
            self.width(s - 1)
        }
    }

    /// Channel count of the stage's encoded low-frequency output.
    pub fn l_lf_channels(&self, s: usize) -> usize {
        let dwt = if self.use_dwt_feats { self.low_in(s) } else { 0 };
        2 * self.width(s) + dwt
    }

    /// Multiple the input is padded to.
    pub fn size_multiple(&self) -> usize {
        1 << self.stages
    }

    fn block(&self, cin: usize, cout: usize) -> BlockConfig {
        BlockConfig {
            in_channels: cin,
            out_channels: cout,
            dropout_rate: self.dropout_rate,
            negative_slope: self.negative_slope,
            num_experts: self.num_experts,
            window_size: self.window_size,
            heads: self.heads,
        }
    }
}

/// Largest divisor of `dim` not exceeding `window`.
pub fn fit_window(dim: usize, window: usize) -> usize {
    (1..=window.min(dim).max(1)).rev().find(|d| dim % d == 0).unwrap_or(1)
}

/// Per-stage bundle routed from encoder to decoder.
#[derive(Clone, Copy, Debug)]
pub struct StageEncoding {
    /// `[R_lf; F_lf; H_lf]`, or `[R_lf; H_lf]` without DWT features.
    pub l_lf: Var,
    pub h_hf: Var,
    /// Haar detail bands; absent without DWT features.
    pub f_hf: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub lfb: Lfb,
    pub hfb: Hfb,
    /// 1x1 compression of `L_lf` into the next stage's low input.
    pub transition: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub enum HighDecoder {
    Attention(WaSam),
    Plain(Hfb),
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub lfb: Lfb,
    pub high: HighDecoder,
    /// Nearest x2 followed by this 3x3 conv feeds the next shallower stage.
    pub up: Conv2d,
}

pub struct IfBlend<T: Float = f32> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    pub stem: Conv2d,
    pub encoder: Vec<EncoderStage>,
    pub gcb: Gcb,
    /// Indexed by stage, decoded deepest first.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv2d,
}

impl<T: Float> IfBlend<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let s_count = cfg.stages;
        let base = cfg.base_channels;
        let stem = Conv2d::new(&mut store, rng, "stem", 3, base, 3, 1, 1, true);
        let mut encoder = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let (cl, ch, w) = (cfg.low_in(s), cfg.low_in(s), cfg.width(s));
            let p = format!("enc.{s}");
            let lfb = Lfb::new(&mut store, rng, &format!("{p}.lfb"), &cfg.block(cl, w), true)?;
            let hfb = Hfb::new(&mut store, rng, &format!("{p}.hfb"), &cfg.block(ch, w))?;
            let transition = (s + 1 < s_count)
                .then(|| Conv2d::new(&mut store, rng, &format!("{p}.transition"), cfg.l_lf_channels(s), w, 1, 1, 1, true));
            encoder.push(EncoderStage { lfb, hfb, transition });
        }
        let gcb = Gcb::new(&mut store, rng, "gcb", cfg.l_lf_channels(s_count - 1), cfg.gcb_depth)?;
        let mut decoder = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let w = cfg.width(s);
            let p = format!("dec.{s}");
            let below = if s + 1 < s_count { w } else { 0 };
            let lfb = Lfb::new(&mut store, rng, &format!("{p}.lfb"), &cfg.block(cfg.l_lf_channels(s) + below, w), false)?;
            let high = if cfg.use_dwt_feats {
                HighDecoder::Attention(WaSam::new(
                    &mut store,
                    rng,
                    &format!("{p}.wasam"),
                    &cfg.block(w, w),
                    3 * cfg.low_in(s),
                )?)
            } else {
                HighDecoder::Plain(Hfb::new(&mut store, rng, &format!("{p}.hfb"), &cfg.block(w, w))?)
            };
            let up_out = if s == 0 { base } else { cfg.width(s - 1) };
            let up = Conv2d::new(&mut store, rng, &format!("{p}.up"), w, up_out, 3, 1, 1, true);
            decoder.push(DecoderStage { lfb, high, up });
        }
        let head = Conv2d::new(&mut store, rng, "head", base, 3, 3, 1, 1, true);
        Ok(IfBlend { cfg: cfg.clone(), store, stem, encoder, gcb, decoder, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Folds queued batch-norm statistics into the running buffers.
    pub fn apply_buffer_updates(&mut self, updates: &[BufferUpdate]) {
        let m = BN_MOMENTUM;
        for u in updates {
            let rm = self.store.get_mut(u.mean_id);
            for (r, b) in rm.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = T::of((1.0 - m) * r.f64() + m * b);
            }
            let rv = self.store.get_mut(u.var_id);
            for (r, b) in rv.data_mut().iter_mut().zip(&u.batch_var) {
                *r = T::of((1.0 - m) * r.f64() + m * b);
            }
        }
    }

    /// Window geometry used by the decoder attention on an `h x w` map.
    pub fn window_geom(&self, h: usize, w: usize) -> WindowGeom {
        WindowGeom {
            win_h: fit_window(h, self.cfg.window_size),
            win_w: fit_window(w, self.cfg.window_size),
            heads: self.cfg.heads,
        }
    }

    /// One encoder stage. Both inputs must share their (even) spatial dims;
    /// every output is at half resolution.
    pub fn encode_stage(&self, g: &mut Tape<T>, stage: usize, x_low: Var, x_high: Var) -> Result<StageEncoding> {
        let st = self
            .encoder
            .get(stage)
            .ok_or_else(|| Error::Wiring(format!("no encoder stage {stage}")))?;
        let (ls, hs) = (g.shape(x_low), g.shape(x_high));
        if ls[0] != hs[0] || ls[2..] != hs[2..] {
            return Err(Error::Shape(format!(
                "stage {stage}: low input {:?} and high input {:?} differ spatially",
                ls, hs
            )));
        }
        if ls[2] % 2 != 0 || ls[3] % 2 != 0 {
            return Err(Error::Dimension(format!("stage {stage}: odd working resolution {}x{}", ls[2], ls[3])));
        }
        let store = &self.store;
        let r_lf = st.lfb.forward(g, store, x_low)?;
        let hy = st.hfb.forward(g, store, x_high)?;
        let h_lf = g.avg_pool(hy, 2, 2)?;
        let mut h_hf = g.max_pool(hy, 2, 2)?;
        if self.cfg.high_pass_mode == HighPassMode::Residual {
            h_hf = g.sub(h_hf, h_lf)?;
        }
        if self.cfg.use_dwt_feats {
            let c = ls[1];
            let packed = g.haar_packed(x_low)?;
            let f_lf = g.slice_channels(packed, 0, c)?;
            let f_hf = g.slice_channels(packed, c, 3 * c)?;
            let l_lf = g.concat(&[r_lf, f_lf, h_lf])?;
            Ok(StageEncoding { l_lf, h_hf, f_hf: Some(f_hf) })
        } else {
            let l_lf = g.concat(&[r_lf, h_lf])?;
            Ok(StageEncoding { l_lf, h_hf, f_hf: None })
        }
    }

    /// One decoder stage. `below` is the upsampled output of the deeper stage
    /// and must be absent exactly at the deepest stage.
    pub fn decode_stage(&self, g: &mut Tape<T>, stage: usize, enc: &StageEncoding, below: Option<Var>) -> Result<Var> {
        let st = self
            .decoder
            .get(stage)
            .ok_or_else(|| Error::Wiring(format!("no decoder stage {stage}")))?;
        let deepest = stage + 1 == self.cfg.stages;
        let store = &self.store;
        let low_in = match (below, deepest) {
            (None, true) => enc.l_lf,
            (Some(b), false) => g.concat(&[enc.l_lf, b])?,
            (None, false) => {
                return Err(Error::Wiring(format!("decoder stage {stage} needs the deeper stage's output")))
            }
            (Some(_), true) => {
                return Err(Error::Wiring(format!("deepest decoder stage {stage} takes no deeper input")))
            }
        };
        let d_lf = st.lfb.forward(g, store, low_in)?;
        let d_hf = match (&st.high, enc.f_hf) {
            (HighDecoder::Attention(wa), Some(f_hf)) => {
                let [_, _, h, w] = g.shape(enc.h_hf);
                wa.forward(g, store, enc.h_hf, f_hf, self.window_geom(h, w))?.d_hf
            }
            (HighDecoder::Plain(hfb), _) => hfb.forward(g, store, enc.h_hf)?,
            (HighDecoder::Attention(_), None) => {
                return Err(Error::Wiring(format!("decoder stage {stage} expects Haar detail bands")))
            }
        };
        g.add(d_hf, d_lf)
    }

    /// Nearest x2 upsampling plus the stage's 3x3 conv.
    pub fn upsample(&self, g: &mut Tape<T>, stage: usize, d: Var) -> Result<Var> {
        let u = g.upsample_nearest2(d);
        self.decoder[stage].up.forward(g, &self.store, u)
    }

    /// Full forward pass on an sRGB batch in `[0, 1]` of any spatial size;
    /// the input is reflection-padded to a multiple of `2^stages` and the
    /// output cropped back.
    pub fn forward(&self, g: &mut Tape<T>, x: Var) -> Result<Var> {
        let [_, c, h, w] = g.shape(x);
        if c != 3 {
            return Err(Error::Shape(format!("model input needs 3 channels, got {c}")));
        }
        let m = self.cfg.size_multiple();
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let xp = g.reflect_pad(x, 0, ph, 0, pw);
        let store = &self.store;
        let stem = self.stem.forward(g, store, xp)?;
        let (mut low, mut high) = if self.cfg.use_rgb_split {
            let lo = g.avg_pool(stem, 3, 1)?;
            let hi = g.max_pool(stem, 3, 1)?;
            let hi = if self.cfg.high_pass_mode == HighPassMode::Residual { g.sub(hi, lo)? } else { hi };
            (lo, hi)
        } else {
            (stem, stem)
        };
        let mut encs = Vec::with_capacity(self.cfg.stages);
        for s in 0..self.cfg.stages {
            let e = self.encode_stage(g, s, low, high)?;
            if let Some(t) = &self.encoder[s].transition {
                low = t.forward(g, store, e.l_lf)?;
                high = e.h_hf;
            }
            encs.push(e);
        }
        let last = encs.len() - 1;
        encs[last].l_lf = self.gcb.forward(g, store, encs[last].l_lf)?;
        let mut below = None;
        for s in (0..self.cfg.stages).rev() {
            let d = self.decode_stage(g, s, &encs[s], below)?;
            below = Some(self.upsample(g, s, d)?);
        }
        let up = below.expect("at least one stage");
        let head_in = g.add(up, stem)?;
        let res = self.head.forward(g, store, head_in)?;
        let res = g.crop(res, 0, 0, h, w)?;
        let out = g.add(x, res)?;
        Ok(g.clamp(out, 0.0, 1.0))
    }

    /// Evaluation-mode forward without gradient tracking.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Tape::inference();
        let xv = g.input(x.clone(), false);
        let y = self.forward(&mut g, xv)?;
        let out = g.value(y).clone();
        out.debug_check_finite("model output");
        Ok(out)
    }

    /// Analytic multiply-accumulate count of one forward pass on an `h x w`
    /// image (after padding): convolutions and window attention products.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let m = self.cfg.size_multiple();
        let (mut h, mut w) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut total = self.stem.macs(h, w);
        let mut dims = Vec::new();
        for st in &self.encoder {
            total += st.lfb.macs(h, w) + st.hfb.macs(h, w);
            h /= 2;
            w /= 2;
            if let Some(t) = &st.transition {
                total += t.macs(h, w);
            }
            dims.push((h, w));
        }
        let (dh, dw) = dims[dims.len() - 1];
        total += self.gcb.macs(dh, dw);
        for (s, st) in self.decoder.iter().enumerate().rev() {
            let (h, w) = dims[s];
            total += st.lfb.macs(h, w);
            total += match &st.high {
                HighDecoder::Attention(wa) => wa.macs(h, w, &self.window_geom(h, w)),
                HighDecoder::Plain(hfb) => hfb.macs(h, w),
            };
            total += st.up.macs(2 * h, 2 * w);
        }
        let (h0, w0) = (dims[0].0 * 2, dims[0].1 * 2);
        total + self.head.macs(h0, w0)
    }
}

/// Multiply-accumulates of one forward pass of the configured model on an
/// `h x w` input.
pub fn count_macs(cfg: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    Ok(IfBlend::<f32>::new(cfg, 0)?.macs(h, w))
}
