//! Learned building blocks: the low-frequency block (LFB), the
//! high-frequency block with dynamic convolution (HFB), the ConvNeXt-style
//! global context branch (GCB) and the shared-affinity window attention
//! fusion (WA-SAM).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, WindowGeom};
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;

/// Hyperparameters shared by the blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dropout_rate: f64,
    pub negative_slope: f64,
    pub num_experts: usize,
    pub window_size: usize,
    pub heads: usize,
}

impl BlockConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        BlockConfig {
            in_channels,
            out_channels,
            dropout_rate: 0.1,
            negative_slope: 0.2,
            num_experts: 4,
            window_size: 8,
            heads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("block channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.num_experts == 0 || self.window_size == 0 || self.heads == 0 {
            return Err(Error::Config("experts, window size and heads must be at least 1".into()));
        }
        Ok(())
    }
}

fn expect_channels<T: Float>(g: &Tape<T>, x: Var, c: usize, what: &str) -> Result<()> {
    let got = g.shape(x)[1];
    if got != c {
        return Err(Error::Shape(format!("{what} expects {c} input channels, got {got}")));
    }
    Ok(())
}

/// Multiply-accumulates of a convolution producing an `ho x wo` map.
pub fn conv_macs(cin: usize, cout: usize, k: usize, groups: usize, ho: usize, wo: usize) -> u64 {
    (cout * (cin / groups) * k * k * ho * wo) as u64
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin / groups * k * k;
        let weight = store.add_param(format!("{name}.weight"), uniform_fan_in(rng, [cout, cin / groups, k, k], fan_in));
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), uniform_fan_in(rng, [1, cout, 1, 1], fan_in)));
        Conv2d { weight, bias, cin, cout, k, stride, groups }
    }

    pub fn forward<T: Float>(&self, g: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.k / 2, self.groups)
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.k / 2;
        ((h + 2 * p - self.k) / self.stride + 1, (w + 2 * p - self.k) / self.stride + 1)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_dims(h, w);
        conv_macs(self.cin, self.cout, self.k, self.groups, ho, wo)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: store.add_param(format!("{name}.weight"), Tensor::full([1, c, 1, 1], T::one())),
            beta: store.add_param(format!("{name}.bias"), Tensor::zeros([1, c, 1, 1])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([1, c, 1, 1])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full([1, c, 1, 1], T::one())),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        g.batch_norm(store, x, self.gamma, self.beta, self.running_mean, self.running_var, BN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm2d {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        LayerNorm2d {
            gamma: store.add_param(format!("{name}.weight"), Tensor::full([1, c, 1, 1], T::one())),
            beta: store.add_param(format!("{name}.bias"), Tensor::zeros([1, c, 1, 1])),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        g.layer_norm(x, gm, bt, LN_EPS)
    }
}

/// Low-frequency block: conv3x3, BN, LeakyReLU, dropout, conv3x3 (stride 2
/// when downsampling), BN, LeakyReLU.
#[derive(Clone, Debug)]
pub struct Lfb {
    pub cfg: BlockConfig,
    pub downsample: bool,
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

impl Lfb {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &BlockConfig,
        downsample: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let (ci, co) = (cfg.in_channels, cfg.out_channels);
        Ok(Lfb {
            cfg: cfg.clone(),
            downsample,
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), ci, co, 3, 1, 1, false),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), co),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), co, co, 3, if downsample { 2 } else { 1 }, 1, false),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), co),
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        expect_channels(g, x, self.cfg.in_channels, "LFB")?;
        let y = self.conv1.forward(g, store, x)?;
        let y = self.bn1.forward(g, store, y)?;
        let y = g.leaky_relu(y, self.cfg.negative_slope);
        let y = g.dropout(y, self.cfg.dropout_rate);
        let y = self.conv2.forward(g, store, y)?;
        let y = self.bn2.forward(g, store, y)?;
        Ok(g.leaky_relu(y, self.cfg.negative_slope))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (h2, w2) = self.conv2.out_dims(h, w);
        self.conv1.macs(h, w) + conv_macs(self.cfg.out_channels, self.cfg.out_channels, 3, 1, h2, w2)
    }
}

/// Dynamic depthwise 3x3 convolution: `num_experts` kernel banks mixed per
/// sample by softmax weights predicted from the globally pooled input.
#[derive(Clone, Debug)]
pub struct DynConv {
    pub channels: usize,
    pub num_experts: usize,
    pub router: Conv2d,
    pub experts: ParamId,
}

impl DynConv {
    pub fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c: usize, e: usize) -> Self {
        DynConv {
            channels: c,
            num_experts: e,
            router: Conv2d::new(store, rng, &format!("{name}.router"), c, e, 1, 1, 1, true),
            experts: store.add_param(format!("{name}.experts"), uniform_fan_in(rng, [e, c, 3, 3], 9)),
        }
    }

    /// Softmax mixture weights `[N, E, 1, 1]`.
    pub fn mixture_weights<T: Float>(&self, g: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let desc = g.global_avg_pool(x);
        let logits = self.router.forward(g, store, desc)?;
        Ok(g.softmax_channels(logits))
    }

    pub fn forward<T: Float>(&self, g: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pi = self.mixture_weights(g, store, x)?;
        let w = g.param(store, self.experts);
        let k = g.mix_experts(pi, w)?;
        g.dwconv_per_sample(x, k, 1)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.router.macs(1, 1) + conv_macs(self.channels, self.channels, 3, self.channels, h, w)
    }
}

/// High-frequency block: channel LayerNorm, 1x1 conv, dynamic conv, BN,
/// LeakyReLU, dropout. Spatial size is preserved.
#[derive(Clone, Debug)]
pub struct Hfb {
    pub cfg: BlockConfig,
    pub norm: LayerNorm2d,
    pub proj: Conv2d,
    pub dynconv: DynConv,
    pub bn: BatchNorm,
}

impl Hfb {
    pub fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let (ci, co) = (cfg.in_channels, cfg.out_channels);
        Ok(Hfb {
            cfg: cfg.clone(),
            norm: LayerNorm2d::new(store, &format!("{name}.norm"), ci),
            proj: Conv2d::new(store, rng, &format!("{name}.proj"), ci, co, 1, 1, 1, true),
            dynconv: DynConv::new(store, rng, &format!("{name}.dynconv"), co, cfg.num_experts),
            bn: BatchNorm::new(store, &format!("{name}.bn"), co),
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        expect_channels(g, x, self.cfg.in_channels, "HFB")?;
        let y = self.norm.forward(g, store, x)?;
        let y = self.proj.forward(g, store, y)?;
        let y = self.dynconv.forward(g, store, y)?;
        let y = self.bn.forward(g, store, y)?;
        let y = g.leaky_relu(y, self.cfg.negative_slope);
        Ok(g.dropout(y, self.cfg.dropout_rate))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.proj.macs(h, w) + self.dynconv.macs(h, w)
    }
}

/// One ConvNeXt-style residual unit.
#[derive(Clone, Debug)]
pub struct GcbUnit {
    pub dwconv: Conv2d,
    pub norm: LayerNorm2d,
    pub expand: Conv2d,
    pub project: Conv2d,
}

/// Global context branch: `depth` residual units of depthwise 7x7 conv,
/// LayerNorm, 1x1 expansion by 4, GELU and 1x1 projection.
#[derive(Clone, Debug)]
pub struct Gcb {
    pub channels: usize,
    pub units: Vec<GcbUnit>,
}

impl Gcb {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        depth: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("GCB depth must be at least 1".into()));
        }
        let c = channels;
        let units = (0..depth)
            .map(|i| {
                let n = format!("{name}.{i}");
                GcbUnit {
                    dwconv: Conv2d::new(store, rng, &format!("{n}.dwconv"), c, c, 7, 1, c, true),
                    norm: LayerNorm2d::new(store, &format!("{n}.norm"), c),
                    expand: Conv2d::new(store, rng, &format!("{n}.expand"), c, 4 * c, 1, 1, 1, true),
                    project: Conv2d::new(store, rng, &format!("{n}.project"), 4 * c, c, 1, 1, 1, true),
                }
            })
            .collect();
        Ok(Gcb { channels, units })
    }

    pub fn forward<T: Float>(&self, g: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        expect_channels(g, x, self.channels, "GCB")?;
        let mut x = x;
        for u in &self.units {
            let y = u.dwconv.forward(g, store, x)?;
            let y = u.norm.forward(g, store, y)?;
            let y = u.expand.forward(g, store, y)?;
            let y = g.gelu(y);
            let y = u.project.forward(g, store, y)?;
            x = g.add(x, y)?;
        }
        Ok(x)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.units
            .iter()
            .map(|u| u.dwconv.macs(h, w) + u.expand.macs(h, w) + u.project.macs(h, w))
            .sum()
    }
}

/// Row-stochastic affinity of every attention window, `[windows, heads, T, T]`
/// flattened with windows ordered by (sample, window row, window column).
#[derive(Clone, Debug)]
pub struct AffinityMatrix<T: Float = f32> {
    pub weights: Tensor<T>,
}

impl<T: Float> AffinityMatrix<T> {
    pub fn tokens(&self) -> usize {
        self.weights.w()
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let t = self.tokens();
        self.weights
            .data()
            .chunks(t)
            .map(|row| (row.iter().map(|v| v.f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Output of [`WaSam::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub h_e: Var,
    pub f_e: Var,
    pub d_hf: Var,
}

/// Shared-affinity window cross-attention between image-domain (`h`) and
/// wavelet-domain (`f`) high-frequency features.
///
/// One affinity `M = softmax_rows(Q(h) K(f)^T / sqrt(d))` is computed per
/// window and used in both directions: `h_e = h + O_h(M V_f(f))` and
/// `f_e = f + O_f(P V_h(h))` where `P` is `M^T` renormalized by rows. The
/// enhanced pair is fused by concat, 1x1 conv and ReLU into `d_hf`.
#[derive(Clone, Debug)]
pub struct WaSam {
    pub h_channels: usize,
    pub f_channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub window_size: usize,
    pub query: Conv2d,
    pub key: Conv2d,
    pub value_f: Conv2d,
    pub value_h: Conv2d,
    pub out_h: Conv2d,
    pub out_f: Conv2d,
    pub fuse: Conv2d,
}

impl WaSam {
    /// `cfg.in_channels` is the image-branch width and also the shared
    /// attention dimension; `f_channels` is the wavelet-branch width.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &BlockConfig,
        f_channels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let (hc, fc, d) = (cfg.in_channels, f_channels, cfg.in_channels);
        if d % cfg.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide dim {d}", cfg.heads)));
        }
        let mk = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, n: &str, i: usize, o: usize| {
            Conv2d::new(store, rng, &format!("{name}.{n}"), i, o, 1, 1, 1, true)
        };
        Ok(WaSam {
            h_channels: hc,
            f_channels: fc,
            dim: d,
            heads: cfg.heads,
            window_size: cfg.window_size,
            query: mk(store, rng, "query", hc, d),
            key: mk(store, rng, "key", fc, d),
            value_f: mk(store, rng, "value_f", fc, d),
            value_h: mk(store, rng, "value_h", hc, d),
            out_h: mk(store, rng, "out_h", d, hc),
            out_f: mk(store, rng, "out_f", d, fc),
            fuse: mk(store, rng, "fuse", hc + fc, cfg.out_channels),
        })
    }

    /// Window with side `window_size`, which must divide both spatial dims.
    pub fn geom(&self, h: usize, w: usize) -> Result<WindowGeom> {
        let geom = WindowGeom { win_h: self.window_size, win_w: self.window_size, heads: self.heads };
        geom.validate(self.dim, h, w)?;
        Ok(geom)
    }

    fn check_inputs<T: Float>(&self, g: &Tape<T>, h_hf: Var, f_hf: Var) -> Result<()> {
        let (hs, fs) = (g.shape(h_hf), g.shape(f_hf));
        if hs[0] != fs[0] || hs[2..] != fs[2..] {
            return Err(Error::Shape(format!("WA-SAM inputs {:?} and {:?} differ spatially", hs, fs)));
        }
        expect_channels(g, h_hf, self.h_channels, "WA-SAM image branch")?;
        expect_channels(g, f_hf, self.f_channels, "WA-SAM frequency branch")
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Tape<T>,
        store: &ParamStore<T>,
        h_hf: Var,
        f_hf: Var,
        geom: WindowGeom,
    ) -> Result<Fused> {
        self.check_inputs(g, h_hf, f_hf)?;
        let q = self.query.forward(g, store, h_hf)?;
        let k = self.key.forward(g, store, f_hf)?;
        let vf = self.value_f.forward(g, store, f_hf)?;
        let vh = self.value_h.forward(g, store, h_hf)?;
        let att = g.window_attention(q, k, vf, vh, geom)?;
        let to_h = g.slice_channels(att, 0, self.dim)?;
        let to_f = g.slice_channels(att, self.dim, self.dim)?;
        let dh = self.out_h.forward(g, store, to_h)?;
        let df = self.out_f.forward(g, store, to_f)?;
        let h_e = g.add(h_hf, dh)?;
        let f_e = g.add(f_hf, df)?;
        let cat = g.concat(&[h_e, f_e])?;
        let d = self.fuse.forward(g, store, cat)?;
        let d_hf = g.relu(d);
        Ok(Fused { h_e, f_e, d_hf })
    }

    /// The affinity matrices the forward pass would use.
    pub fn affinity<T: Float>(
        &self,
        g: &mut Tape<T>,
        store: &ParamStore<T>,
        h_hf: Var,
        f_hf: Var,
        geom: WindowGeom,
    ) -> Result<AffinityMatrix<T>> {
        self.check_inputs(g, h_hf, f_hf)?;
        let q = self.query.forward(g, store, h_hf)?;
        let k = self.key.forward(g, store, f_hf)?;
        let (qv, kv) = (g.value(q), g.value(k));
        geom.validate(self.dim, qv.h(), qv.w())?;
        let (_, saved) = kernels::window_attention_forward(qv, kv, qv, kv, &geom);
        let t = geom.tokens();
        let windows = saved.m.len() / (t * t * geom.heads);
        Ok(AffinityMatrix { weights: Tensor::from_vec([windows, geom.heads, t, t], saved.m)? })
    }

    pub fn macs(&self, h: usize, w: usize, geom: &WindowGeom) -> u64 {
        let convs = [&self.query, &self.key, &self.value_f, &self.value_h, &self.out_h, &self.out_f, &self.fuse];
        convs.iter().map(|c| c.macs(h, w)).sum::<u64>() + 3 * (geom.tokens() * self.dim * h * w) as u64
    }
}

/// Plain depthwise convolution with one shared kernel bank, same padding.
pub fn plain_depthwise<T: Float>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let geom = ConvGeom::new(x.shape(), w.shape(), 1, w.h() / 2, x.c())?;
    Ok(kernels::conv2d_forward(x, w, None, &geom))
}
