//! Tape-based reverse-mode differentiation over NCHW tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse. Parameters enter through [`Tape::param`] and their
//! gradients are read back by [`ParamId`]. With gradients disabled the tape
//! keeps values only, which is the inference path.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::freqkernels::{self, PoolGeom};
use crate::kernels::{self, AttnSaved, ConvGeom, NormSaved, WindowGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Float> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    MeanAll(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MixExperts { pi: Var, w: Var },
    DwPerSample { x: Var, k: Var, geom: ConvGeom },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, saved: NormSaved<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, saved: NormSaved<T> },
    LeakyRelu(Var, T),
    Gelu(Var),
    Dropout { x: Var, mask: Vec<T> },
    Clamp { x: Var, lo: T, hi: T },
    AvgPool { x: Var, geom: PoolGeom },
    MaxPool { x: Var, geom: PoolGeom, arg: Vec<u32> },
    Haar(Var),
    HaarInv(Var),
    Upsample2(Var),
    ReflectPad { x: Var, top: usize, left: usize },
    Crop { x: Var, top: usize, left: usize },
    GlobalAvg(Var),
    SoftmaxC(Var),
    Attention { q: Var, k: Var, vf: Var, vh: Var, geom: WindowGeom, saved: AttnSaved<T> },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics emitted by training-mode batch norm, to be folded into
/// the running buffers after the step.
#[derive(Clone, Debug)]
pub struct BufferUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
}

pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    training: bool,
    grad_enabled: bool,
    rng: ChaCha8Rng,
    param_vars: Vec<Option<Var>>,
    buffer_updates: Vec<BufferUpdate>,
    macs: u64,
}

/// Gradients of one backward pass, indexed by node.
pub struct Grads<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Float> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars.get(id.0).copied().flatten().and_then(|v| self.wrt(v))
    }

    /// Gradients for every parameter that took part in the forward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.param_vars.iter().enumerate().filter_map(move |(i, v)| {
            v.and_then(|v| self.grads[v.0].as_ref()).map(|g| (ParamId(i), g))
        })
    }
}

fn add_into<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<T: Float> Tape<T> {
    /// A tape that records gradients. `training` selects batch statistics
    /// and active dropout.
    pub fn new(training: bool, seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            training,
            grad_enabled: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            param_vars: Vec::new(),
            buffer_updates: Vec::new(),
            macs: 0,
        }
    }

    /// Evaluation mode without gradient bookkeeping.
    pub fn inference() -> Self {
        let mut t = Self::new(false, 0);
        t.grad_enabled = false;
        t
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Multiply-accumulates executed by convolutions and attention so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf input; `requires_grad` makes its gradient available.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// The node for a stored parameter, created on first use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Param, requires_grad });
        let v = Var(self.nodes.len() - 1);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b), what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a), &[a])
    }

    /// Mean of all elements as a `[1, 1, 1, 1]` scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum_f64() / t.len() as f64;
        self.push(Tensor::scalar(T::of(m)), Op::MeanAll(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = freqkernels::concat_channels(&vals)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.value(x).c();
        if start + len > c {
            return Err(Error::Shape(format!("channel slice {start}..{} of {c}", start + len)));
        }
        let v = freqkernels::split_channels(self.value(x), start, len);
        Ok(self.push(v, Op::Slice { x, start }, &[x]))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad, groups)?;
        if let Some(b) = b {
            if self.value(b).len() != geom.cout {
                return Err(Error::Shape(format!(
                    "bias has {} entries for {} output channels",
                    self.value(b).len(),
                    geom.cout
                )));
            }
        }
        let v = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        self.macs += geom.macs_per_sample() * self.shape(x)[0] as u64;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(v, Op::Conv { x, w, b, geom }, &ins))
    }

    /// Per-sample kernel mixture: `pi` `[N, E, 1, 1]`, expert kernels
    /// `w` `[E, C, k, k]`, result `[N, C, k, k]`.
    pub fn mix_experts(&mut self, pi: Var, w: Var) -> Result<Var> {
        let [n, e, ph, pw] = self.shape(pi);
        let [we, c, kh, kw] = self.shape(w);
        if ph != 1 || pw != 1 || e != we {
            return Err(Error::Shape(format!(
                "mixture weights {:?} do not match experts {:?}",
                self.shape(pi),
                self.shape(w)
            )));
        }
        let per = c * kh * kw;
        let mut out = Tensor::zeros([n, c, kh, kw]);
        let (pv, wv) = (self.value(pi).data().to_vec(), self.value(w).data());
        for s in 0..n {
            let dst = out.sample_mut(s);
            for ex in 0..e {
                let p = pv[s * e + ex];
                for (d, &k) in dst.iter_mut().zip(&wv[ex * per..(ex + 1) * per]) {
                    *d += p * k;
                }
            }
        }
        Ok(self.push(out, Op::MixExperts { pi, w }, &[pi, w]))
    }

    /// Depthwise convolution with a separate kernel per sample.
    pub fn dwconv_per_sample(&mut self, x: Var, k: Var, pad: usize) -> Result<Var> {
        let [n, c, _, _] = self.shape(x);
        let ks = self.shape(k);
        if ks[0] != n || ks[1] != c {
            return Err(Error::Shape(format!("per-sample kernels {:?} for input {:?}", ks, self.shape(x))));
        }
        let geom = ConvGeom::new(self.shape(x), [c, 1, ks[2], ks[3]], 1, pad, c.max(1))?;
        let v = kernels::dw_per_sample_forward(self.value(x), self.value(k), &geom);
        self.macs += geom.macs_per_sample() * n as u64;
        Ok(self.push(v, Op::DwPerSample { x, k, geom }, &[x, k]))
    }

    /// Batch normalization. In training mode batch statistics are used and a
    /// running-statistics update is queued; otherwise the running buffers are
    /// applied.
    pub fn batch_norm(
        &mut self,
        store: &ParamStore<T>,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
    ) -> Result<Var> {
        let c = self.shape(x)[1];
        if store.get(gamma).len() != c {
            return Err(Error::Shape(format!(
                "batch norm over {} channels applied to {c}",
                store.get(gamma).len()
            )));
        }
        let gv = self.param(store, gamma);
        let bv = self.param(store, beta);
        let [n, _, h, w] = self.shape(x);
        let m = n * h * w;
        if self.training && m > 1 {
            let (y, saved, mean, var) = kernels::batch_norm_train(
                self.value(x),
                self.value(gv).data(),
                self.value(bv).data(),
                eps,
            );
            let unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
            self.buffer_updates.push(BufferUpdate {
                mean_id: running_mean,
                var_id: running_var,
                batch_mean: mean,
                batch_var: unbiased,
            });
            Ok(self.push(y, Op::BatchNormTrain { x, gamma: gv, beta: bv, saved }, &[x, gv, bv]))
        } else {
            let mean: Vec<T> = store.get(running_mean).data().to_vec();
            let inv: Vec<T> = store
                .get(running_var)
                .data()
                .iter()
                .map(|v| T::of(1.0 / (v.f64() + eps).sqrt()))
                .collect();
            let (gd, bd) = (self.value(gv).data().to_vec(), self.value(bv).data().to_vec());
            let mut y = self.value(x).clone();
            for s in 0..n {
                for ch in 0..c {
                    let (mu, iv, g, b) = (mean[ch], inv[ch], gd[ch], bd[ch]);
                    y.plane_mut(s, ch).iter_mut().for_each(|v| *v = g * (*v - mu) * iv + b);
                }
            }
            Ok(self.push(y, Op::BatchNormEval { x, gamma: gv, beta: bv, mean, inv }, &[x, gv, bv]))
        }
    }

    /// Layer normalization across channels at each pixel.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.shape(x)[1];
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!("layer norm parameters do not cover {c} channels")));
        }
        let (y, saved) = kernels::layer_norm_channels(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, saved }, &[x, gamma, beta]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let v = self.value(x).map(|a| if a > T::zero() { a } else { a * s });
        self.push(v, Op::LeakyRelu(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push(v, Op::LeakyRelu(x, T::zero()), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| {
            let a64 = a.f64();
            T::of(0.5 * a64 * (1.0 + (GELU_C * (a64 + 0.044715 * a64.powi(3))).tanh()))
        });
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let cut = (p * 4294967296.0) as u64;
        let mask: Vec<T> =
            (0..n).map(|_| if u64::from(self.rng.gen::<u32>()) < cut { T::zero() } else { keep }).collect();
        let mut v = self.value(x).clone();
        for (a, m) in v.data_mut().iter_mut().zip(&mask) {
            *a *= *m;
        }
        self.push(v, Op::Dropout { x, mask }, &[x])
    }

    /// Clamp; the gradient passes wherever `lo <= x <= hi`. NaN stays NaN.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let v = self.value(x).map(|a| if a.is_nan() { a } else { a.max(lo).min(hi) });
        self.push(v, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [_, _, h, w] = self.shape(x);
        let geom = PoolGeom::new(h, w, k, stride)?;
        let v = freqkernels::avg_pool_forward(self.value(x), &geom);
        Ok(self.push(v, Op::AvgPool { x, geom }, &[x]))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [_, _, h, w] = self.shape(x);
        let geom = PoolGeom::new(h, w, k, stride)?;
        let (v, arg) = freqkernels::max_pool_forward(self.value(x), &geom);
        Ok(self.push(v, Op::MaxPool { x, geom, arg }, &[x]))
    }

    /// Packed Haar DWT, `[N, C, H, W] -> [N, 4C, H/2, W/2]` as `[LL|LH|HL|HH]`.
    pub fn haar_packed(&mut self, x: Var) -> Result<Var> {
        freqkernels::check_even(self.shape(x))?;
        let v = freqkernels::haar_forward_packed(self.value(x));
        Ok(self.push(v, Op::Haar(x), &[x]))
    }

    /// Inverse of [`Tape::haar_packed`].
    pub fn haar_inverse_packed(&mut self, b: Var) -> Result<Var> {
        if self.shape(b)[1] % 4 != 0 {
            return Err(Error::Shape(format!("packed bands need 4k channels, got {:?}", self.shape(b))));
        }
        let v = freqkernels::haar_inverse_packed(self.value(b));
        Ok(self.push(v, Op::HaarInv(b), &[b]))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let v = Tensor::from_fn([n, c, 2 * h, 2 * w], |[s, ch, y, xx]| t.at([s, ch, y / 2, xx / 2]));
        self.push(v, Op::Upsample2(x), &[x])
    }

    /// Mirror padding (edge sample not repeated); pads may exceed the input
    /// size, in which case the reflection repeats.
    pub fn reflect_pad(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Var {
        if top + bottom + left + right == 0 {
            return x;
        }
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let v = Tensor::from_fn([n, c, h + top + bottom, w + left + right], |[s, ch, y, xx]| {
            t.at([
                s,
                ch,
                reflect_index(y as isize - top as isize, h),
                reflect_index(xx as isize - left as isize, w),
            ])
        });
        self.push(v, Op::ReflectPad { x, top, left }, &[x])
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let [_, _, hh, ww] = self.shape(x);
        if top == 0 && left == 0 && h == hh && w == ww {
            return Ok(x);
        }
        let v = self.value(x).crop(top, left, h, w)?;
        Ok(self.push(v, Op::Crop { x, top, left }, &[x]))
    }

    /// Spatial mean, `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let hw = (h * w) as f64;
        let v = Tensor::from_fn([n, c, 1, 1], |[s, ch, _, _]| {
            T::of(t.plane(s, ch).iter().map(|v| v.f64()).sum::<f64>() / hw)
        });
        self.push(v, Op::GlobalAvg(x), &[x])
    }

    /// Softmax across channels at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let hw = h * w;
        let mut v = Tensor::zeros(t.shape());
        for s in 0..n {
            let src = t.sample(s);
            let dst = v.sample_mut(s);
            for i in 0..hw {
                let mx = (0..c).map(|ch| src[ch * hw + i]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (src[ch * hw + i] - mx).exp();
                    dst[ch * hw + i] = e;
                    z += e;
                }
                for ch in 0..c {
                    dst[ch * hw + i] = dst[ch * hw + i] / z;
                }
            }
        }
        self.push(v, Op::SoftmaxC(x), &[x])
    }

    /// Shared-affinity window cross-attention; see
    /// [`crate::blocks::wasam_fuse`]. Returns `[N, 2D, H, W]`.
    pub fn window_attention(&mut self, q: Var, k: Var, vf: Var, vh: Var, geom: WindowGeom) -> Result<Var> {
        let s = self.shape(q);
        for (v, name) in [(k, "key"), (vf, "frequency value"), (vh, "image value")] {
            if self.shape(v) != s {
                return Err(Error::Shape(format!("{name} {:?} does not match query {:?}", self.shape(v), s)));
            }
        }
        geom.validate(s[1], s[2], s[3])?;
        let (v, saved) = kernels::window_attention_forward(
            self.value(q),
            self.value(k),
            self.value(vf),
            self.value(vh),
            &geom,
        );
        let t = geom.tokens() as u64;
        self.macs += 3 * t * (s[0] * s[1] * s[2] * s[3]) as u64;
        Ok(self.push(v, Op::Attention { q, k, vf, vh, geom, saved }, &[q, k, vf, vh]))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads, param_vars: self.param_vars.clone() })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if self.needs(v) {
            add_into(&mut grads[v.0], g);
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.zip_map(val(*b), |x, y| x * y).unwrap());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.zip_map(val(*a), |x, y| x * y).unwrap());
                }
            }
            Op::Div(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.zip_map(val(*b), |x, y| x / y).unwrap());
                }
                if self.needs(*b) {
                    let gb = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(node.value.data())
                            .zip(val(*b).data())
                            .map(|((&gg, &q), &d)| -gg * q / d)
                            .collect(),
                    )
                    .unwrap();
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * *s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Abs(a) => {
                let ga = g
                    .zip_map(val(*a), |x, y| {
                        if y > T::zero() {
                            x
                        } else if y < T::zero() {
                            -x
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap();
                self.acc(grads, *a, ga);
            }
            Op::MeanAll(a) => {
                let s = val(*a).shape();
                let n = val(*a).len() as f64;
                self.acc(grads, *a, Tensor::full(s, T::of(g.data()[0].f64() / n)));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = val(*p).c();
                    if self.needs(*p) {
                        self.acc(grads, *p, freqkernels::split_channels(g, off, c));
                    }
                    off += c;
                }
            }
            Op::Slice { x, start } => {
                let xs = val(*x).shape();
                let mut gx = Tensor::zeros(xs);
                let hw = xs[2] * xs[3];
                for s in 0..xs[0] {
                    let src = g.sample(s);
                    gx.sample_mut(s)[start * hw..start * hw + src.len()].copy_from_slice(src);
                }
                self.acc(grads, *x, gx);
            }
            Op::Conv { x, w, b, geom } => {
                let need_w = self.needs(*w) || b.is_some_and(|b| self.needs(b));
                if need_w || self.needs(*x) {
                    let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), g, geom, self.needs(*x), need_w);
                    if let Some(dx) = dx {
                        self.acc(grads, *x, dx);
                    }
                    self.acc(grads, *w, dw);
                    if let Some(b) = b {
                        let bs = val(*b).shape();
                        self.acc(grads, *b, db.reshape(bs).unwrap());
                    }
                }
            }
            Op::MixExperts { pi, w } => {
                let [n, e, _, _] = val(*pi).shape();
                let per = val(*w).len() / e;
                let (pv, wv) = (val(*pi).data(), val(*w).data());
                let mut dpi = Tensor::zeros(val(*pi).shape());
                let mut dw = Tensor::zeros(val(*w).shape());
                for s in 0..n {
                    let gs = g.sample(s);
                    for ex in 0..e {
                        let wk = &wv[ex * per..(ex + 1) * per];
                        dpi.data_mut()[s * e + ex] = gs.iter().zip(wk).map(|(&a, &b)| a * b).sum();
                        let p = pv[s * e + ex];
                        for (d, &a) in dw.data_mut()[ex * per..(ex + 1) * per].iter_mut().zip(gs) {
                            *d += p * a;
                        }
                    }
                }
                self.acc(grads, *pi, dpi);
                self.acc(grads, *w, dw);
            }
            Op::DwPerSample { x, k, geom } => {
                let (dx, dk) = kernels::dw_per_sample_backward(val(*x), val(*k), g, geom, self.needs(*x));
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *k, dk);
            }
            Op::BatchNormTrain { x, gamma, beta, saved } => {
                let (dx, dg, db) = kernels::batch_norm_train_backward(g, saved, val(*gamma).data());
                self.acc(grads, *x, dx);
                let c = dg.len();
                self.acc(grads, *gamma, Tensor::from_vec(val(*gamma).shape(), dg).unwrap());
                self.acc(grads, *beta, Tensor::from_vec(val(*beta).shape(), db).unwrap());
                debug_assert_eq!(c, val(*x).c());
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv } => {
                let xs = val(*x);
                let [n, c, _, _] = xs.shape();
                let gd = val(*gamma).data();
                let mut dx = Tensor::zeros(xs.shape());
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let k = gd[ch] * inv[ch];
                        for ((d, &gg), &xv) in dx.plane_mut(s, ch).iter_mut().zip(g.plane(s, ch)).zip(xs.plane(s, ch)) {
                            *d = gg * k;
                            dg[ch] += gg * (xv - mean[ch]) * inv[ch];
                            db[ch] += gg;
                        }
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, Tensor::from_vec(val(*gamma).shape(), dg).unwrap());
                self.acc(grads, *beta, Tensor::from_vec(val(*beta).shape(), db).unwrap());
            }
            Op::LayerNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = kernels::layer_norm_channels_backward(g, saved, val(*gamma).data());
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, Tensor::from_vec(val(*gamma).shape(), dg).unwrap());
                self.acc(grads, *beta, Tensor::from_vec(val(*beta).shape(), db).unwrap());
            }
            Op::LeakyRelu(x, s) => {
                let gx = g.zip_map(val(*x), |gg, xv| if xv > T::zero() { gg } else { gg * *s }).unwrap();
                self.acc(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = g
                    .zip_map(val(*x), |gg, xv| {
                        let a = xv.f64();
                        let u = GELU_C * (a + 0.044715 * a.powi(3));
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * a * a);
                        gg * T::of(0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * du)
                    })
                    .unwrap();
                self.acc(grads, *x, gx);
            }
            Op::Dropout { x, mask } => {
                let mut gx = g.clone();
                for (a, m) in gx.data_mut().iter_mut().zip(mask) {
                    *a *= *m;
                }
                self.acc(grads, *x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let gx = g
                    .zip_map(val(*x), |gg, xv| if xv >= *lo && xv <= *hi { gg } else { T::zero() })
                    .unwrap();
                self.acc(grads, *x, gx);
            }
            Op::AvgPool { x, geom } => self.acc(grads, *x, freqkernels::avg_pool_backward(g, geom)),
            Op::MaxPool { x, geom, arg } => {
                self.acc(grads, *x, freqkernels::max_pool_backward(g, arg, geom))
            }
            // Orthonormal: the adjoint of each direction is the other one.
            Op::Haar(x) => self.acc(grads, *x, freqkernels::haar_inverse_packed(g)),
            Op::HaarInv(b) => self.acc(grads, *b, freqkernels::haar_forward_packed(g)),
            Op::Upsample2(x) => {
                let xs = val(*x).shape();
                let mut gx = Tensor::zeros(xs);
                let w2 = 2 * xs[3];
                for s in 0..xs[0] {
                    for c in 0..xs[1] {
                        let gp = g.plane(s, c);
                        let d = gx.plane_mut(s, c);
                        for y in 0..2 * xs[2] {
                            for xx in 0..w2 {
                                d[(y / 2) * xs[3] + xx / 2] += gp[y * w2 + xx];
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ReflectPad { x, top, left } => {
                let xs = val(*x).shape();
                let gs = g.shape();
                let mut gx = Tensor::zeros(xs);
                for s in 0..xs[0] {
                    for c in 0..xs[1] {
                        let gp = g.plane(s, c);
                        let d = gx.plane_mut(s, c);
                        for y in 0..gs[2] {
                            let sy = reflect_index(y as isize - *top as isize, xs[2]);
                            for xx in 0..gs[3] {
                                let sx = reflect_index(xx as isize - *left as isize, xs[3]);
                                d[sy * xs[3] + sx] += gp[y * gs[3] + xx];
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Crop { x, top, left } => {
                let xs = val(*x).shape();
                let gs = g.shape();
                let mut gx = Tensor::zeros(xs);
                for s in 0..xs[0] {
                    for c in 0..xs[1] {
                        let gp = g.plane(s, c);
                        let d = gx.plane_mut(s, c);
                        for y in 0..gs[2] {
                            let o = (top + y) * xs[3] + left;
                            d[o..o + gs[3]].copy_from_slice(&gp[y * gs[3]..(y + 1) * gs[3]]);
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::GlobalAvg(x) => {
                let xs = val(*x).shape();
                let hw = T::of((xs[2] * xs[3]) as f64);
                let gx = Tensor::from_fn(xs, |[s, c, _, _]| g.at([s, c, 0, 0]) / hw);
                self.acc(grads, *x, gx);
            }
            Op::SoftmaxC(x) => {
                let y = &node.value;
                let [n, c, h, w] = y.shape();
                let hw = h * w;
                let mut gx = Tensor::zeros(y.shape());
                for s in 0..n {
                    let (ys, gs) = (y.sample(s), g.sample(s));
                    let d = gx.sample_mut(s);
                    for i in 0..hw {
                        let dot: T = (0..c).map(|ch| ys[ch * hw + i] * gs[ch * hw + i]).sum();
                        for ch in 0..c {
                            d[ch * hw + i] = ys[ch * hw + i] * (gs[ch * hw + i] - dot);
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Attention { q, k, vf, vh, geom, saved } => {
                let [dq, dk, dvf, dvh] =
                    kernels::window_attention_backward(val(*q), val(*k), val(*vf), val(*vh), g, saved, geom);
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *vf, dvf);
                self.acc(grads, *vh, dvh);
            }
        }
    }
}
