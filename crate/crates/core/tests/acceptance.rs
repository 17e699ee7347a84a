//! End-to-end acceptance suite. Prints one PASS/FAIL/SKIP line per criterion
//! and exits nonzero when any criterion fails.
//!
//! The dataset-gated criterion reads an Ambient6K root from
//! `AMBIENT6K_ROOT` and is skipped when the variable is unset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ifblend::autograd::{Tape, Var};
use ifblend::blocks::{BlockConfig, Gcb, Lfb, WaSam};
use ifblend::checkpoint;
use ifblend::data::{read_dataset, synthetic_set, Layout, PairedSample, Split};
use ifblend::engine::{
    evaluate, infer_tiled, mean_loss, mean_psnr, tile_weight_sum, EvalOptions, LrSchedule, Restorer, TrainConfig,
    Trainer,
};
use ifblend::freqkernels::{haar_dwt, haar_idwt, srgb_pixel_to_lab};
use ifblend::losses_metrics::{lab_region_error, psnr, ssim, LabErrorMode, LossConfig};
use ifblend::params::{EntryKind, ParamStore};
use ifblend::{IfBlend, ModelConfig, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATASET_ENV: &str = "AMBIENT6K_ROOT";

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(t0: Instant, budget: Duration) -> std::result::Result<(), String> {
    let el = t0.elapsed();
    ensure(el <= budget, || format!("took {el:.1?}, budget {budget:?}"))
}

fn rand_tensor<T: ifblend::Float>(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor<T> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(r.gen_range(lo..hi)))
}

// Separable 1-D orthonormal Haar applied along rows and then columns.
fn haar_1d(v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    v.chunks(2).map(|p| ((p[0] + p[1]) * s, (p[0] - p[1]) * s)).unzip()
}

/// Returns `[LL, LH, HL, HH]` planes where LH differences rows of the
/// row-averaged signal and HL averages rows of the row-differenced one.
fn haar_oracle(plane: &[f64], h: usize, w: usize) -> [Vec<f64>; 4] {
    let (mut lo, mut hi) = (vec![0.0; h * w / 2], vec![0.0; h * w / 2]);
    for y in 0..h {
        let (a, d) = haar_1d(&plane[y * w..(y + 1) * w]);
        lo[y * w / 2..(y + 1) * w / 2].copy_from_slice(&a);
        hi[y * w / 2..(y + 1) * w / 2].copy_from_slice(&d);
    }
    let cols = |m: &[f64]| {
        let (wh, hh) = (w / 2, h / 2);
        let (mut a, mut d) = (vec![0.0; hh * wh], vec![0.0; hh * wh]);
        for x in 0..wh {
            let col: Vec<f64> = (0..h).map(|y| m[y * wh + x]).collect();
            let (ca, cd) = haar_1d(&col);
            for y in 0..hh {
                a[y * wh + x] = ca[y];
                d[y * wh + x] = cd[y];
            }
        }
        (a, d)
    };
    let (ll, lh) = cols(&lo);
    let (hl, hh) = cols(&hi);
    [ll, lh, hl, hh]
}

fn wavelets() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_rt, mut worst_energy) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let c = rng.gen_range(1..=3);
        let (h, w) = if i == 0 { (128, 128) } else { (2 * rng.gen_range(1..=64), 2 * rng.gen_range(1..=64)) };
        let x = rand_tensor::<f32>([1, c, h, w], 100 + i, -1.0, 1.0);
        let bands = haar_dwt(&x).map_err(|e| e.to_string())?;
        let back = haar_idwt(&bands).map_err(|e| e.to_string())?;
        let err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
        worst_rt = worst_rt.max(err);
        let ex: f64 = x.data().iter().map(|v| (*v as f64).powi(2)).sum();
        worst_energy = worst_energy.max((bands.energy() - ex).abs() / ex);
    }
    ensure(worst_rt <= 1e-5, || format!("round trip error {worst_rt:e}"))?;
    ensure(worst_energy <= 1e-4, || format!("relative energy error {worst_energy:e}"))?;

    let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = haar_dwt(&x).map_err(|e| e.to_string())?;
    let got = [b.ll.data()[0], b.high.data()[1], b.high.data()[0], b.high.data()[2]];
    let [ll, lh, hl, hh] = haar_oracle(x.data(), 2, 2);
    let oracle = [ll[0], hl[0], lh[0], hh[0]];
    for (k, (g, o)) in got.iter().zip(&oracle).enumerate() {
        ensure((g - o).abs() < 1e-12, || format!("worked example band {k}: {g} vs oracle {o}"))?;
    }
    ensure(oracle.iter().zip([5.0, -1.0, -2.0, 0.0]).all(|(o, e)| (o - e).abs() < 1e-12), || {
        format!("oracle gives {oracle:?}")
    })?;

    let (h, w) = (6, 10);
    let x = rand_tensor::<f64>([1, 2, h, w], 7, -1.0, 1.0);
    let b = haar_dwt(&x).map_err(|e| e.to_string())?;
    let (q, nc) = (h * w / 4, 2);
    // detail bands are band-major: all LH planes, then all HL, then all HH
    let detail = |band: usize, c: usize| &b.high.data()[(band * nc + c) * q..(band * nc + c + 1) * q];
    for c in 0..nc {
        let [ll, lh, hl, hh] = haar_oracle(&x.data()[c * h * w..(c + 1) * h * w], h, w);
        let pairs = [(&b.ll.data()[c * q..(c + 1) * q], &ll), (detail(0, c), &lh), (detail(1, c), &hl), (detail(2, c), &hh)];
        for (k, (got, want)) in pairs.iter().enumerate() {
            let e = got.iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure(e < 1e-12, || format!("channel {c} band {k} differs from the oracle by {e:e}"))?;
        }
    }
    within_budget(t0, Duration::from_secs(10))?;
    Ok(format!("round trip {worst_rt:.1e}, energy {worst_energy:.1e}, worked example (5, -1, -2, 0)"))
}

// CIE L* of neutral sRGB grays, from an independent colorimetry library.
const GRAY_L: [(f64, f64); 4] = [(0.5, 53.38896474), (0.25, 26.98291780), (0.75, 77.43137188), (0.18, 18.89075050)];
const COLOR_LAB: ([f64; 3], [f64; 3]) = ([0.2, 0.5, 0.8], [52.25206058, 2.77602273, -46.28571386]);

fn metrics() -> Check {
    let t0 = Instant::now();
    let a = Tensor::<f64>::from_fn([1, 3, 16, 16], |_| 0.5);
    let b = Tensor::<f64>::from_fn([1, 3, 16, 16], |_| 0.4);
    let p = psnr(&a, &b, 1.0).map_err(|e| e.to_string())?;
    ensure((p - 20.0).abs() <= 1e-9, || format!("uniform 0.1 error gives {p} dB"))?;

    let cfg = LossConfig::default();
    let x = rand_tensor::<f32>([2, 3, 48, 40], 3, 0.0, 1.0);
    let y = rand_tensor::<f32>([2, 3, 48, 40], 4, 0.0, 1.0);
    let s_xx = ssim(&x, &x, &cfg).map_err(|e| e.to_string())?;
    ensure((s_xx - 1.0).abs() <= 1e-6, || format!("SSIM(x, x) = {s_xx}"))?;
    let (s_xy, s_yx) = (ssim(&x, &y, &cfg).unwrap(), ssim(&y, &x, &cfg).unwrap());
    ensure((s_xy - s_yx).abs() <= 1e-12, || format!("SSIM asymmetric: {s_xy} vs {s_yx}"))?;

    let white = srgb_pixel_to_lab([1.0; 3]);
    let black = srgb_pixel_to_lab([0.0; 3]);
    ensure((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-3 && white[2].abs() < 1e-3, || {
        format!("white maps to {white:?}")
    })?;
    ensure(black.iter().all(|v| v.abs() < 1e-9), || format!("black maps to {black:?}"))?;
    for (g, l) in GRAY_L {
        let lab = srgb_pixel_to_lab([g; 3]);
        ensure((lab[0] - l).abs() <= 0.05, || format!("gray {g}: L {} vs {l}", lab[0]))?;
    }
    let lab = srgb_pixel_to_lab(COLOR_LAB.0);
    for k in 0..3 {
        ensure((lab[k] - COLOR_LAB.1[k]).abs() <= 0.05, || format!("color {:?}: {lab:?}", COLOR_LAB.0))?;
    }

    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mask = Tensor::<f32>::from_fn([2, 1, 48, 40], |_| if r.gen_bool(0.3) { 1.0 } else { 0.0 });
    let mut worst = 0.0f64;
    for mode in [LabErrorMode::MaeLab, LabErrorMode::RmseLab] {
        let row = lab_region_error(&x, &y, &mask, mode).map_err(|e| e.to_string())?;
        let (ns, nf) = (row.shadow_pixels as f64, row.free_pixels as f64);
        let lift = |v: f64| if mode == LabErrorMode::RmseLab { v * v } else { v };
        let whole = lift(row.total) * (ns + nf);
        let parts = lift(row.shadow) * ns + lift(row.shadow_free) * nf;
        worst = worst.max((whole - parts).abs() / whole);
    }
    ensure(worst <= 1e-6, || format!("region partition mismatch {worst:e}"))?;
    within_budget(t0, Duration::from_secs(10))?;
    Ok(format!("PSNR {p:.12} dB, SSIM(x,x) {s_xx:.9}, partition residual {worst:.1e}"))
}

fn probe_weights(shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |[a, b, c, d]| (((a * 7 + b * 5 + c * 3 + d) % 13) as f64 - 6.0) / 6.0)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, Var) -> Result<Var> + 'a;

fn objective(store: &ParamStore<f64>, x: &Tensor<f64>, build: &Build) -> f64 {
    let mut g = Tape::<f64>::new(true, 3);
    let xv = g.input(x.clone(), false);
    let y = build(&mut g, store, xv).unwrap();
    let yv = g.value(y);
    yv.data().iter().zip(probe_weights(yv.shape()).data()).map(|(a, b)| a * b).sum()
}

/// Worst relative mismatch between central differences and the tape's
/// gradient over every input element and the first few entries of each
/// parameter.
fn fd_mismatch(store: &ParamStore<f64>, x: &Tensor<f64>, per_param: usize, build: &Build) -> f64 {
    let mut g = Tape::<f64>::new(true, 3);
    let xv = g.input(x.clone(), true);
    let y = build(&mut g, store, xv).unwrap();
    let pw = g.constant(probe_weights(g.shape(y)));
    let prod = g.mul(y, pw).unwrap();
    let l = g.mean_all(prod);
    let n = g.value(prod).len() as f64;
    let grads = g.backward(l).unwrap();
    let h = 1e-6;
    let rel = |fd: f64, an: f64| (fd - an).abs() / (1e-4 + fd.abs().max(an.abs()));
    let mut worst = 0.0f64;
    let gx = grads.wrt(xv).unwrap();
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let fd = (objective(store, &xp, build) - objective(store, &xm, build)) / (2.0 * h * n);
        worst = worst.max(rel(fd, gx.data()[i]));
    }
    for id in store.ids().filter(|&id| store.kind(id) == EntryKind::Param) {
        let ga = grads.param(id).expect("every parameter has a gradient");
        for i in 0..per_param.min(ga.len()) {
            let (mut sp, mut sm) = (store.clone(), store.clone());
            sp.get_mut(id).data_mut()[i] += h;
            sm.get_mut(id).data_mut()[i] -= h;
            let fd = (objective(&sp, x, build) - objective(&sm, x, build)) / (2.0 * h * n);
            worst = worst.max(rel(fd, ga.data()[i]));
        }
    }
    worst
}

fn run_model(model: &IfBlend<f32>, x: &Tensor, training: bool) -> Tensor {
    let mut g = Tape::new(training, 0);
    let xv = g.input(x.clone(), false);
    let y = model.forward(&mut g, xv).unwrap();
    g.value(y).clone()
}

fn model_contract() -> Check {
    let t0 = Instant::now();
    let cfg = ModelConfig::default();
    let model = IfBlend::<f32>::new(&cfg, 1).map_err(|e| e.to_string())?;
    for (h, w) in [(64, 64), (50, 70), (33, 17)] {
        let x = rand_tensor([1, 3, h, w], 2, 0.0, 1.0);
        let y = model.infer(&x).map_err(|e| e.to_string())?;
        ensure(y.shape() == [1, 3, h, w], || format!("{h}x{w} input gave {:?}", y.shape()))?;
    }

    let mut zero_head = IfBlend::<f32>::new(&cfg, 3).unwrap();
    ensure(zero_head.store_mut().zero_prefix("head.") == 2, || "head parameters not found".into())?;
    let x = rand_tensor([2, 3, 50, 70], 4, 0.0, 1.0);
    ensure(run_model(&zero_head, &x, true) == x && zero_head.infer(&x).unwrap() == x, || {
        "zero head does not return the input".into()
    })?;

    let mut zero_gcb = IfBlend::<f32>::new(&cfg, 5).unwrap();
    let zeroed = (0..cfg.gcb_depth).map(|u| zero_gcb.store_mut().zero_prefix(&format!("gcb.{u}.project."))).sum::<usize>();
    ensure(zeroed == 2 * cfg.gcb_depth, || format!("zeroed {zeroed} GCB projection tensors"))?;
    let c = zero_gcb.gcb.channels;
    let z = rand_tensor::<f32>([1, c, 4, 4], 6, -2.0, 2.0);
    let mut g = Tape::new(true, 0);
    let zv = g.input(z.clone(), false);
    let out = zero_gcb.gcb.forward(&mut g, zero_gcb.store(), zv).unwrap();
    ensure(*g.value(out) == z, || "zero GCB projections do not give the identity".into())?;

    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let wa = WaSam::new(&mut store, &mut rng, "wa", &BlockConfig::new(8, 8), 12).unwrap();
    ensure(store.zero_prefix("wa.out_") == 4, || "WA-SAM output projections not found".into())?;
    let (ht, ft) = (rand_tensor::<f32>([1, 8, 16, 16], 8, -1.0, 1.0), rand_tensor::<f32>([1, 12, 16, 16], 9, -1.0, 1.0));
    let mut g = Tape::new(true, 0);
    let (hv, fv) = (g.input(ht.clone(), false), g.input(ft.clone(), false));
    let fused = wa.forward(&mut g, &store, hv, fv, wa.geom(16, 16).unwrap()).unwrap();
    let cat = g.concat(&[hv, fv]).unwrap();
    let direct = wa.fuse.forward(&mut g, &store, cat).unwrap();
    let direct = g.relu(direct);
    ensure(*g.value(fused.h_e) == ht && *g.value(fused.f_e) == ft, || "zero WA-SAM projections alter inputs".into())?;
    ensure(g.value(fused.d_hf) == g.value(direct), || "zero WA-SAM projections do not reduce to the fusion".into())?;

    let mut g = Tape::new(true, 1);
    let xv = g.input(rand_tensor([2, 3, 64, 64], 10, 0.2, 0.8), false);
    let y = model.forward(&mut g, xv).unwrap();
    let t = g.constant(rand_tensor([2, 3, 64, 64], 11, 0.0, 1.0));
    let d = g.sub(y, t).unwrap();
    let d = g.abs(d);
    let l = g.mean_all(d);
    let grads = g.backward(l).unwrap();
    let (mut nonzero, mut total) = (0usize, 0usize);
    for id in model.store().param_ids() {
        let gr = grads.param(id).ok_or_else(|| format!("{} has no gradient", model.store().name(id)))?;
        nonzero += gr.data().iter().filter(|v| **v != 0.0).count();
        total += gr.len();
    }
    let frac = nonzero as f64 / total as f64;
    ensure(frac > 0.99, || format!("only {nonzero}/{total} parameters have a nonzero gradient"))?;

    let bc = BlockConfig { dropout_rate: 0.0, ..BlockConfig::new(2, 3) };
    let mut store = ParamStore::<f64>::new();
    let lfb = Lfb::new(&mut store, &mut rng, "lfb", &bc, false).unwrap();
    let x = rand_tensor::<f64>([2, 2, 4, 4], 12, -1.0, 1.0);
    let lfb_err = fd_mismatch(&store, &x, 4, &|g, s, v| lfb.forward(g, s, v));
    let mut store = ParamStore::<f64>::new();
    let down = Lfb::new(&mut store, &mut rng, "down", &bc, true).unwrap();
    let down_err = fd_mismatch(&store, &x, 4, &|g, s, v| down.forward(g, s, v));
    let mut store = ParamStore::<f64>::new();
    let gcb = Gcb::new(&mut store, &mut rng, "gcb", 3, 1).unwrap();
    let x = rand_tensor::<f64>([1, 3, 4, 4], 13, -1.0, 1.0);
    let gcb_err = fd_mismatch(&store, &x, 6, &|g, s, v| gcb.forward(g, s, v));
    let fd = lfb_err.max(down_err).max(gcb_err);
    ensure(fd <= 1e-3, || format!("finite differences: LFB {lfb_err:e}, strided LFB {down_err:e}, GCB {gcb_err:e}"))?;
    within_budget(t0, Duration::from_secs(120))?;
    Ok(format!("{:.2}% params with gradient, worst FD mismatch {fd:.1e}, {:.1?}", 100.0 * frac, t0.elapsed()))
}

fn fixture() -> Vec<PairedSample> {
    synthetic_set(8, 64, 1).expect("synthetic fixture")
}

fn fixture_train_config(batch: usize, steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        patch_size: 64,
        lr: 1e-3,
        lr_schedule: LrSchedule::Cosine,
        max_steps: steps,
        flip: false,
        deterministic: true,
        ..Default::default()
    }
}

const OVERFIT_MAX_STEPS: usize = 1000;
const OVERFIT_CHECK_EVERY: usize = 50;

fn overfit(trained: &mut Option<IfBlend<f32>>) -> Check {
    let t0 = Instant::now();
    let data = fixture();
    let loss_cfg = LossConfig::default();
    let mut trainer =
        Trainer::new(&ModelConfig::default(), &loss_cfg, &fixture_train_config(8, OVERFIT_MAX_STEPS), data.len())
            .map_err(|e| e.to_string())?;
    let (mut p, mut l) = (f64::NAN, f64::NAN);
    for step in 1..=OVERFIT_MAX_STEPS {
        trainer.step(&data).map_err(|e| e.to_string())?;
        if step % OVERFIT_CHECK_EVERY == 0 {
            p = mean_psnr(&trainer.model, &data).unwrap();
            l = mean_loss(&trainer.model, &data, &loss_cfg).unwrap();
            eprintln!("  overfit step {step}: PSNR {p:.2} dB, loss {l:.5}, {:.0?}", t0.elapsed());
            if p >= 30.0 && l < 0.01 {
                break;
            }
        }
    }
    let steps = trainer.step_count();
    *trained = Some(trainer.model);
    ensure(p >= 30.0 && l < 0.01, || format!("after {steps} steps PSNR {p:.2} dB, loss {l:.5}"))?;
    let summary = format!("default {steps} steps PSNR {p:.2} dB loss {l:.4}");

    let base = ModelConfig::default();
    let variants = [
        ("no DWT features", ModelConfig { use_dwt_feats: false, ..base.clone() }, loss_cfg.clone()),
        ("no RGB split", ModelConfig { use_rgb_split: false, ..base.clone() }, loss_cfg.clone()),
        ("L1 only", base.clone(), LossConfig { lambda_ssim: 0.0, ..loss_cfg.clone() }),
    ];
    let full = IfBlend::<f32>::new(&base, 0).unwrap().num_params();
    let mut parts = vec![summary];
    for (name, m, lc) in variants {
        let params = IfBlend::<f32>::new(&m, 0).unwrap().num_params();
        let expect_fewer = !m.use_dwt_feats;
        ensure(if expect_fewer { params < full } else { params == full }, || {
            format!("{name}: {params} parameters vs {full}")
        })?;
        let mut t = Trainer::new(&m, &lc, &fixture_train_config(2, 200), data.len()).map_err(|e| e.to_string())?;
        let losses: Vec<f64> = (0..200).map(|_| t.step(&data).map(|s| s.loss)).collect::<Result<_>>().map_err(|e| e.to_string())?;
        let head = losses[..20].iter().sum::<f64>() / 20.0;
        let tail = losses[180..].iter().sum::<f64>() / 20.0;
        let drop = 1.0 - tail / head;
        eprintln!("  {name}: smoothed loss {head:.4} -> {tail:.4}, {:.0?}", t0.elapsed());
        ensure(drop >= 0.5, || format!("{name}: smoothed loss fell only {:.1}%", 100.0 * drop))?;
        parts.push(format!("{name} -{:.0}%", 100.0 * drop));
    }
    within_budget(t0, Duration::from_secs(15 * 60))?;
    Ok(format!("{}, {:.0?}", parts.join(", "), t0.elapsed()))
}

fn determinism() -> Check {
    let data = fixture();
    let cfg = TrainConfig { patch_size: 32, seed: 42, flip: true, ..fixture_train_config(2, 50) };
    let run = || -> Result<(f64, Vec<u8>, IfBlend<f32>)> {
        let mut t = Trainer::new(&ModelConfig::default(), &LossConfig::default(), &cfg, data.len())?;
        let mut last = f64::NAN;
        for _ in 0..50 {
            last = t.step(&data)?.loss;
        }
        Ok((last, checkpoint::to_bytes(&t.model, 50)?, t.model))
    };
    let (la, ba, model) = run().map_err(|e| e.to_string())?;
    let (lb, bb, _) = run().map_err(|e| e.to_string())?;
    ensure(la.to_bits() == lb.to_bits(), || format!("step-50 loss {la} vs {lb}"))?;
    ensure(ba == bb, || "checkpoints differ".into())?;
    let (restored, step) = checkpoint::from_bytes(&ba).map_err(|e| e.to_string())?;
    ensure(step == 50, || format!("restored step {step}"))?;
    let x = rand_tensor([2, 3, 48, 64], 14, 0.0, 1.0);
    ensure(model.infer(&x).unwrap() == restored.infer(&x).unwrap(), || "restored forward differs".into())?;
    Ok(format!("step-50 loss {la:.6}, {} checkpoint bytes identical", ba.len()))
}

const TILE: usize = 64;
const TILE_OVERLAP: usize = 16;

fn tiling(trained: Option<&IfBlend<f32>>) -> Check {
    let mut worst = 0.0f64;
    for (h, w, tile, overlap) in [(128, 128, TILE, TILE_OVERLAP), (100, 77, 32, 8), (64, 200, 48, 0), (37, 53, 16, 7)] {
        let sum = tile_weight_sum(h, w, tile, overlap);
        worst = worst.max(sum.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max));
    }
    ensure(worst <= 1e-6, || format!("weight map deviates from 1 by {worst:e}"))?;

    let model = trained.ok_or("no trained model from the overfit run")?;
    let x = rand_tensor([1, 3, 48, 48], 15, 0.0, 1.0);
    let direct = model.infer(&x).unwrap();
    ensure(infer_tiled(model, &x, 64, 16).unwrap() == direct, || "whole-image fallback is not bitwise".into())?;

    let scene = synthetic_set(1, 128, 77).map_err(|e| e.to_string())?.remove(0).input;
    let whole = model.infer(&scene).unwrap();
    let tiled = infer_tiled(model, &scene, TILE, TILE_OVERLAP).map_err(|e| e.to_string())?;
    let diff = whole.data().iter().zip(tiled.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    ensure(diff < 0.02, || format!("tiled vs whole max-abs {diff:.4} (tile {TILE}, overlap {TILE_OVERLAP})"))?;
    Ok(format!("weights within {worst:.1e}, tiled vs whole {diff:.4} (tile {TILE}, overlap {TILE_OVERLAP})"))
}

fn dataset_identity() -> Outcome {
    let Some(root) = std::env::var_os(DATASET_ENV).map(PathBuf::from) else {
        return Outcome::Skip(format!("{DATASET_ENV} not set"));
    };
    let descs = match read_dataset(&root, Layout::Ambient6k, Split::Test) {
        Ok(d) if !d.is_empty() => d,
        Ok(_) => return Outcome::Skip(format!("no test pairs under {}", root.display())),
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let report = match evaluate(Restorer::Identity, &descs, &EvalOptions::default()) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let (p, s) = (report.aggregates["psnr"].mean, report.aggregates["ssim"].mean);
    let msg = format!("{} pairs: PSNR {p:.3} dB, SSIM {s:.3}", descs.len());
    if (p - 13.592).abs() <= 0.05 && (s - 0.658).abs() <= 0.005 {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(format!("{msg}; expected 13.592 / 0.658"))
    }
}

fn guarded(f: impl FnOnce() -> Check) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(m)) => Outcome::Pass(m),
        Ok(Err(m)) => Outcome::Fail(m),
        Err(p) => Outcome::Fail(match p.downcast_ref::<String>() {
            Some(s) => format!("panicked: {s}"),
            None => format!("panicked: {}", p.downcast_ref::<&str>().unwrap_or(&"?")),
        }),
    }
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut trained = None;
    let results = [
        ("1 wavelet oracle", guarded(wavelets)),
        ("2 metric oracle", guarded(metrics)),
        ("3 model contract", guarded(model_contract)),
        ("4 overfit and variants", guarded(|| overfit(&mut trained))),
        ("5 pipeline determinism", guarded(determinism)),
        ("6 tiled inference", guarded(|| tiling(trained.as_ref()))),
        ("7 dataset identity eval", dataset_identity()),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        let (tag, msg) = match outcome {
            Outcome::Pass(m) => ("PASS", m),
            Outcome::Fail(m) => {
                failed += 1;
                ("FAIL", m)
            }
            Outcome::Skip(m) => ("SKIP", m),
        };
        println!("{tag} criterion {name}: {msg}");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
