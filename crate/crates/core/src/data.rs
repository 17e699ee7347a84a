//! Paired-image datasets: on-disk readers, patch sampling, a synthetic
//! shadow generator, and a pair-consistency audit.
//!
//! Layouts under `<root>/<split>/`:
//! - `ambient6k`: `input/*.png`, `gt/*.png`, optional `meta/*.json`
//!   (and optional `mask/*.png`, as written by the synthetic generator);
//! - `istd`: `A/` input, `B/` shadow mask, `C/` ground truth.
//!
//! Files pair by identical stem. Images decode to `[0, 1]` by dividing by the
//! type maximum (8- or 16-bit).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Synthetic pixels whose combined attenuation falls below this count as
/// shadow.
pub const MASK_THRESHOLD: f32 = 0.98;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Ambient6k,
    Istd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Ambient6k => "ambient6k",
            Layout::Istd => "istd",
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ambient6k" => Ok(Layout::Ambient6k),
            "istd" => Ok(Layout::Istd),
            _ => Err(Error::Config(format!("unknown layout `{s}` (expected ambient6k or istd)"))),
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub scene_id: String,
    pub lights: Option<String>,
    pub source_paths: Vec<PathBuf>,
}

/// An aligned input / ground-truth pair, each `[1, 3, H, W]`, with an
/// optional binary `[1, 1, H, W]` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub input: Tensor,
    pub gt: Tensor,
    pub mask: Option<Tensor>,
    pub meta: SampleMeta,
}

impl PairedSample {
    pub fn new(input: Tensor, gt: Tensor, mask: Option<Tensor>, meta: SampleMeta) -> Result<Self> {
        if input.shape() != gt.shape() {
            return Err(Error::Dimension(format!(
                "{}: input {:?} and gt {:?} differ",
                meta.scene_id,
                input.shape(),
                gt.shape()
            )));
        }
        if input.n() != 1 || input.c() != 3 {
            return Err(Error::Shape(format!("{}: expected a [1,3,H,W] image, got {:?}", meta.scene_id, input.shape())));
        }
        if let Some(m) = &mask {
            if m.shape() != [1, 1, input.h(), input.w()] {
                return Err(Error::Dimension(format!(
                    "{}: mask {:?} does not match image {}x{}",
                    meta.scene_id,
                    m.shape(),
                    input.h(),
                    input.w()
                )));
            }
        }
        Ok(PairedSample { input, gt, mask, meta })
    }

    pub fn id(&self) -> &str {
        &self.meta.scene_id
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.input.h(), self.input.w())
    }
}

/// Stored sample precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max(self) -> f32 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

fn image_err(path: &Path, msg: impl fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), msg: msg.to_string() }
}

fn open_image(path: &Path) -> Result<(DynamicImage, BitDepth)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let depth = match img.color().bytes_per_pixel() / img.color().channel_count() {
        1 => BitDepth::Eight,
        2 => BitDepth::Sixteen,
        _ => return Err(image_err(path, format!("unsupported sample format {:?}", img.color()))),
    };
    Ok((img, depth))
}

/// Decodes a PNG to a `[1, 3, H, W]` tensor in `[0, 1]`. Grayscale inputs are
/// replicated across channels; alpha is dropped.
pub fn load_rgb(path: &Path) -> Result<(Tensor, BitDepth)> {
    let (img, depth) = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f32> = match depth {
        BitDepth::Eight => img.to_rgb8().into_raw().into_iter().map(f32::from).collect(),
        BitDepth::Sixteen => img.to_rgb16().into_raw().into_iter().map(f32::from).collect(),
    };
    let scale = depth.max();
    let t = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| raw[(y * w + x) * 3 + c] / scale);
    Ok((t, depth))
}

/// Decodes a single-channel mask to `[1, 1, H, W]` with values in {0, 1}
/// (anything at or above half scale counts as shadow).
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let (img, depth) = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f32> = match depth {
        BitDepth::Eight => img.to_luma8().into_raw().into_iter().map(f32::from).collect(),
        BitDepth::Sixteen => img.to_luma16().into_raw().into_iter().map(f32::from).collect(),
    };
    let half = depth.max() / 2.0;
    Tensor::from_vec([1, 1, h, w], raw.into_iter().map(|v| if v >= half { 1.0 } else { 0.0 }).collect())
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Encodes the first sample of a 1- or 3-channel tensor as PNG.
pub fn save_png(path: &Path, t: &Tensor, depth: BitDepth) -> Result<()> {
    let (h, w, c) = (t.h(), t.w(), t.c());
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("cannot save a {c}-channel image")));
    }
    let s = t.sample(0);
    let hw = h * w;
    let interleaved = (0..hw * c).map(|i| s[(i % c) * hw + i / c]);
    let (wu, hu) = (w as u32, h as u32);
    let bad = || image_err(path, "buffer size mismatch");
    let img = match (depth, c) {
        (BitDepth::Eight, 3) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(wu, hu, interleaved.map(|v| quantize(v, 255.0) as u8).collect())
                .ok_or_else(bad)?,
        ),
        (BitDepth::Eight, _) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(wu, hu, interleaved.map(|v| quantize(v, 255.0) as u8).collect())
                .ok_or_else(bad)?,
        ),
        (BitDepth::Sixteen, 3) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(wu, hu, interleaved.map(|v| quantize(v, 65535.0) as u16).collect())
                .ok_or_else(bad)?,
        ),
        (BitDepth::Sixteen, _) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(wu, hu, interleaved.map(|v| quantize(v, 65535.0) as u16).collect())
                .ok_or_else(bad)?,
        ),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Where a pair lives on disk; loading is deferred.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairDescriptor {
    pub id: String,
    pub input: PathBuf,
    pub gt: PathBuf,
    pub mask: Option<PathBuf>,
    pub meta: Option<PathBuf>,
}

#[derive(Deserialize)]
struct MetaFile {
    scene_id: Option<String>,
    lights: Option<serde_json::Value>,
}

impl PairDescriptor {
    pub fn load(&self) -> Result<PairedSample> {
        let (input, _) = load_rgb(&self.input)?;
        let (gt, _) = load_rgb(&self.gt)?;
        let mask = self.mask.as_deref().map(load_mask).transpose()?;
        let mut meta = SampleMeta { scene_id: self.id.clone(), lights: None, source_paths: vec![] };
        meta.source_paths.push(self.input.clone());
        meta.source_paths.push(self.gt.clone());
        meta.source_paths.extend(self.mask.clone());
        if let Some(p) = &self.meta {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let parsed: MetaFile = serde_json::from_str(&text)
                .map_err(|e| Error::Validation(format!("{}: bad metadata: {e}", p.display())))?;
            if let Some(s) = parsed.scene_id {
                meta.scene_id = s;
            }
            meta.lights = parsed.lights.map(|v| match v {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            });
            meta.source_paths.push(p.clone());
        }
        PairedSample::new(input, gt, mask, meta)
    }
}

/// Files in `dir` with extension `ext` (case-insensitive), keyed by stem.
fn files_by_stem(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let matches = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case(ext));
        if path.is_file() && matches {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Lists the pairs of one split, sorted by stem. Missing counterparts are an
/// error naming every offending stem.
pub fn read_dataset(root: &Path, layout: Layout, split: Split) -> Result<Vec<PairDescriptor>> {
    if !root.is_dir() {
        return Err(Error::Validation(format!("dataset root {} is not a directory", root.display())));
    }
    let base = root.join(split.dir_name());
    let (input_dir, gt_dir, mask_dir) = match layout {
        Layout::Ambient6k => (base.join("input"), base.join("gt"), base.join("mask")),
        Layout::Istd => (base.join("A"), base.join("C"), base.join("B")),
    };
    let inputs = files_by_stem(&input_dir, "png")?;
    let gts = files_by_stem(&gt_dir, "png")?;
    let masks = files_by_stem(&mask_dir, "png")?;
    let metas = match layout {
        Layout::Ambient6k => files_by_stem(&base.join("meta"), "json")?,
        Layout::Istd => BTreeMap::new(),
    };
    let mut problems = Vec::new();
    let stems: BTreeSet<&String> = inputs.keys().chain(gts.keys()).collect();
    for s in &stems {
        match (inputs.contains_key(*s), gts.contains_key(*s)) {
            (true, false) => problems.push(format!("{s} (no gt)")),
            (false, true) => problems.push(format!("{s} (no input)")),
            _ => {}
        }
    }
    if layout == Layout::Istd {
        for s in inputs.keys().filter(|s| !masks.contains_key(*s)) {
            problems.push(format!("{s} (no mask)"));
        }
    }
    if !masks.is_empty() {
        for s in masks.keys().filter(|s| !inputs.contains_key(*s)) {
            problems.push(format!("{s} (mask without input)"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(format!(
            "unpaired files in {}: {}",
            base.display(),
            problems.join(", ")
        )));
    }
    if inputs.is_empty() {
        log::warn!("split {} of {} is empty", split, root.display());
    }
    Ok(inputs
        .into_iter()
        .map(|(id, input)| PairDescriptor {
            gt: gts[&id].clone(),
            mask: masks.get(&id).cloned(),
            meta: metas.get(&id).cloned(),
            input,
            id,
        })
        .collect())
}

/// Random-access source of pairs.
pub trait Dataset {
    fn len(&self) -> usize;
    fn id(&self, i: usize) -> String;
    fn get(&self, i: usize) -> Result<PairedSample>;
    /// Whether sample `i` carries a shadow mask, known without decoding.
    fn has_mask(&self, i: usize) -> bool;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset for Vec<PairedSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn id(&self, i: usize) -> String {
        self[i].meta.scene_id.clone()
    }
    fn get(&self, i: usize) -> Result<PairedSample> {
        Ok(self[i].clone())
    }
    fn has_mask(&self, i: usize) -> bool {
        self[i].mask.is_some()
    }
}

impl Dataset for Vec<PairDescriptor> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn id(&self, i: usize) -> String {
        self[i].id.clone()
    }
    fn get(&self, i: usize) -> Result<PairedSample> {
        self[i].load()
    }
    fn has_mask(&self, i: usize) -> bool {
        self[i].mask.is_some()
    }
}

/// Crops the same random `size x size` window out of input, gt and mask,
/// optionally mirroring all three together.
pub fn sample_patch(s: &PairedSample, size: usize, rng: &mut ChaCha8Rng, flip: bool) -> Result<PairedSample> {
    let (h, w) = s.dims();
    if size == 0 || size > h.min(w) {
        return Err(Error::Dimension(format!("patch size {size} does not fit a {h}x{w} image")));
    }
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    let mirror = flip && rng.gen_bool(0.5);
    let cut = |t: &Tensor| -> Result<Tensor> {
        let c = t.crop(top, left, size, size)?;
        Ok(if mirror { c.flip_horizontal() } else { c })
    };
    Ok(PairedSample {
        input: cut(&s.input)?,
        gt: cut(&s.gt)?,
        mask: s.mask.as_ref().map(cut).transpose()?,
        meta: s.meta.clone(),
    })
}

/// Parameters of one procedurally generated shadowed scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub size: (usize, usize),
    /// Occluded light sources, 1 to 3.
    pub num_lights: usize,
    /// Penumbra blur in pixels.
    pub penumbra_sigma: f64,
    /// Darkest attenuation any single light may cast, in (0, 1].
    pub min_attenuation: f64,
}

impl SyntheticSceneSpec {
    pub fn new(seed: u64, h: usize, w: usize) -> Self {
        SyntheticSceneSpec { seed, size: (h, w), num_lights: 2, penumbra_sigma: 3.0, min_attenuation: 0.35 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.num_lights) {
            return Err(Error::Config(format!("num_lights must be 1..=3, got {}", self.num_lights)));
        }
        if self.size.0 == 0 || self.size.1 == 0 {
            return Err(Error::Config("synthetic image size must be positive".into()));
        }
        if !(self.penumbra_sigma >= 0.0) {
            return Err(Error::Config("penumbra_sigma must be >= 0".into()));
        }
        if !(self.min_attenuation > 0.0 && self.min_attenuation <= 1.0) {
            return Err(Error::Config(format!("min_attenuation must be in (0, 1], got {}", self.min_attenuation)));
        }
        Ok(())
    }
}

fn gaussian_blur_plane(p: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return p.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.into_iter().map(|t| t / norm).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r).map(|i| taps[(i + r) as usize] * p[y * w + clampi(x as isize + i, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r).map(|i| taps[(i + r) as usize] * tmp[clampi(y as isize + i, h) * w + x]).sum();
        }
    }
    out
}

/// Convex polygon with vertices on an ellipse at sorted random angles.
fn random_polygon(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<(f64, f64)> {
    let (hf, wf) = (h as f64, w as f64);
    let cy = rng.gen_range(0.15..0.85) * hf;
    let cx = rng.gen_range(0.15..0.85) * wf;
    let ry = rng.gen_range(0.15..0.45) * hf;
    let rx = rng.gen_range(0.15..0.45) * wf;
    let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let n = rng.gen_range(3..=7);
    let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles
        .into_iter()
        .map(|a| {
            let (y, x) = (ry * a.sin(), rx * a.cos());
            (cy + y * rot.cos() + x * rot.sin(), cx - y * rot.sin() + x * rot.cos())
        })
        .collect()
}

fn inside_convex(poly: &[(f64, f64)], y: f64, x: f64) -> bool {
    let mut sign = 0.0f64;
    for i in 0..poly.len() {
        let (ay, ax) = poly[i];
        let (by, bx) = poly[(i + 1) % poly.len()];
        let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

fn synthetic_scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<[f64; 3]> {
    let mut px = vec![[0.0f64; 3]; h * w];
    let mut base = [[0.0f64; 3]; 3];
    for c in 0..3 {
        base[c] = [rng.gen_range(0.3..0.8), rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25)];
    }
    for y in 0..h {
        for x in 0..w {
            let (v, u) = (y as f64 / h as f64, x as f64 / w as f64);
            for c in 0..3 {
                px[y * w + x][c] = base[c][0] + base[c][1] * (v - 0.5) + base[c][2] * (u - 0.5);
            }
        }
    }
    let shapes = rng.gen_range(3..=6);
    for _ in 0..shapes {
        let color = [rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95)];
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry = rng.gen_range(0.05..0.3) * h as f64;
        let rx = rng.gen_range(0.05..0.3) * w as f64;
        let ellipse = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let hit = if ellipse { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if hit {
                    px[y * w + x] = color;
                }
            }
        }
    }
    // band-limited texture: a few low-frequency plane waves
    for _ in 0..3 {
        let fy = rng.gen_range(1.0..6.0) / h as f64;
        let fx = rng.gen_range(1.0..6.0) / w as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.01..0.04);
        for y in 0..h {
            for x in 0..w {
                let t = amp * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + phase).sin();
                for c in 0..3 {
                    px[y * w + x][c] += t;
                }
            }
        }
    }
    for p in &mut px {
        for v in p.iter_mut() {
            *v = v.clamp(0.1, 0.95);
        }
    }
    px
}

/// Per-light attenuation maps in `[min_attenuation, 1]`.
fn attenuation_maps(rng: &mut ChaCha8Rng, spec: &SyntheticSceneSpec) -> Vec<Vec<f64>> {
    let (h, w) = spec.size;
    (0..spec.num_lights)
        .map(|_| {
            let poly = random_polygon(rng, h, w);
            let lo = spec.min_attenuation;
            let depth = 1.0 - rng.gen_range(lo..=(lo + 1.0) / 2.0);
            let occ: Vec<f64> = (0..h * w)
                .map(|i| if inside_convex(&poly, (i / w) as f64 + 0.5, (i % w) as f64 + 0.5) { 1.0 } else { 0.0 })
                .collect();
            gaussian_blur_plane(&occ, h, w, spec.penumbra_sigma).into_iter().map(|o| 1.0 - depth * o).collect()
        })
        .collect()
}

/// Deterministically renders a shadow-free scene, casts soft multiplicative
/// shadows from `num_lights` occluders, and marks every pixel whose total
/// attenuation is below [`MASK_THRESHOLD`].
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<PairedSample> {
    spec.validate()?;
    let (h, w) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = synthetic_scene(&mut rng, h, w);
    let maps = attenuation_maps(&mut rng, spec);
    let atten: Vec<f32> = (0..h * w).map(|i| maps.iter().map(|m| m[i]).product::<f64>() as f32).collect();
    let gt = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| scene[y * w + x][c] as f32);
    let input = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        let g = scene[y * w + x][c] as f32;
        let a = atten[y * w + x];
        if a == 1.0 {
            g
        } else {
            g * a
        }
    });
    let mask = Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| if atten[y * w + x] < MASK_THRESHOLD { 1.0 } else { 0.0 });
    let meta = SampleMeta {
        scene_id: format!("synth_{:06}", spec.seed),
        lights: Some(format!("{} occluded light(s)", spec.num_lights)),
        source_paths: vec![],
    };
    PairedSample::new(input, gt, Some(mask), meta)
}

/// The combined attenuation field of a spec, for inspection.
pub fn synthetic_attenuation(spec: &SyntheticSceneSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let (h, w) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let _ = synthetic_scene(&mut rng, h, w);
    let maps = attenuation_maps(&mut rng, spec);
    Ok((0..h * w).map(|i| maps.iter().map(|m| m[i]).product()).collect())
}

/// `count` synthetic pairs with consecutive seeds starting at `seed`, sizes
/// and shadow settings drawn from a fixed recipe.
pub fn synthetic_set(count: usize, size: usize, seed: u64) -> Result<Vec<PairedSample>> {
    (0..count as u64)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i);
            let mut spec = SyntheticSceneSpec::new(s, size, size);
            spec.num_lights = 1 + (i as usize % 3);
            generate_synthetic(&spec)
        })
        .collect()
}

/// Misalignment threshold of the audit, in pixels.
pub const SHIFT_FLAG_PX: i32 = 2;
const MAX_SHIFT: i32 = 8;
const AUDIT_TARGET_SIZE: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub id: String,
    pub same_dims: bool,
    /// Mean gt luma minus mean input luma.
    pub brightness_delta: f64,
    /// Fraction of pixels with input brighter than gt by more than 0.1 in
    /// any channel.
    pub brighter_fraction: f64,
    /// Estimated `(dy, dx)` such that `gt(y, x) ~ input(y - dy, x - dx)`.
    pub shift: (i32, i32),
    pub flagged: bool,
    pub error: Option<String>,
}

fn luma(t: &Tensor) -> Vec<f64> {
    let hw = t.h() * t.w();
    let s = t.sample(0);
    (0..hw).map(|i| 0.299 * s[i] as f64 + 0.587 * s[hw + i] as f64 + 0.114 * s[2 * hw + i] as f64).collect()
}

fn downsample(p: &[f64], h: usize, w: usize, f: usize) -> (Vec<f64>, usize, usize) {
    if f == 1 {
        return (p.to_vec(), h, w);
    }
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho * f {
        for x in 0..wo * f {
            out[(y / f) * wo + x / f] += p[y * w + x];
        }
    }
    let n = (f * f) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    (out, ho, wo)
}

/// Integer shift maximizing the normalized cross-correlation of `b` against
/// `a` over their overlap, searched exhaustively within `max` pixels.
pub fn estimate_shift(a: &[f64], b: &[f64], h: usize, w: usize, max: i32) -> (i32, i32) {
    let mut best: (f64, (i32, i32)) = (f64::NEG_INFINITY, (0, 0));
    for dy in -max..=max {
        for dx in -max..=max {
            let (y0, y1) = (dy.max(0) as usize, (h as i32 + dy.min(0)).max(0) as usize);
            let (x0, x1) = (dx.max(0) as usize, (w as i32 + dx.min(0)).max(0) as usize);
            if y1 <= y0 + 1 || x1 <= x0 + 1 {
                continue;
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    sb += b[y * w + x];
                    sa += a[(y as i32 - dy) as usize * w + (x as i32 - dx) as usize];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    let va = a[(y as i32 - dy) as usize * w + (x as i32 - dx) as usize] - ma;
                    let vb = b[y * w + x] - mb;
                    sab += va * vb;
                    saa += va * va;
                    sbb += vb * vb;
                }
            }
            let denom = (saa * sbb).sqrt();
            let score = if denom > 0.0 { sab / denom } else { 0.0 };
            // prefer the smaller shift on ties
            let better = score > best.0 + 1e-12
                || ((score - best.0).abs() <= 1e-12 && dy.abs() + dx.abs() < best.1 .0.abs() + best.1 .1.abs());
            if better {
                best = (score, (dy, dx));
            }
        }
    }
    best.1
}

/// Consistency diagnostics for one loaded pair.
pub fn audit_pair(s: &PairedSample) -> AuditRow {
    let (h, w) = s.dims();
    let (la, lb) = (luma(&s.input), luma(&s.gt));
    let n = (h * w) as f64;
    let brightness_delta = (lb.iter().sum::<f64>() - la.iter().sum::<f64>()) / n;
    let hw = h * w;
    let (si, sg) = (s.input.sample(0), s.gt.sample(0));
    let brighter = (0..hw).filter(|&i| (0..3).any(|c| si[c * hw + i] > sg[c * hw + i] + 0.1)).count();
    let f = (h.min(w) / AUDIT_TARGET_SIZE).max(1);
    let (da, dh, dw) = downsample(&la, h, w, f);
    let (db, _, _) = downsample(&lb, h, w, f);
    let (dy, dx) = estimate_shift(&da, &db, dh, dw, MAX_SHIFT);
    let shift = (dy * f as i32, dx * f as i32);
    AuditRow {
        id: s.id().to_string(),
        same_dims: true,
        brightness_delta,
        brighter_fraction: brighter as f64 / n,
        shift,
        flagged: shift.0.abs() >= SHIFT_FLAG_PX || shift.1.abs() >= SHIFT_FLAG_PX,
        error: None,
    }
}

/// Audits every pair; load failures become flagged rows and the audit goes on.
pub fn audit_pairs(data: &dyn Dataset) -> Vec<AuditRow> {
    (0..data.len())
        .map(|i| match data.get(i) {
            Ok(s) => audit_pair(&s),
            Err(e) => AuditRow {
                id: data.id(i),
                same_dims: !matches!(e, Error::Dimension(_)),
                brightness_delta: f64::NAN,
                brighter_fraction: f64::NAN,
                shift: (0, 0),
                flagged: true,
                error: Some(e.to_string()),
            },
        })
        .collect()
}
