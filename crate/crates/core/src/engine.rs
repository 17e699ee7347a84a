//! Training loop, evaluation runner and tiled inference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape};
use crate::checkpoint;
use crate::data::{sample_patch, save_png, BitDepth, Dataset};
use crate::error::{Error, Result};
use crate::losses_metrics::{lab_region_error, loss, loss_var, psnr, ssim, LabErrorMode, LossConfig, PerceptualScorer};
use crate::model::{IfBlend, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Square crop side; images no larger than this are used whole.
    pub patch_size: usize,
    pub lr: f64,
    /// Floor of the cosine schedule (never above `lr`).
    pub lr_min: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Validate every this many steps; 0 means once per epoch.
    pub val_every: usize,
    /// Stop after this many steps; 0 means `epochs` full passes.
    pub max_steps: usize,
    /// Random synchronized horizontal flips.
    pub flip: bool,
    /// Single-worker, fixed-order execution. The engine is sequential, so
    /// this only records intent.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            patch_size: 256,
            lr: 2e-4,
            lr_min: 1e-6,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            checkpoint_every: 1000,
            val_every: 0,
            max_steps: 0,
            flip: true,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        for (name, v) in [("epochs", self.epochs), ("batch_size", self.batch_size), ("patch_size", self.patch_size)] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        let m = model.size_multiple();
        if self.patch_size % m != 0 {
            return Err(Error::Config(format!(
                "train.patch_size {} must be divisible by {m} (2^stages)",
                self.patch_size
            )));
        }
        if !(self.lr >= 0.0) || !(self.lr_min >= 0.0) {
            return Err(Error::Config("train.lr and train.lr_min must be >= 0".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        if self.max_steps > 0 {
            self.max_steps
        } else {
            self.epochs * self.steps_per_epoch(dataset_len)
        }
    }

    /// Learning rate for 0-based `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let floor = self.lr_min.min(self.lr);
                let t = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
                floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Adam with bias correction and no weight decay.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Grads<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let eps = self.eps as f32;
        for (id, g) in grads.params() {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] -= step * m[j] / (v[j].sqrt() / c2s + eps);
            }
        }
    }
}

/// One optimizer step's log line.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub l1: f64,
    pub ssim_term: f64,
    pub lr: f64,
    pub batch_ids: Vec<String>,
}

pub const METRICS_HEADER: &str = "step,loss,l1,ssim_term,lr";

impl StepLog {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.loss, self.l1, self.ssim_term, self.lr)
    }
}

/// Stateful optimizer loop over an in-memory or on-disk dataset.
pub struct Trainer {
    pub model: IfBlend<f32>,
    pub loss_cfg: LossConfig,
    pub cfg: TrainConfig,
    opt: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    total: usize,
}

/// Keeps freed heap memory mapped so per-step tape buffers are reused
/// instead of being faulted in again. Affects the whole process.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, loss_cfg: &LossConfig, cfg: &TrainConfig, dataset_len: usize) -> Result<Self> {
        let model = IfBlend::new(model_cfg, cfg.seed)?;
        Self::from_model(model, loss_cfg, cfg, dataset_len)
    }

    pub fn from_model(model: IfBlend<f32>, loss_cfg: &LossConfig, cfg: &TrainConfig, dataset_len: usize) -> Result<Self> {
        cfg.validate(model.config())?;
        loss_cfg.validate()?;
        if dataset_len == 0 {
            return Err(Error::Validation("training dataset is empty".into()));
        }
        retain_freed_memory();
        let opt = Adam::new(model.store());
        Ok(Trainer {
            model,
            loss_cfg: loss_cfg.clone(),
            cfg: cfg.clone(),
            opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a),
            order: Vec::new(),
            cursor: 0,
            step: 0,
            total: cfg.total_steps(dataset_len),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total
    }

    /// Next batch of sample indices; reshuffles at each epoch boundary.
    fn next_indices(&mut self, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size.min(len) {
            if self.cursor >= self.order.len() {
                self.order = (0..len).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
                if !out.is_empty() {
                    break;
                }
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Draws the next `(ids, inputs, targets)` batch.
    pub fn next_batch(&mut self, data: &dyn Dataset) -> Result<(Vec<String>, Tensor, Tensor)> {
        let idx = self.next_indices(data.len());
        let mut ids = Vec::with_capacity(idx.len());
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for i in idx {
            let s = data.get(i)?;
            let (h, w) = s.dims();
            let size = self.cfg.patch_size.min(h).min(w);
            let p = sample_patch(&s, size, &mut self.rng, self.cfg.flip)?;
            ids.push(p.meta.scene_id);
            xs.push(p.input);
            ys.push(p.gt);
        }
        Ok((ids, Tensor::stack_batch(&xs)?, Tensor::stack_batch(&ys)?))
    }

    /// One Adam step. A non-finite loss aborts before touching parameters.
    pub fn step(&mut self, data: &dyn Dataset) -> Result<StepLog> {
        let (ids, x, y) = self.next_batch(data)?;
        self.step_on(ids, x, y)
    }

    pub fn step_on(&mut self, batch_ids: Vec<String>, x: Tensor, y: Tensor) -> Result<StepLog> {
        let lr = self.cfg.lr_at(self.step, self.total);
        let seed = self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(self.step as u64);
        let mut g = Tape::<f32>::new(true, seed);
        let xv = g.input(x, false);
        let out = self.model.forward(&mut g, xv)?;
        let tv = g.constant(y);
        let parts = loss_var(&mut g, out, tv, &self.loss_cfg)?;
        let scalar = |v| g.value(v).data()[0] as f64;
        let log = StepLog {
            step: self.step + 1,
            loss: scalar(parts.total),
            l1: scalar(parts.l1),
            ssim_term: parts.ssim_term.map_or(0.0, scalar),
            lr,
            batch_ids,
        };
        if !log.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: log.step, batch_ids: log.batch_ids });
        }
        let grads = g.backward(parts.total)?;
        let updates = g.take_buffer_updates();
        self.model.apply_buffer_updates(&updates);
        self.opt.step(self.model.store_mut(), &grads, lr);
        self.step += 1;
        Ok(log)
    }
}

/// Mean PSNR of the model (evaluation mode, whole images) over a dataset.
/// Perfect reconstructions are skipped unless every image is perfect.
pub fn mean_psnr(model: &IfBlend<f32>, data: &dyn Dataset) -> Result<f64> {
    let mut vals = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let s = data.get(i)?;
        vals.push(psnr(&model.infer(&s.input)?, &s.gt, 1.0)?);
    }
    Ok(mean_excluding_nonfinite(&vals).0)
}

/// Mean training objective over a dataset with the model in inference mode
/// (dropout off, running BN statistics).
pub fn mean_loss(model: &IfBlend<f32>, data: &dyn Dataset, loss_cfg: &LossConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Validation("cannot average a loss over an empty dataset".into()));
    }
    let mut total = 0.0;
    for i in 0..data.len() {
        let s = data.get(i)?;
        total += loss(&model.infer(&s.input)?, &s.gt, loss_cfg)?;
    }
    Ok(total / data.len() as f64)
}

fn mean_excluding_nonfinite(vals: &[f64]) -> (f64, usize, usize) {
    let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
    let excluded = vals.len() - finite.len();
    if finite.is_empty() {
        let all_inf = !vals.is_empty() && vals.iter().all(|v| *v == f64::INFINITY);
        return (if all_inf { f64::INFINITY } else { f64::NAN }, 0, excluded);
    }
    (finite.iter().sum::<f64>() / finite.len() as f64, finite.len(), excluded)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub steps: usize,
    pub final_loss: f64,
    pub best_val_psnr: f64,
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    batch_ids: &'a [String],
    last_good_checkpoint: &'a Path,
}

/// Full training run writing into `run_dir`: `metrics.csv`, periodic
/// `step_NNNNNN.ckpt`, `last.ckpt`, and `best.ckpt` chosen by validation PSNR
/// (on the training set when no validation set is given).
pub fn train(
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    train_data: &dyn Dataset,
    val_data: Option<&dyn Dataset>,
    run_dir: &Path,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model_cfg, loss_cfg, cfg, train_data.len())?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    let last = run_dir.join("last.ckpt");
    let best = run_dir.join("best.ckpt");
    checkpoint::save(&last, &trainer.model, 0)?;
    let val = val_data.filter(|d| !d.is_empty()).unwrap_or(train_data);
    let total = trainer.total_steps();
    let val_every = if cfg.val_every > 0 { cfg.val_every } else { cfg.steps_per_epoch(train_data.len()) };
    let mut best_psnr = f64::NEG_INFINITY;
    let mut final_loss = f64::NAN;
    for _ in 0..total {
        let log = match trainer.step(train_data) {
            Ok(l) => l,
            Err(Error::NonFiniteLoss { step, batch_ids }) => {
                let dump = NanDump { step, batch_ids: &batch_ids, last_good_checkpoint: &last };
                let path = run_dir.join("nan_dump.json");
                let text = serde_json::to_string_pretty(&dump).expect("plain struct");
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                log::error!("non-finite loss at step {step}; batch {batch_ids:?}; see {}", path.display());
                return Err(Error::NonFiniteLoss { step, batch_ids });
            }
            Err(e) => return Err(e),
        };
        writeln!(metrics, "{}", log.csv_line()).map_err(|e| Error::io(&metrics_path, e))?;
        final_loss = log.loss;
        let step = log.step;
        if step % 50 == 0 || step == 1 {
            log::info!("step {step}/{total} loss {:.5} lr {:.3e}", log.loss, log.lr);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            checkpoint::save(&run_dir.join(format!("step_{step:06}.ckpt")), &trainer.model, step)?;
            checkpoint::save(&last, &trainer.model, step)?;
        }
        if step % val_every == 0 || step == total {
            let p = mean_psnr(&trainer.model, val)?;
            log::info!("step {step}: validation PSNR {p:.3} dB");
            if p > best_psnr || !best.exists() {
                best_psnr = p;
                checkpoint::save(&best, &trainer.model, step)?;
            }
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    checkpoint::save(&last, &trainer.model, total)?;
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        final_checkpoint: last,
        best_checkpoint: best,
        metrics_csv: metrics_path,
        steps: total,
        final_loss,
        best_val_psnr: best_psnr,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// PSNR and SSIM (plus the perceptual score when configured).
    #[default]
    Rgb,
    /// Adds masked Lab-space errors; every pair needs a mask.
    LabIstd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub tile: usize,
    pub overlap: usize,
}

/// What produces the restored images.
#[derive(Clone, Copy)]
pub enum Restorer<'a> {
    /// Scores the unprocessed inputs.
    Identity,
    Model(&'a IfBlend<f32>),
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub protocol: Protocol,
    pub lab_mode: LabErrorMode,
    pub tile: Option<TileSpec>,
    pub perceptual: PerceptualScorer,
    pub ssim: LossConfig,
    /// Recorded in the report, e.g. `identity` or a checkpoint path.
    pub model_label: String,
}

/// Non-finite metric values serialize as the strings `inf`, `-inf`, `nan`.
mod float_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "nan" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(E::custom(format!("bad metric value `{t}`"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.map(to_repr).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    #[serde(with = "float_repr")]
    pub psnr: f64,
    #[serde(with = "float_repr")]
    pub ssim: f64,
    #[serde(with = "float_repr::opt", default, skip_serializing_if = "Option::is_none")]
    pub lab_shadow: Option<f64>,
    #[serde(with = "float_repr::opt", default, skip_serializing_if = "Option::is_none")]
    pub lab_free: Option<f64>,
    #[serde(with = "float_repr::opt", default, skip_serializing_if = "Option::is_none")]
    pub lab_total: Option<f64>,
    #[serde(with = "float_repr::opt", default, skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<f64>,
}

impl EvalRow {
    /// Metric values in column order; `None` for columns the row lacks.
    pub fn values(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("psnr", Some(self.psnr)),
            ("ssim", Some(self.ssim)),
            ("lab_shadow", self.lab_shadow),
            ("lab_free", self.lab_free),
            ("lab_total", self.lab_total),
            ("perceptual", self.perceptual),
        ]
    }
}

/// Mean of one column over rows with a finite value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "float_repr")]
    pub mean: f64,
    pub count: usize,
    /// Rows whose value was a sentinel, NaN or unavailable.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRecord {
    pub protocol: Protocol,
    pub model: String,
    /// Images are scored at their stored resolution.
    pub resolution: String,
    pub lab_mode: Option<LabErrorMode>,
    pub tile: Option<TileSpec>,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub perceptual_scorer: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub protocol: ProtocolRecord,
}

impl EvalReport {
    pub fn columns(&self) -> Vec<&'static str> {
        let mut cols = vec!["psnr", "ssim"];
        if self.protocol.protocol == Protocol::LabIstd {
            cols.extend(["lab_shadow", "lab_free", "lab_total"]);
        }
        if self.protocol.perceptual_scorer.is_some() {
            cols.push("perceptual");
        }
        cols
    }

    fn aggregate(rows: &[EvalRow], col: &str) -> Aggregate {
        let vals: Vec<f64> = rows
            .iter()
            .map(|r| r.values().iter().find(|(n, _)| *n == col).and_then(|(_, v)| *v).unwrap_or(f64::NAN))
            .collect();
        let (mean, count, excluded) = mean_excluding_nonfinite(&vals);
        Aggregate { mean, count, excluded }
    }

    pub fn new(rows: Vec<EvalRow>, protocol: ProtocolRecord) -> Self {
        let mut report = EvalReport { rows, aggregates: BTreeMap::new(), protocol };
        for col in report.columns() {
            let agg = Self::aggregate(&report.rows, col);
            report.aggregates.insert(col.to_string(), agg);
        }
        report
    }

    /// One row per image plus a final `mean` row.
    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let mut out = String::from("id");
        for c in &cols {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            out.push_str(&r.id.replace(',', "_"));
            let vals = r.values();
            for c in &cols {
                let v = vals.iter().find(|(n, _)| n == c).and_then(|(_, v)| *v);
                let _ = write!(out, ",{}", fmt(v));
            }
            out.push('\n');
        }
        out.push_str("mean");
        for c in &cols {
            let _ = write!(out, ",{}", fmt(self.aggregates.get(*c).map(|a| a.mean)));
        }
        out.push('\n');
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (csv, json) = (dir.join("report.csv"), dir.join("report.json"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        Ok((csv, json))
    }
}

/// Scores `restorer` on every pair of `data`.
pub fn evaluate(restorer: Restorer<'_>, data: &dyn Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    opts.ssim.validate()?;
    if opts.protocol == Protocol::LabIstd {
        let missing: Vec<String> = (0..data.len()).filter(|&i| !data.has_mask(i)).map(|i| data.id(i)).collect();
        if !missing.is_empty() {
            return Err(Error::Protocol(format!(
                "lab_istd protocol needs shadow masks; {} pair(s) have none (first: {})",
                missing.len(),
                missing[0]
            )));
        }
    }
    if let (Restorer::Model(m), Some(t)) = (restorer, opts.tile) {
        validate_tiling(m, t.tile, t.overlap)?;
    }
    let scratch = std::env::temp_dir().join(format!("ifblend-eval-{}", std::process::id()));
    let mut rows = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let s = data.get(i)?;
        let pred = match restorer {
            Restorer::Identity => s.input.clone(),
            Restorer::Model(m) => match opts.tile {
                Some(t) => infer_tiled(m, &s.input, t.tile, t.overlap)?,
                None => m.infer(&s.input)?,
            },
        };
        let mut row = EvalRow {
            id: s.id().to_string(),
            psnr: psnr(&pred, &s.gt, 1.0)?,
            ssim: ssim(&pred, &s.gt, &opts.ssim)?,
            lab_shadow: None,
            lab_free: None,
            lab_total: None,
            perceptual: None,
        };
        if opts.protocol == Protocol::LabIstd {
            let mask = s.mask.as_ref().expect("checked above");
            let r = lab_region_error(&pred, &s.gt, mask, opts.lab_mode)?;
            row.lab_shadow = Some(r.shadow);
            row.lab_free = Some(r.shadow_free);
            row.lab_total = Some(r.total);
        }
        if opts.perceptual.is_configured() {
            let (pp, gp) = (scratch.join(format!("{i}_pred.png")), scratch.join(format!("{i}_gt.png")));
            save_png(&pp, &pred, BitDepth::Sixteen)?;
            save_png(&gp, &s.gt, BitDepth::Sixteen)?;
            row.perceptual = opts.perceptual.score(&pp, &gp);
            let _ = fs::remove_file(&pp);
            let _ = fs::remove_file(&gp);
        }
        rows.push(row);
    }
    let _ = fs::remove_dir(&scratch);
    let protocol = ProtocolRecord {
        protocol: opts.protocol,
        model: opts.model_label.clone(),
        resolution: "native".into(),
        lab_mode: (opts.protocol == Protocol::LabIstd).then_some(opts.lab_mode),
        tile: opts.tile,
        ssim_window: opts.ssim.ssim_window,
        ssim_sigma: opts.ssim.ssim_sigma,
        perceptual_scorer: opts.perceptual.cmd.clone(),
    };
    Ok(EvalReport::new(rows, protocol))
}

/// Checks that `tile` and `overlap` suit the model.
pub fn validate_tiling(model: &IfBlend<f32>, tile: usize, overlap: usize) -> Result<()> {
    let m = model.config().size_multiple();
    if tile == 0 || tile % m != 0 {
        return Err(Error::Config(format!("tile {tile} must be a positive multiple of {m}")));
    }
    if 2 * overlap >= tile {
        return Err(Error::Config(format!("overlap {overlap} must be below half the tile ({tile})")));
    }
    Ok(())
}

/// Tile origins along one axis: stride `tile - overlap`, with the last tile
/// flush against the far edge.
pub fn tile_starts(dim: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if tile >= dim {
        return vec![0];
    }
    let stride = (tile - overlap).max(1);
    let mut starts = vec![0];
    while starts[starts.len() - 1] + tile < dim {
        let next = (starts[starts.len() - 1] + stride).min(dim - tile);
        starts.push(next);
    }
    starts
}

/// Feathering weight of position `x` inside a tile `[a, a + len)` on an axis
/// of length `dim`: linear ramps over `overlap` pixels, except at image edges.
fn ramp(x: usize, a: usize, len: usize, dim: usize, overlap: usize) -> f64 {
    if overlap == 0 {
        return 1.0;
    }
    let ov = overlap as f64;
    let left = if a > 0 { ((x - a) as f64 + 0.5) / ov } else { 1.0 };
    let right = if a + len < dim { ((a + len - x) as f64 - 0.5) / ov } else { 1.0 };
    left.min(right).min(1.0)
}

/// Normalized per-tile weights along one axis: `(start, len, weights)`.
fn axis_weights(dim: usize, tile: usize, overlap: usize) -> Vec<(usize, usize, Vec<f64>)> {
    let len = tile.min(dim);
    let starts = tile_starts(dim, tile, overlap);
    let mut total = vec![0.0f64; dim];
    let raw: Vec<Vec<f64>> = starts
        .iter()
        .map(|&a| {
            let w: Vec<f64> = (a..a + len).map(|x| ramp(x, a, len, dim, overlap)).collect();
            for (i, v) in w.iter().enumerate() {
                total[a + i] += v;
            }
            w
        })
        .collect();
    starts
        .into_iter()
        .zip(raw)
        .map(|(a, w)| (a, len, w.into_iter().enumerate().map(|(i, v)| v / total[a + i]).collect()))
        .collect()
}

/// Sum over tiles of the blending weights at every pixel; a partition of
/// unity makes this 1 everywhere.
pub fn tile_weight_sum(h: usize, w: usize, tile: usize, overlap: usize) -> Vec<f64> {
    let mut sum = vec![0.0; h * w];
    for (ya, yl, wy) in axis_weights(h, tile, overlap) {
        for (xa, xl, wx) in axis_weights(w, tile, overlap) {
            for y in 0..yl {
                for x in 0..xl {
                    sum[(ya + y) * w + xa + x] += wy[y] * wx[x];
                }
            }
        }
    }
    sum
}

/// Restores `image` tile by tile and feathers the overlaps. When one tile
/// covers the whole image this is exactly the direct forward pass.
pub fn infer_tiled(model: &IfBlend<f32>, image: &Tensor, tile: usize, overlap: usize) -> Result<Tensor> {
    validate_tiling(model, tile, overlap)?;
    let [n, c, h, w] = image.shape();
    if tile >= h && tile >= w {
        return model.infer(image);
    }
    let mut acc = vec![0.0f64; n * c * h * w];
    for (ya, yl, wy) in axis_weights(h, tile, overlap) {
        for (xa, xl, wx) in axis_weights(w, tile, overlap) {
            let out = model.infer(&image.crop(ya, xa, yl, xl)?)?;
            for s in 0..n {
                for ch in 0..c {
                    let plane = out.plane(s, ch);
                    let base = (s * c + ch) * h * w;
                    for y in 0..yl {
                        for x in 0..xl {
                            acc[base + (ya + y) * w + xa + x] += wy[y] * wx[x] * plane[y * xl + x] as f64;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec([n, c, h, w], acc.into_iter().map(|v| v as f32).collect())
}
