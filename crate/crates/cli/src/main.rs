mod config;
mod grid;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ifblend::data::{
    audit_pairs, load_rgb, read_dataset, save_png, synthetic_set, AuditRow, BitDepth, Dataset, PairDescriptor,
};
use ifblend::engine::{self, EvalOptions, Restorer, TileSpec};
use ifblend::losses_metrics::PerceptualScorer;
use ifblend::{checkpoint, IfBlend};
use serde::Serialize;
use toml::Value;

use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "ifblend", version, about = "Ambient lighting normalization: train, evaluate and run the frequency-band model")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run config with dotted keys such as `train.lr = 2e-4`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` applied after the config file and IFBLEND_* variables.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for training or synthetic generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Request deterministic execution.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints and metrics into a run directory.
    Train {
        /// Run directory; defaults to a timestamped folder under `output.runs_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint, or the unprocessed inputs, on a dataset split.
    Eval {
        /// Checkpoint file, or `identity` to score the inputs as they are.
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        layout: Option<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore one PNG or every PNG in a directory.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Generate synthetic shadowed pairs as input/, gt/, mask/ and meta/.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        size: Option<usize>,
        /// Write under `<out>/<split>/` so the tree reads as a dataset split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Compose labeled side-by-side comparison images, one per shared stem.
    Grid {
        /// `label=dir`, repeated in column order.
        #[arg(long = "column", value_name = "LABEL=DIR", required = true)]
        columns: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check pairs for size mismatch, brightness inversion and misalignment.
    Audit {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        layout: Option<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn quoted(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

fn path_str(p: &Path) -> String {
    quoted(&p.to_string_lossy())
}

/// Flags that map onto config keys, applied after `--override`.
fn flag_overrides(cli: &Cli) -> Vec<String> {
    let mut o = Vec::new();
    let c = &cli.common;
    if c.deterministic {
        o.push("train.deterministic=true".into());
    }
    match &cli.cmd {
        Cmd::Train { .. } => {
            if let Some(s) = c.seed {
                o.push(format!("train.seed={s}"));
            }
        }
        Cmd::Eval { data, layout, split, protocol, .. } => {
            if let Some(d) = data {
                o.push(format!("data.root={}", path_str(d)));
            }
            if let Some(l) = layout {
                o.push(format!("data.layout={}", quoted(l)));
            }
            if let Some(s) = split {
                o.push(format!("data.eval_split={}", quoted(s)));
            }
            if let Some(p) = protocol {
                o.push(format!("eval.protocol={}", quoted(p)));
            }
        }
        Cmd::Infer { tile, overlap, .. } => {
            if let Some(t) = tile {
                o.push(format!("eval.tile={t}"));
            }
            if let Some(v) = overlap {
                o.push(format!("eval.overlap={v}"));
            }
        }
        Cmd::Synth { size, .. } => {
            if let Some(s) = c.seed {
                o.push(format!("data.synthetic_seed={s}"));
            }
            if let Some(s) = size {
                o.push(format!("data.synthetic_size={s}"));
            }
        }
        Cmd::Audit { data, layout, split, .. } => {
            if let Some(d) = data {
                o.push(format!("data.root={}", path_str(d)));
            }
            if let Some(l) = layout {
                o.push(format!("data.layout={}", quoted(l)));
            }
            if let Some(s) = split {
                o.push(format!("data.eval_split={}", quoted(s)));
            }
        }
        Cmd::Grid { .. } => {}
    }
    o
}

fn validation(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(ConfigError(msg.into()))
}

fn data_root(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.data.root.is_empty() {
        return Err(validation("no dataset given (set data.root or pass --data)"));
    }
    Ok(PathBuf::from(&cfg.data.root))
}

fn timestamped_dir(parent: &Path, prefix: &str) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    let mut dir = parent.join(format!("{prefix}-{stamp}"));
    let mut n = 1;
    while dir.exists() {
        dir = parent.join(format!("{prefix}-{stamp}-{n}"));
        n += 1;
    }
    dir
}

fn load_model(path: &Path) -> Result<IfBlend<f32>> {
    if !path.is_file() {
        return Err(validation(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(checkpoint::load(path)?.0)
}

fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let run_dir = match out {
        Some(d) => d.to_path_buf(),
        None => timestamped_dir(Path::new(&cfg.output.runs_dir), "train"),
    };
    cfg.echo_into(&run_dir)?;
    let outcome = if cfg.data.synthetic_count > 0 {
        let d = &cfg.data;
        let train = synthetic_set(d.synthetic_count, d.synthetic_size, d.synthetic_seed)?;
        engine::train(&cfg.model, &cfg.loss, &cfg.train, &train, None, &run_dir)?
    } else {
        let root = data_root(cfg)?;
        let train = read_dataset(&root, cfg.data.layout, cfg.data.train_split)?;
        let val = read_dataset(&root, cfg.data.layout, cfg.data.val_split)?;
        let val_ref: Option<&dyn Dataset> = if val.is_empty() { None } else { Some(&val) };
        engine::train(&cfg.model, &cfg.loss, &cfg.train, &train, val_ref, &run_dir)?
    };
    println!(
        "trained {} steps; final loss {:.6}; best validation PSNR {:.3} dB; run dir {}",
        outcome.steps,
        outcome.final_loss,
        outcome.best_val_psnr,
        outcome.run_dir.display()
    );
    Ok(())
}

fn tile_spec(cfg: &RunConfig) -> Option<TileSpec> {
    (cfg.eval.tile > 0).then_some(TileSpec { tile: cfg.eval.tile, overlap: cfg.eval.overlap })
}

fn cmd_eval(cfg: &RunConfig, model: &str, out: &Path) -> Result<()> {
    let root = data_root(cfg)?;
    let data = read_dataset(&root, cfg.data.layout, cfg.data.eval_split)?;
    let loaded = if model == "identity" { None } else { Some(load_model(Path::new(model))?) };
    let restorer = loaded.as_ref().map_or(Restorer::Identity, Restorer::Model);
    let opts = EvalOptions {
        protocol: cfg.eval.protocol,
        lab_mode: cfg.eval.lab_mode,
        tile: tile_spec(cfg),
        perceptual: PerceptualScorer::new((!cfg.eval.perceptual_cmd.is_empty()).then(|| cfg.eval.perceptual_cmd.clone())),
        ssim: cfg.loss.clone(),
        model_label: model.to_string(),
    };
    let report = engine::evaluate(restorer, &data, &opts)?;
    cfg.echo_into(out)?;
    let (csv, json) = report.write(out)?;
    for (name, agg) in &report.aggregates {
        println!("{name}: {:.6} over {} image(s), {} excluded", agg.mean, agg.count, agg.excluded);
    }
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn png_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(validation(format!("input {} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_infer(cfg: &RunConfig, model: &Path, input: &Path, out: &Path) -> Result<()> {
    let net = load_model(model)?;
    let files = png_files(input)?;
    if files.is_empty() {
        return Err(validation(format!("no PNG files in {}", input.display())));
    }
    if let Some(t) = tile_spec(cfg) {
        engine::validate_tiling(&net, t.tile, t.overlap)?;
    }
    cfg.echo_into(out)?;
    let mut ok = 0;
    for f in &files {
        let restored = load_rgb(f).and_then(|(img, depth)| {
            let y = match tile_spec(cfg) {
                Some(t) => engine::infer_tiled(&net, &img, t.tile, t.overlap)?,
                None => net.infer(&img)?,
            };
            save_png(&out.join(f.file_name().expect("file path")), &y, depth)
        });
        match restored {
            Ok(()) => ok += 1,
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    println!("restored {ok} of {} image(s) into {}", files.len(), out.display());
    if ok == 0 {
        bail!("every input failed");
    }
    Ok(())
}

#[derive(Serialize)]
struct MetaOut<'a> {
    scene_id: &'a str,
    lights: Option<&'a str>,
}

fn cmd_synth(cfg: &RunConfig, out: &Path, count: usize, split: Option<&str>) -> Result<()> {
    let base = match split {
        Some(s) => out.join(s.parse::<ifblend::data::Split>()?.dir_name()),
        None => out.to_path_buf(),
    };
    let d = &cfg.data;
    let set = synthetic_set(count, d.synthetic_size, d.synthetic_seed)?;
    for sub in ["input", "gt", "mask", "meta"] {
        std::fs::create_dir_all(base.join(sub)).with_context(|| format!("creating {}", base.join(sub).display()))?;
    }
    for s in &set {
        let name = format!("{}.png", s.id());
        save_png(&base.join("input").join(&name), &s.input, BitDepth::Eight)?;
        save_png(&base.join("gt").join(&name), &s.gt, BitDepth::Eight)?;
        if let Some(m) = &s.mask {
            save_png(&base.join("mask").join(&name), m, BitDepth::Eight)?;
        }
        let meta = MetaOut { scene_id: s.id(), lights: s.meta.lights.as_deref() };
        let path = base.join("meta").join(format!("{}.json", s.id()));
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).with_context(|| format!("writing {}", path.display()))?;
    }
    cfg.echo_into(out)?;
    println!("wrote {} synthetic pair(s) of {}x{} to {}", set.len(), d.synthetic_size, d.synthetic_size, base.display());
    Ok(())
}

fn cmd_grid(cfg: &RunConfig, columns: &[String], out: &Path) -> Result<()> {
    let cols = columns
        .iter()
        .map(|c| {
            let (label, dir) = c.split_once('=').ok_or_else(|| validation(format!("column `{c}` is not label=dir")))?;
            let dir = PathBuf::from(dir);
            if !dir.is_dir() {
                return Err(validation(format!("column directory {} does not exist", dir.display())));
            }
            Ok((label.to_string(), dir))
        })
        .collect::<Result<Vec<_>>>()?;
    let written = grid::build_grids(&cols, out)?;
    cfg.echo_into(out)?;
    println!("wrote {} grid(s) to {}", written.len(), out.display());
    Ok(())
}

fn cmd_audit(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let root = data_root(cfg)?;
    let pairs: Vec<PairDescriptor> = read_dataset(&root, cfg.data.layout, cfg.data.eval_split)?;
    let rows: Vec<AuditRow> = audit_pairs(&pairs);
    let flagged = rows.iter().filter(|r| r.flagged).count();
    for r in rows.iter().filter(|r| r.flagged) {
        match &r.error {
            Some(e) => println!("{}: {e}", r.id),
            None => println!("{}: shift ({}, {}) px", r.id, r.shift.0, r.shift.1),
        }
    }
    println!("audited {} pair(s); {flagged} flagged", rows.len());
    if let Some(out) = out {
        cfg.echo_into(out)?;
        let mut csv = String::from("id,same_dims,brightness_delta,brighter_fraction,shift_y,shift_x,flagged,error\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.id.replace(',', "_"),
                r.same_dims,
                r.brightness_delta,
                r.brighter_fraction,
                r.shift.0,
                r.shift.1,
                r.flagged,
                r.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
            ));
        }
        std::fs::write(out.join("audit.csv"), csv)?;
        std::fs::write(out.join("audit.json"), serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let mut overrides = cli.common.overrides.clone();
    overrides.extend(flag_overrides(cli));
    let cfg = RunConfig::resolve(cli.common.config.as_deref(), std::env::vars(), &overrides)?;
    match &cli.cmd {
        Cmd::Train { out } => cmd_train(&cfg, out.as_deref()),
        Cmd::Eval { model, out, .. } => cmd_eval(&cfg, model, out),
        Cmd::Infer { model, input, out, .. } => cmd_infer(&cfg, model, input, out),
        Cmd::Synth { out, count, split, .. } => cmd_synth(&cfg, out, *count, split.as_deref()),
        Cmd::Grid { columns, out } => cmd_grid(&cfg, columns, out),
        Cmd::Audit { out, .. } => cmd_audit(&cfg, out.as_deref()),
    }
}

/// 2 for bad configuration or inputs, 3 for failures while running.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<ifblend::Error>() {
            return if err.is_validation() { 2 } else { 3 };
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
