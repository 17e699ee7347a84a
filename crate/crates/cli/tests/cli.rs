use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ifblend::data::{load_rgb, save_png, BitDepth};
use ifblend::Tensor;

const SMALL_MODEL: &[&str] = &[
    "--override",
    "model.stages=2",
    "--override",
    "model.base_channels=4",
    "--override",
    "model.channel_cap=8",
    "--override",
    "model.gcb_depth=1",
    "--override",
    "model.window_size=4",
];

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/overfit.cfg")
}

fn ifblend(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifblend"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("IFBLEND_TRAIN__LR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    v.sort();
    v
}

/// Trains the tiny model for one step and returns the checkpoint.
fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let run = dir.join("run");
    let mut args = vec!["train", "--out", s(&run), "--override", "data.synthetic_count=2", "--override", "data.synthetic_size=16"];
    args.extend(["--override", "train.patch_size=16", "--override", "train.max_steps=1", "--override", "train.batch_size=2"]);
    args.extend(SMALL_MODEL);
    let o = ifblend(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    run.join("last.ckpt")
}

fn ramp(h: usize, w: usize) -> Tensor {
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| ((c * 13 + y * 5 + x * 3) % 40) as f32 / 40.0)
}

#[test]
fn fixture_training_run_writes_best_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = ifblend(&["train", "--config", s(&fixture()), "--out", s(&run), "--override", "train.max_steps=2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["best.ckpt", "last.ckpt", "metrics.csv", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let cfg = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(cfg.contains("synthetic_count = 8"), "{cfg}");
    assert!(cfg.contains("max_steps = 2"), "{cfg}");
}

#[test]
fn runs_default_to_timestamped_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let mut args = vec!["train", "--override", "data.synthetic_count=1", "--override", "data.synthetic_size=16"];
    let runs_kv = format!("output.runs_dir=\"{}\"", s(&runs));
    args.extend(["--override", "train.patch_size=16", "--override", "train.max_steps=1", "--override", &runs_kv]);
    args.extend(SMALL_MODEL);
    let o = ifblend(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dirs: Vec<_> = fs::read_dir(&runs).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].starts_with("train-"), "{dirs:?}");
}

#[test]
fn misspelled_keys_exit_2_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "train.epchs = 3\n").unwrap();
    let o = ifblend(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.epchs"), "{}", stderr(&o));
    let o = ifblend(&["synth", "--out", s(tmp.path()), "--override", "model.stagez=2"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.stagez"));
}

#[test]
fn overrides_and_environment_reach_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--out", s(&run), "--override", "train.lr=0", "--override", "data.synthetic_count=1"];
    args.extend(["--override", "data.synthetic_size=16", "--override", "train.patch_size=16", "--override", "train.max_steps=1"]);
    args.extend(SMALL_MODEL);
    let o = ifblend(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(cfg.contains("lr = 0.0"), "{cfg}");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().ends_with(",0"), "{metrics}");

    let out = tmp.path().join("synth");
    let o = Command::new(env!("CARGO_BIN_EXE_ifblend"))
        .args(["synth", "--out", s(&out), "--count", "1", "--size", "16"])
        .env("IFBLEND_DATA__SYNTHETIC_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(cfg.contains("synthetic_seed = 42"), "{cfg}");
}

#[test]
fn synth_is_deterministic_and_passes_the_audit() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = ifblend(&["synth", "--out", s(dir), "--count", "8", "--size", "64", "--seed", "1", "--split", "test"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let mut count = 0;
    for sub in ["input", "gt", "mask"] {
        let (fa, fb) = (pngs(&a.join("test").join(sub)), pngs(&b.join("test").join(sub)));
        assert_eq!(fa.len(), 8);
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        count += fa.len();
    }
    assert_eq!(count, 24);
    let report = tmp.path().join("audit");
    let o = ifblend(&["audit", "--data", s(&a), "--split", "test", "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("audited 8 pair(s); 0 flagged"));
    assert!(report.join("audit.csv").exists() && report.join("audit.json").exists());
}

#[test]
fn synth_with_zero_count_writes_an_empty_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ifblend(&["synth", "--out", s(tmp.path()), "--count", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for sub in ["input", "gt", "mask"] {
        assert!(tmp.path().join(sub).is_dir());
        assert!(pngs(&tmp.path().join(sub)).is_empty());
    }
}

fn identical_dataset(root: &Path, masks: bool) {
    let base = root.join("test");
    for sub in ["input", "gt"] {
        fs::create_dir_all(base.join(sub)).unwrap();
    }
    for (i, stem) in ["p0", "p1"].iter().enumerate() {
        let img = ramp(24 + 8 * i, 32);
        save_png(&base.join("input").join(format!("{stem}.png")), &img, BitDepth::Eight).unwrap();
        save_png(&base.join("gt").join(format!("{stem}.png")), &img, BitDepth::Eight).unwrap();
        if masks {
            fs::create_dir_all(base.join("mask")).unwrap();
            let m = Tensor::from_fn([1, 1, img.h(), img.w()], |[_, _, y, _]| if y < 8 { 1.0 } else { 0.0 });
            save_png(&base.join("mask").join(format!("{stem}.png")), &m, BitDepth::Eight).unwrap();
        }
    }
}

#[test]
fn identity_eval_on_identical_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    identical_dataset(tmp.path(), false);
    let out = tmp.path().join("eval");
    let o = ifblend(&["eval", "--model", "identity", "--data", s(tmp.path()), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let mean = csv.lines().last().unwrap();
    let fields: Vec<&str> = mean.split(',').collect();
    assert_eq!(fields[0], "mean");
    assert_eq!(fields[2].parse::<f64>().unwrap(), 1.0);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["aggregates"]["ssim"]["mean"].as_f64().unwrap(), 1.0);
    assert_eq!(json["rows"][0]["psnr"], "inf");
    assert!(out.join("config.toml").exists());
}

#[test]
fn csv_and_json_aggregates_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ifblend(&["synth", "--out", s(tmp.path()), "--count", "3", "--size", "32", "--split", "test"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = tmp.path().join("eval");
    let o = ifblend(&["eval", "--model", "identity", "--data", s(tmp.path()), "--protocol", "lab_istd", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    let mean: Vec<&str> = lines.last().unwrap().split(',').collect();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(header.len(), 6);
    for (col, v) in header.iter().zip(&mean).skip(1) {
        assert_eq!(v.parse::<f64>().unwrap(), json["aggregates"][col]["mean"].as_f64().unwrap(), "{col}");
    }
}

#[test]
fn lab_protocol_without_masks_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    identical_dataset(tmp.path(), false);
    let out = tmp.path().join("eval");
    let o = ifblend(&["eval", "--model", "identity", "--data", s(tmp.path()), "--protocol", "lab_istd", "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!out.join("report.csv").exists());
}

#[test]
fn missing_inputs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    assert_eq!(code(&ifblend(&["eval", "--model", "identity", "--out", out])), 2);
    assert_eq!(code(&ifblend(&["eval", "--model", "nope.ckpt", "--data", out, "--out", out])), 2);
    assert_eq!(code(&ifblend(&["infer", "--model", "nope.ckpt", "--input", out, "--out", out])), 2);
    assert_eq!(code(&ifblend(&["bogus"])), 2);
}

#[test]
fn infer_preserves_names_sizes_and_depth() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(tmp.path());
    let inputs = tmp.path().join("in");
    fs::create_dir_all(&inputs).unwrap();
    save_png(&inputs.join("a.png"), &ramp(64, 64), BitDepth::Eight).unwrap();
    save_png(&inputs.join("b.png"), &ramp(30, 50), BitDepth::Sixteen).unwrap();
    save_png(&inputs.join("c.png"), &ramp(17, 9), BitDepth::Eight).unwrap();

    let single = tmp.path().join("one");
    let o = ifblend(&["infer", "--model", s(&ckpt), "--input", s(&inputs.join("a.png")), "--out", s(&single)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files = pngs(&single);
    assert_eq!(files.len(), 1);
    let (img, depth) = load_rgb(&files[0]).unwrap();
    assert_eq!((img.h(), img.w(), depth), (64, 64, BitDepth::Eight));

    let all = tmp.path().join("all");
    let o = ifblend(&["infer", "--model", s(&ckpt), "--input", s(&inputs), "--out", s(&all), "--tile", "16", "--overlap", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files = pngs(&all);
    assert_eq!(files.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect::<Vec<_>>(), ["a.png", "b.png", "c.png"]);
    let (b, depth) = load_rgb(&all.join("b.png")).unwrap();
    assert_eq!((b.h(), b.w(), depth), (30, 50, BitDepth::Sixteen));

    let broken = tmp.path().join("broken");
    fs::create_dir_all(&broken).unwrap();
    fs::write(broken.join("x.png"), b"not a png").unwrap();
    let o = ifblend(&["infer", "--model", s(&ckpt), "--input", s(&broken), "--out", s(&tmp.path().join("o"))]);
    assert_ne!(code(&o), 0);
}

#[test]
fn grid_layouts() {
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2) = (tmp.path().join("input"), tmp.path().join("gt"));
    for d in [&d1, &d2] {
        fs::create_dir_all(d).unwrap();
        for stem in ["x", "y", "z"] {
            save_png(&d.join(format!("{stem}.png")), &ramp(20, 30), BitDepth::Eight).unwrap();
        }
    }
    let out = tmp.path().join("grids");
    let c1 = format!("input={}", s(&d1));
    let c2 = format!("gt={}", s(&d2));
    let o = ifblend(&["grid", "--column", &c1, "--column", &c2, "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files = pngs(&out);
    assert_eq!(files.len(), 3);
    let (g, _) = load_rgb(&files[0]).unwrap();
    assert!(g.w() > 60 && g.h() > 20, "{:?}", g.shape());

    let sheet = tmp.path().join("sheet");
    let o = ifblend(&["grid", "--column", &c1, "--out", s(&sheet)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (g1, _) = load_rgb(&pngs(&sheet)[0]).unwrap();
    assert_eq!(g1.w(), 30);

    fs::remove_file(d2.join("y.png")).unwrap();
    let o = ifblend(&["grid", "--column", &c1, "--column", &c2, "--out", s(&tmp.path().join("bad"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gt lacks y"), "{}", stderr(&o));
}
