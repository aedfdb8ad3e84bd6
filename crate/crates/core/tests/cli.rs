use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use abov::io::checkpoint::load_checkpoint;
use abov::io::frames::{encode_flt1, read_flt1, write_flt1};
use abov::model::AdaBovDenoiser;
use abov::tensor::Tensor;

fn abov(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abov")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_cfg(dir: &Path) -> PathBuf {
    let cfg = dir.join("small.cfg");
    fs::write(&cfg, "frame_h = 8\nframe_w = 8\nhidden = 16\ndepth = 1\nheads = 2\nwindow = 4\nvideo_len = 16\n")
        .unwrap();
    cfg
}

/// Parse a one-row CSV into (header, value) pairs.
fn csv_row(text: &str) -> Vec<(String, String)> {
    let mut lines = text.lines();
    let head = lines.next().unwrap().split(',').map(str::to_string);
    let vals = lines.next().unwrap().split(',').map(str::to_string);
    head.zip(vals).collect()
}

fn field(row: &[(String, String)], key: &str) -> f64 {
    row.iter().find(|(k, _)| k == key).unwrap_or_else(|| panic!("no {key}")).1.parse().unwrap()
}

fn flt1_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "flt1"))
        .collect();
    v.sort();
    v
}

#[test]
fn train_with_zero_lr_keeps_init() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    let o =
        abov(&["train", "--config", p(&cfg), "--steps", "1", "--lr", "0", "--seed", "9", "--quiet", "--out", p(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let loaded = load_checkpoint(&ckpt).unwrap();
    let init = AdaBovDenoiser::<f32>::new(*loaded.config(), 9).unwrap();
    assert_eq!(loaded.params().len(), init.params().len());
    for ((na, a), (nb, b)) in loaded.params().iter().zip(init.params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.data(), b.data(), "{na}");
    }
    let loss = fs::read_to_string(dir.path().join("m.ckpt.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2);
    assert!(loss.starts_with("step,loss\n1,"));
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = abov(&["train", "--config", p(&dir.path().join("nope.cfg")), "--out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(code(&o), 2);
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "colour = red\n").unwrap();
    assert_eq!(code(&abov(&["train", "--config", p(&bad), "--out", p(&dir.path().join("m.ckpt"))])), 2);
}

#[test]
fn oracle_sample_writes_frames_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = abov(&["sample", "--oracle", "--frames", "4", "--n", "2", "--L", "3", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files = flt1_files(&out);
    assert_eq!(files.len(), 4);
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, f) in rows.iter().zip(&files) {
        let (idx, crc) = row.split_once(',').unwrap();
        let bytes = fs::read(f).unwrap();
        assert_eq!(crc, format!("{:08x}", crc32fast::hash(&bytes)));
        assert!(f.file_name().unwrap().to_str().unwrap().contains(&format!("{:05}", idx.parse::<usize>().unwrap())));
    }
    assert!(out.join("metrics.csv").exists());
    let run = fs::read_to_string(out.join("run.cfg")).unwrap();
    assert!(run.contains("# denoiser: oracle"));
}

#[test]
fn pgm_export() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o =
        abov(&["sample", "--oracle", "--frames", "2", "--L", "2", "--n", "1", "--export", "both", "--out", p(&out)]);
    assert!(o.status.success());
    let pgm = fs::read(out.join("frame_00001.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(flt1_files(&out).len(), 2);
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    assert!(abov(&["train", "--config", p(&cfg), "--steps", "1", "--quiet", "--out", p(&ckpt)]).status.success());
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x5a;
    fs::write(&ckpt, &bytes).unwrap();
    let o = abov(&["sample", "--ckpt", p(&ckpt), "--frames", "1", "--out", p(&dir.path().join("s"))]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    assert_eq!(code(&abov(&["sample", "--ckpt", p(&ckpt), "--frames", "1", "--out", p(&dir.path().join("s"))])), 4);
}

#[test]
fn eval_rejects_empty_or_missing_dirs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&abov(&["eval", "--frames", p(dir.path())])), 2);
    assert_eq!(code(&abov(&["eval", "--frames", p(&dir.path().join("missing"))])), 2);
}

#[test]
fn eval_of_constant_frames() {
    let dir = tempfile::tempdir().unwrap();
    for i in 1..=5 {
        write_flt1(dir.path().join(format!("frame_{i:05}.flt1")), &Tensor::full(&[1, 4, 4], 0.25f32)).unwrap();
    }
    let o = abov(&["eval", "--frames", p(dir.path())]);
    assert!(o.status.success());
    let row = csv_row(&String::from_utf8(o.stdout).unwrap());
    assert_eq!(field(&row, "frames"), 5.0);
    assert!((field(&row, "consistency") - 1.0).abs() < 1e-9);
    assert_eq!(field(&row, "dynamic_degree"), 0.0);
}

fn oracle_variance(dir: &Path, n: usize) -> (f64, f64) {
    let out = dir.join(format!("n{n}"));
    let o = abov(&["sample", "--oracle", "--frames", "40", "--L", "4", "--n", &n.to_string(), "--out", p(&out)]);
    assert!(o.status.success());
    let row = csv_row(&fs::read_to_string(out.join("metrics.csv")).unwrap());
    (field(&row, "variance"), field(&row, "predicted_variance"))
}

#[test]
fn more_substeps_recover_unit_variance() {
    let dir = tempfile::tempdir().unwrap();
    let (v1, p1) = oracle_variance(dir.path(), 1);
    let (v8, p8) = oracle_variance(dir.path(), 8);
    assert!((1.0 - v8).abs() < (1.0 - v1).abs(), "{v1} {v8}");
    assert!(p1 < p8 && p8 < 1.0);
    assert!((v1 / p1 - 1.0).abs() < 0.05 && (v8 / p8 - 1.0).abs() < 0.05, "{v1}/{p1} {v8}/{p8}");
}

#[test]
fn eval_oracle_stats_matches_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    assert!(abov(&["sample", "--oracle", "--frames", "60", "--L", "8", "--n", "8", "--out", p(&out)]).status.success());
    let o = abov(&["eval", "--frames", p(&out), "--oracle-stats"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let row = csv_row(&String::from_utf8(o.stdout).unwrap());
    assert_eq!(field(&row, "frames"), 60.0 - 8.0);
    let (v, pred) = (field(&row, "variance"), field(&row, "predicted_variance"));
    assert!((v / pred - 1.0).abs() < 0.05, "{v} vs {pred}");
}

#[test]
fn bench_reports_one_eval_per_substep() {
    let o = abov(&["bench", "--L", "2,3", "--n", "1,3", "--frames", "2", "--repeats", "1"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "L,n,seconds_per_frame,evals_per_frame");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert_eq!(r[1], r[3]);
        assert!(r[2].parse::<f64>().unwrap() > 0.0);
    }
}

#[test]
fn gradcheck_passes() {
    let o = abov(&["gradcheck", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("max_rel_error = "));
}

#[test]
fn conditioning_from_directory_and_stacked_file() {
    let dir = tempfile::tempdir().unwrap();
    let cond_dir = dir.path().join("cond");
    fs::create_dir(&cond_dir).unwrap();
    let frames: Vec<Tensor<f32>> = (0..4)
        .map(|i| {
            Tensor::from_vec(vec![1, 16, 16], (0..256).map(|j| ((i * 256 + j) as f32 * 0.01).sin()).collect()).unwrap()
        })
        .collect();
    for (i, f) in frames.iter().enumerate() {
        write_flt1(cond_dir.join(format!("frame_{i:05}.flt1")), f).unwrap();
    }
    let stacked =
        Tensor::from_vec(vec![4, 1, 16, 16], frames.iter().flat_map(|f| f.data().to_vec()).collect()).unwrap();
    let stacked_path = dir.path().join("cond.flt1");
    fs::write(&stacked_path, encode_flt1(&stacked)).unwrap();

    let run = |cond: &Path, out: &str| {
        let out = dir.path().join(out);
        let o =
            abov(&["sample", "--oracle", "--L", "3", "--n", "2", "--frames", "3", "--cond", p(cond), "--out", p(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        flt1_files(&out).iter().map(|f| read_flt1(f).unwrap().data().to_vec()).collect::<Vec<_>>()
    };
    let a = run(&cond_dir, "a");
    let b = run(&stacked_path, "b");
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);

    // too few conditioning frames for the window
    let o = abov(&["sample", "--oracle", "--L", "5", "--cond", p(&cond_dir), "--out", p(&dir.path().join("c"))]);
    assert_ne!(code(&o), 0);
}

#[test]
fn self_start_and_bad_window() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = abov(&["sample", "--oracle", "--self-start", "--L", "3", "--frames", "2", "--out", p(&out)]);
    assert!(o.status.success());
    assert_eq!(flt1_files(&out).len(), 2);
    assert_eq!(code(&abov(&["sample", "--oracle", "--L", "0", "--out", p(&out)])), 2);
    assert_eq!(code(&abov(&["sample", "--out", p(&out)])), 2);
    assert_eq!(code(&abov(&["frobnicate"])), 2);
}

// about two minutes in release mode; run with `cargo test --test cli -- --ignored`
#[test]
#[ignore]
fn default_toy_run_learns() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("toy.ckpt");
    assert!(abov(&["train", "--quiet", "--out", p(&ckpt)]).status.success());
    let loss = fs::read_to_string(dir.path().join("toy.ckpt.loss.csv")).unwrap();
    let vals: Vec<f64> = loss.lines().skip(1).map(|l| l.split_once(',').unwrap().1.parse().unwrap()).collect();
    assert_eq!(vals.len(), 500);
    assert!(vals[499] < vals[0], "{} -> {}", vals[0], vals[499]);
}
