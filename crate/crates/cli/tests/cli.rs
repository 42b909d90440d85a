use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdsam_core::metrics::{read_curves_csv, read_report_csv};

fn mdsam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdsam"))
        .args(args)
        .env_remove("MDSAM_DEVICE")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, count: usize, seed: u64) -> PathBuf {
    let o = mdsam(&["synth", "--out-dir", p(dir), "--count", &count.to_string(), "--size", "64", "--seed", &seed.to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("manifest.toml")
}

fn toy_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "preset = \"toy\"\n{extra}\n[train]\nmax_epochs = 1\nwarmup_epochs = 1\nbatch_size = 2\nlr_new = 1e-3\nlr_pretrained = 1e-4\n"
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn help_documents_every_flag() {
    let o = mdsam(&["--help"]);
    assert!(o.status.success());
    for sub in ["train", "eval", "infer", "ablate", "curves", "params", "synth"] {
        assert!(stdout(&o).contains(sub), "top-level help lacks {sub}");
    }
    let expect: [(&str, &[&str]); 7] = [
        ("train", &["--config", "--manifest", "--out-dir", "--resume", "--resume-from", "--pretrained", "--epochs", "--seed", "--max-steps"]),
        ("eval", &["--pred-dir", "--gt-dir", "--out-csv", "--curves-csv"]),
        ("infer", &["--checkpoint", "--image-dir", "--out-dir", "--resolution"]),
        ("ablate", &["--config", "--out-csv", "--epochs", "--seed"]),
        ("curves", &["--input", "--out-dir"]),
        ("params", &["--config", "--preset"]),
        ("synth", &["--out-dir", "--count", "--size", "--seed", "--split"]),
    ];
    for (sub, flags) in expect {
        let o = mdsam(&[sub, "--help"]);
        assert!(o.status.success());
        let text = stdout(&o);
        for f in flags.iter().chain(&["--device", "--verbose"]) {
            assert!(text.contains(f), "`{sub} --help` lacks {f}");
        }
    }
}

#[test]
fn unknown_flag_and_device_are_usage_errors() {
    assert_eq!(mdsam(&["params", "--bogus"]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_mdsam"))
        .args(["params", "--preset", "toy"])
        .env("MDSAM_DEVICE", "cuda")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("only cpu"));
}

#[test]
fn params_prints_counts() {
    let o = mdsam(&["params", "--preset", "toy"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("total "));
    assert!(text.contains("module lmsa"));

    let o = mdsam(&["params", "--preset", "sam_b"]);
    let text = stdout(&o);
    let total: f64 = text.lines().next().unwrap().split_whitespace().nth(1).unwrap().trim_end_matches('M').parse().unwrap();
    assert!((total - 100.21).abs() / 100.21 <= 0.05, "{text}");
    let lmsa_line = text.lines().find(|l| l.starts_with("module lmsa")).unwrap();
    let lmsa: f64 = lmsa_line.split_whitespace().nth(2).unwrap().trim_end_matches('M').parse().unwrap();
    assert!((lmsa - 7.15).abs() / 7.15 <= 0.03, "{lmsa_line}");
}

#[test]
fn train_resume_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), 4, 1);
    let cfg = toy_config(dir.path(), "");
    let out = dir.path().join("run");
    let o = mdsam(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out-dir", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("epochs 1 steps 2"), "{}", stdout(&o));
    assert!(out.join("latest.ckpt").exists());
    assert!(out.join("loss.csv").exists());
    assert!(out.join("config.toml").exists());

    let o = mdsam(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out-dir", p(&out), "--resume", "--epochs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("epochs 2 steps 4"), "{}", stdout(&o));

    // three readable images and one that is not
    let images = dir.path().join("data/images");
    let inputs = dir.path().join("inputs");
    fs::create_dir_all(&inputs).unwrap();
    for f in fs::read_dir(&images).unwrap().take(3) {
        let f = f.unwrap().path();
        fs::copy(&f, inputs.join(f.file_name().unwrap())).unwrap();
    }
    fs::write(inputs.join("broken.png"), b"not an image").unwrap();
    let masks = dir.path().join("masks_out");
    let ckpt = out.join("latest.ckpt");
    let o = mdsam(&["infer", "--checkpoint", p(&ckpt), "--image-dir", p(&inputs), "--out-dir", p(&masks)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("skipped broken"));
    let mut written: Vec<String> = fs::read_dir(&masks).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    written.sort();
    assert_eq!(written, ["synth_000.png", "synth_001.png", "synth_002.png"]);
    let m = image::open(masks.join("synth_000.png")).unwrap();
    assert_eq!((m.width(), m.height()), (64, 64));

    let o = mdsam(&["infer", "--checkpoint", p(&ckpt), "--image-dir", p(&inputs), "--out-dir", p(&masks), "--resolution", "100"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), 2, 1);
    fs::remove_dir_all(dir.path().join("data/masks")).unwrap();
    let cfg = toy_config(dir.path(), "");
    let out = dir.path().join("run");
    let o = mdsam(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("mask_dir"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "preset = \"toy\"\n[train]\nlr_new = -1.0\n").unwrap();
    let o = mdsam(&["train", "--config", p(&bad), "--out-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lr_new"), "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "[data]\nsynth = { count = 4, seed = 3 }");
    let out = dir.path().join("run");
    let o = mdsam(&["train", "--config", p(&cfg), "--out-dir", p(&out), "--lr-new", "1e300", "--lr-pretrained", "1e300", "--epochs", "3"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

fn write_mask(path: &Path, f: impl Fn(u32, u32) -> u8) {
    image::GrayImage::from_fn(32, 32, |x, y| image::Luma([f(x, y)])).save(path).unwrap();
}

#[test]
fn eval_perfect_mismatched_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    for i in 0..3u32 {
        let m = move |x: u32, y: u32| if x > 4 + i && x < 20 && y > 6 && y < 25 { 255 } else { 0 };
        write_mask(&gt.join(format!("img{i}.png")), m);
        write_mask(&pred.join(format!("img{i}.png")), m);
    }
    let csv = dir.path().join("out/report.csv");
    let o = mdsam(&["eval", "--pred-dir", p(&pred), "--gt-dir", p(&gt), "--out-csv", p(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "0.0000 1.0000 1.0000 1.0000");
    assert!(!stderr(&o).contains("unmatched"));

    let curves_path = dir.path().join("out/report_curves.csv");
    let (curves, hash) = read_curves_csv(fs::File::open(&curves_path).unwrap()).unwrap();
    let (report, hash2) = read_report_csv(fs::File::open(&csv).unwrap(), curves).unwrap();
    assert_eq!(hash, hash2);
    assert_eq!(report.per_image.len(), 3);
    assert_eq!(report.aggregate.mae, 0.0);

    write_mask(&pred.join("extra.png"), |_, _| 0);
    write_mask(&gt.join("lonely.png"), |_, _| 0);
    let o = mdsam(&["eval", "--pred-dir", p(&pred), "--gt-dir", p(&gt), "--out-csv", p(&csv)]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning: 2 unmatched"), "{}", stderr(&o));

    let o = mdsam(&["eval", "--pred-dir", p(&dir.path().join("nope")), "--gt-dir", p(&gt), "--out-csv", p(&csv)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn curves_single_overlay_and_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    write_mask(&gt.join("a.png"), |x, _| if x < 16 { 255 } else { 0 });
    write_mask(&pred.join("a.png"), |x, y| (x * 8 + y) as u8);
    let mut inputs = Vec::new();
    for name in ["method_one", "method_two"] {
        let csv = dir.path().join(format!("{name}.csv"));
        let curves = dir.path().join(format!("{name}_curves.csv"));
        let o = mdsam(&["eval", "--pred-dir", p(&pred), "--gt-dir", p(&gt), "--out-csv", p(&csv)]);
        assert!(o.status.success(), "{}", stderr(&o));
        inputs.push(curves);
    }
    let single = dir.path().join("single");
    let o = mdsam(&["curves", "--input", p(&inputs[0]), "--out-dir", p(&single)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pr = fs::read_to_string(single.join("pr_curve.svg")).unwrap();
    assert_eq!(pr.matches("<polyline").count(), 1);
    assert!(single.join("f_curve.svg").exists());

    let both = dir.path().join("both");
    let o = mdsam(&["curves", "--input", p(&inputs[0]), "--input", p(&inputs[1]), "--out-dir", p(&both)]);
    assert!(o.status.success());
    let f = fs::read_to_string(both.join("f_curve.svg")).unwrap();
    assert_eq!(f.matches("<polyline").count(), 2);
    assert!(f.contains("method_one_curves") && f.contains("method_two_curves"));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "threshold,precision\n0,1\n").unwrap();
    let o = mdsam(&["curves", "--input", p(&bad), "--out-dir", p(&both)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_two_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "[data]\nsynth = { count = 2, seed = 5 }\n[ablation]\nvariants = [\"b\", \"f\"]");
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let o = mdsam(&["ablate", "--config", p(&cfg), "--out-csv", p(out), "--seed", "4"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let body: String = text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let labels: Vec<String> = rdr.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(labels, ["(b) SAM+LMSA", "(f) SAM+LMSA+MLFM+DEM"]);
    assert!(text.starts_with("# config_hash="));
}

#[test]
fn synth_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("a"), 2, 9);
    synth(&dir.path().join("b"), 2, 9);
    for sub in ["images/synth_000.png", "masks/synth_001.png"] {
        assert_eq!(fs::read(dir.path().join("a").join(sub)).unwrap(), fs::read(dir.path().join("b").join(sub)).unwrap());
    }
}
