use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gpic_core::dataprep::{read_image, write_image, ImageBuffer};

const TINY: &str = "channels = 2\ndepth = 1\nfourier_dim = 4\nimage_size = 8\nbatch_size = 2\nsteps = 20\nlearning_rate = 0.001\n";

fn gpic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpic")).args(args).env_remove("GPIC_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gpic(args);
    assert!(out.status.success(), "gpic {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "not one line: {stderr}");
    serde_json::from_str(stderr.trim_end()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset plus an untrained checkpoint of the tiny model.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("tiny.cfg"), TINY).unwrap();
        ok(&["prepare", "--count", "4", "--resolution", "8", "--seed", "3", "--out", s(&root.join("data"))]);
        ok(&[
            "train",
            "--config",
            s(&root.join("tiny.cfg")),
            "--data",
            s(&root.join("data/manifest.tsv")),
            "--epochs",
            "0",
            "--out",
            s(&root.join("run")),
        ]);
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn sample(&self, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let mut args = vec![
            "sample",
            "--checkpoint",
            s(&self.root.join("run/last.gpic")).to_owned().leak(),
            "--line",
            s(&self.root.join("data/line_0000.png")).to_owned().leak(),
            "--out",
            s(&out).to_owned().leak(),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

fn red_mean(img: &ImageBuffer) -> f64 {
    img.data().chunks(3).map(|p| p[0] as f64).sum::<f64>() / (img.width() * img.height()) as f64
}

#[test]
fn prepare_writes_a_reproducible_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let summary = ok(&["prepare", "--count", "4", "--resolution", "16", "--seed", "9", "--out", s(out)]);
        assert!(summary.contains("\"pairs\":4"));
    }
    let manifest = std::fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    assert_eq!(manifest, std::fs::read_to_string(b.join("manifest.tsv")).unwrap());
    assert_eq!(std::fs::read(a.join("color_0003.png")).unwrap(), std::fs::read(b.join("color_0003.png")).unwrap());

    ok(&["prepare", "--count", "2", "--resolution", "16", "--split", "val", "--out", s(&dir.path().join("v"))]);
    assert!(std::fs::read_to_string(dir.path().join("v/manifest.tsv")).unwrap().starts_with("#gpic-manifest\tresolution=16\tsplit=val\n"));
}

#[test]
fn zero_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gpic(&["prepare", "--count", "0", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(!dir.path().join("manifest.tsv").exists());
}

#[test]
fn zero_epochs_write_only_the_initial_checkpoint() {
    let fx = Fixture::new();
    assert!(fx.path("run/last.gpic").is_file());
    assert!(!fx.path("run/best.gpic").exists());
    assert_eq!(std::fs::read_to_string(fx.path("run/loss.jsonl")).unwrap(), "");
    let cfg = std::fs::read_to_string(fx.path("run/config.txt")).unwrap();
    assert!(cfg.contains("channels = 2\n") && cfg.contains("epochs = 0\n"));
}

#[test]
fn training_is_reproducible_and_resumable() {
    let fx = Fixture::new();
    let train = |out: &str, extra: &[&str]| {
        let mut args = vec!["train", "--config", s(&fx.path("tiny.cfg")).to_owned().leak(), "--data"];
        args.push(s(&fx.path("data/manifest.tsv")).to_owned().leak());
        args.extend_from_slice(&["--out", s(&fx.path(out)).to_owned().leak()]);
        args.extend_from_slice(extra);
        ok(&args)
    };
    let summary = train("a", &["--epochs", "2", "--seed", "5"]);
    train("b", &["--epochs", "2", "--seed", "5"]);
    assert!(summary.contains("\"steps\":4"));
    for f in ["loss.jsonl", "val.jsonl", "last.gpic", "best.gpic"] {
        assert_eq!(std::fs::read(fx.path("a").join(f)).unwrap(), std::fs::read(fx.path("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(fx.path("a/loss.jsonl")).unwrap().lines().count(), 4);

    train("c", &["--epochs", "1", "--seed", "5"]);
    let resumed = train("d", &["--epochs", "1", "--resume", s(&fx.path("c/last.gpic")).to_owned().leak()]);
    assert!(resumed.contains("\"steps\":4"));
    assert_eq!(std::fs::read(fx.path("a/last.gpic")).unwrap(), std::fs::read(fx.path("d/last.gpic")).unwrap());

    let other = train("e", &["--epochs", "1", "--set", "learning_rate=0.01", "--max-steps", "1"]);
    assert!(other.contains("\"steps\":1"));
}

#[test]
fn sampling_is_deterministic_and_traced() {
    let fx = Fixture::new();
    let a = fx.sample("a", &["--n", "1", "--seed", "7", "--steps", "10"]);
    let b = fx.sample("b", &["--n", "1", "--seed", "7", "--steps", "10"]);
    let c = fx.sample("c", &["--n", "1", "--seed", "7", "--steps", "10", "--corrector", "0"]);
    let img = std::fs::read(a.join("sample_0000.png")).unwrap();
    assert_eq!(img, std::fs::read(b.join("sample_0000.png")).unwrap());
    assert_eq!(img, std::fs::read(c.join("sample_0000.png")).unwrap());
    let d = fx.sample("d", &["--n", "1", "--seed", "8", "--steps", "10"]);
    assert_ne!(img, std::fs::read(d.join("sample_0000.png")).unwrap());

    let e = fx.sample("e", &["--n", "2", "--seed", "7", "--steps", "10", "--corrector", "2"]);
    let trace = std::fs::read_to_string(e.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 20);
    let first: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(first["sample"], 0);
    assert_eq!(first["t"], 10);
    assert_eq!(first["correctors_applied"], 2);
    assert!(e.join("sample_0001.png").is_file());
}

#[test]
fn bias_shifts_the_red_channel() {
    let fx = Fixture::new();
    let common = ["--n", "32", "--seed", "1", "--steps", "20"];
    let red = fx.sample("red", &[&common[..], &["--bias", "1,-1,-1"]].concat());
    let blue = fx.sample("blue", &[&common[..], &["--bias", "-1,-1,1"]].concat());
    let mean = |dir: &Path| (0..32).map(|i| red_mean(&read_image(&dir.join(format!("sample_{i:04}.png"))).unwrap())).sum::<f64>() / 32.0;
    assert!(mean(&red) > mean(&blue));
}

#[test]
fn masked_pixels_match_the_target() {
    let fx = Fixture::new();
    let rgb = ImageBuffer::filled(8, 8, &[200, 40, 90]).unwrap();
    let alpha_data: Vec<u8> = (0..64).map(|i| if i % 8 < 3 { 255 } else { 0 }).collect();
    let alpha = ImageBuffer::new(8, 8, 1, alpha_data).unwrap();
    write_image(&rgb, &fx.path("rgb.png")).unwrap();
    write_image(&alpha, &fx.path("alpha.png")).unwrap();
    let out = fx.sample(
        "m",
        &["--n", "2", "--steps", "10", "--mask-rgb", s(&fx.path("rgb.png")).to_owned().leak(), "--mask-alpha", s(&fx.path("alpha.png")).to_owned().leak()],
    );
    for i in 0..2 {
        let img = read_image(&out.join(format!("sample_{i:04}.png"))).unwrap();
        for y in 0..8 {
            for x in 0..3 {
                assert_eq!(img.pixel(x, y), &[200, 40, 90]);
            }
        }
    }
}

#[test]
fn bad_inputs_fail_with_one_json_line() {
    let fx = Fixture::new();
    std::fs::write(fx.path("bad.cfg"), "seed = 1\nwidth = 3\n").unwrap();
    let out = gpic(&["train", "--config", s(&fx.path("bad.cfg")), "--data", s(&fx.path("data/manifest.tsv")), "--out", s(&fx.path("x"))]);
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("line 2"));
    assert!(!fx.path("x").exists());

    let out = gpic(&["sample", "--checkpoint", s(&fx.path("data/manifest.tsv")), "--line", s(&fx.path("data/line_0000.png")), "--out", s(&fx.path("y"))]);
    assert_eq!(error_json(&out)["error"]["kind"], "format");
    assert!(!fx.path("y").exists());

    let out = gpic(&["sample", "--checkpoint", s(&fx.path("run/last.gpic")), "--line", s(&fx.path("data/line_0000.png")), "--bias", "2,0,0", "--out", s(&fx.path("z"))]);
    assert_eq!(error_json(&out)["error"]["kind"], "invalid_argument");

    let out = Command::new(env!("CARGO_BIN_EXE_gpic"))
        .args(["prepare", "--count", "1", "--out", s(&fx.path("w"))])
        .env("GPIC_THREADS", "zero")
        .output()
        .unwrap();
    assert!(error_json(&out)["error"]["message"].as_str().unwrap().contains("GPIC_THREADS"));
}

#[test]
fn eval_reports_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir(&images).unwrap();
    let img = ImageBuffer::filled(4, 4, &[10, 120, 250]).unwrap();
    write_image(&img, &images.join("a.png")).unwrap();
    let out_dir = dir.path().join("report");

    let out = gpic(&["eval", "--images-dir", s(&images), "--out", s(&out_dir)]);
    assert!(error_json(&out)["error"]["message"].as_str().unwrap().contains("need ≥ 2"));
    assert!(!out_dir.exists());

    write_image(&img, &images.join("b.png")).unwrap();
    ok(&["eval", "--images-dir", s(&images), "--out", s(&out_dir)]);
    assert_eq!(std::fs::read_to_string(out_dir.join("distances.csv")).unwrap(), "pair,a,b,distance\n0,a.png,b.png,0\n");
    assert!(std::fs::read_to_string(out_dir.join("histogram.svg")).unwrap().starts_with("<svg"));

    for i in 2..216 {
        let v = (i * 7 % 256) as u8;
        write_image(&ImageBuffer::filled(4, 4, &[v, 255 - v, v / 2]).unwrap(), &images.join(format!("img_{i:03}.png"))).unwrap();
    }
    let summary = ok(&["eval", "--images-dir", s(&images), "--extractor", "identity", "--bins", "10", "--out", s(&out_dir)]);
    assert!(summary.contains("\"pairs\":23220"));
    assert_eq!(std::fs::read_to_string(out_dir.join("distances.csv")).unwrap().lines().count(), 23221);
    let again = dir.path().join("again");
    ok(&["eval", "--images-dir", s(&images), "--extractor", "identity", "--bins", "10", "--out", s(&again)]);
    assert_eq!(std::fs::read(out_dir.join("histogram.txt")).unwrap(), std::fs::read(again.join("histogram.txt")).unwrap());

    let out = gpic(&["eval", "--images-dir", s(&images), "--extractor", "trained", "--out", s(&out_dir)]);
    assert!(error_json(&out)["error"]["message"].as_str().unwrap().contains("--checkpoint"));
}
