use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dauhst::cassi::{encode_hsc, HsiCube, Mask, SensingOperator};
use dauhst::metrics::{psnr, ssim};
use dauhst::model::Model;

fn dauhst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dauhst"))
        .args(args)
        .env_remove("DAUHST_VERIFY_CAP")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ramp_cube(h: usize, w: usize, n: usize) -> HsiCube {
    HsiCube::from_fn(h, w, n, |i, j, b| ((i * 7 + j * 3 + b * 5) % 11) as f64 / 10.0)
}

struct Files {
    dir: tempfile::TempDir,
}

impl Files {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn simulate_matches_the_library_forward_model_byte_for_byte() {
    let f = Files::new();
    ramp_cube(5, 6, 3).write(&f.path("cube.hsc")).unwrap();
    Mask::random_binary(5, 6, 0.5, 9)
        .write(&f.path("mask.hsc"))
        .unwrap();
    // files hold f32, so the reference works from what was stored
    let cube = HsiCube::read(&f.path("cube.hsc")).unwrap();
    let mask = Mask::read(&f.path("mask.hsc")).unwrap();
    let out = f.path("y.hsc");
    let o = dauhst(&[
        "simulate",
        "--cube",
        s(&f.path("cube.hsc")),
        "--mask",
        s(&f.path("mask.hsc")),
        "--shift",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let op = SensingOperator::new(mask, 3, 2).unwrap();
    let y = op.measure(&cube).unwrap();
    let expected = encode_hsc(y.height(), y.width(), 1, y.data());
    assert_eq!(std::fs::read(&out).unwrap(), expected);
    assert!(stdout(&o).contains(&format!("n = {}", 5 * (6 + 2 * 2))));
}

#[test]
fn simulate_with_noise_differs_and_is_seeded() {
    let f = Files::new();
    ramp_cube(6, 6, 2).write(&f.path("cube.hsc")).unwrap();
    Mask::random_binary(6, 6, 0.5, 1)
        .write(&f.path("mask.hsc"))
        .unwrap();
    let run = |name: &str, extra: &[&str]| {
        let (cube, mask, out) = (f.path("cube.hsc"), f.path("mask.hsc"), f.path(name));
        let mut args = vec![
            "simulate",
            "--cube",
            s(&cube),
            "--mask",
            s(&mask),
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        assert!(dauhst(&args).status.success());
        std::fs::read(out).unwrap()
    };
    let clean = run("a.hsc", &[]);
    let noisy = run("b.hsc", &["--noise-bits", "4", "--seed", "3"]);
    let again = run("c.hsc", &["--noise-bits", "4", "--seed", "3"]);
    assert_ne!(clean, noisy);
    assert_eq!(noisy, again);
}

#[test]
fn large_dispersion_widens_the_detector() {
    let f = Files::new();
    ramp_cube(4, 10, 28).write(&f.path("cube.hsc")).unwrap();
    Mask::ones(4, 10).write(&f.path("mask.hsc")).unwrap();
    let out = f.path("y.hsc");
    let o = dauhst(&[
        "simulate",
        "--cube",
        s(&f.path("cube.hsc")),
        "--mask",
        s(&f.path("mask.hsc")),
        "--shift",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (h, w, c, _) = dauhst::cassi::read_hsc(&out).unwrap();
    assert_eq!((h, w, c), (4, 10 + 54, 1));
}

#[test]
fn malformed_and_missing_inputs_exit_one_without_output() {
    let f = Files::new();
    std::fs::write(f.path("bad.hsc"), b"HSC1\x01\x00").unwrap();
    Mask::ones(4, 4).write(&f.path("mask.hsc")).unwrap();
    let out = f.path("y.hsc");
    let o = dauhst(&[
        "simulate",
        "--cube",
        s(&f.path("bad.hsc")),
        "--mask",
        s(&f.path("mask.hsc")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("malformed"), "{}", stderr(&o));
    assert!(!out.exists());

    let o = dauhst(&[
        "simulate",
        "--cube",
        s(&f.path("nope.hsc")),
        "--mask",
        s(&f.path("mask.hsc")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("does not exist"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(dauhst(&["simulate", "--bogus"]).status.code(), Some(2));
    assert_eq!(dauhst(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dauhst(&["metrics", "--pred", "a"]).status.code(), Some(2));
}

#[test]
fn metrics_report_caps_known_values_and_library_agreement() {
    let f = Files::new();
    let truth = HsiCube::zeros(6, 6, 2);
    let off = HsiCube::from_fn(6, 6, 2, |_, _, _| 0.1);
    truth.write(&f.path("t.hsc")).unwrap();
    off.write(&f.path("p.hsc")).unwrap();

    let o = dauhst(&[
        "metrics",
        "--pred",
        s(&f.path("t.hsc")),
        "--truth",
        s(&f.path("t.hsc")),
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("PSNR 100.0000 dB"), "{}", stdout(&o));
    assert!(stdout(&o).contains("SSIM 1.0000"));

    let o = dauhst(&[
        "metrics",
        "--pred",
        s(&f.path("p.hsc")),
        "--truth",
        s(&f.path("t.hsc")),
    ]);
    assert!(stdout(&o).contains("PSNR 20.0000 dB"), "{}", stdout(&o));

    let a = ramp_cube(7, 5, 3);
    let b = HsiCube::from_fn(7, 5, 3, |i, j, k| a.get(i, j, k) * 0.9 + 0.02 * (j as f64));
    a.write(&f.path("a.hsc")).unwrap();
    b.write(&f.path("b.hsc")).unwrap();
    let (a, b) = (
        HsiCube::read(&f.path("a.hsc")).unwrap(),
        HsiCube::read(&f.path("b.hsc")).unwrap(),
    );
    let o = dauhst(&[
        "metrics",
        "--pred",
        s(&f.path("b.hsc")),
        "--truth",
        s(&f.path("a.hsc")),
        "--json",
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["psnr"].as_f64().unwrap(), psnr(&b, &a, 1.0).unwrap());
    assert_eq!(v["ssim"].as_f64().unwrap(), ssim(&b, &a).unwrap());

    let o = dauhst(&[
        "metrics",
        "--pred",
        s(&f.path("a.hsc")),
        "--truth",
        s(&f.path("t.hsc")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("shape mismatch"));
}

const TINY: &[&str] = &[
    "--epochs",
    "1",
    "--patch-size",
    "8",
    "--scene-size",
    "10",
    "--train-scenes",
    "2",
    "--val-scenes",
    "1",
    "--channels",
    "4",
    "--window",
    "2",
    "--bands",
    "3",
];

fn train_tiny(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", s(dir)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    dauhst(&args)
}

fn epoch_zero_loss(dir: &Path) -> f64 {
    let log = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    v["loss"].as_f64().unwrap()
}

#[test]
fn train_writes_a_checkpoint_recording_the_stage_count() {
    let f = Files::new();
    let run = f.path("run");
    let o = train_tiny(&run, &["--stages", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["model.dta", "model.json", "mask.hsc", "metrics.jsonl"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("model.json")).unwrap()).unwrap();
    assert_eq!(sidecar["stages"], 3);

    let shared = f.path("shared");
    assert!(
        train_tiny(&shared, &["--stages", "3", "--share-denoiser-weights"])
            .status
            .success()
    );
    let model = Model::load(&shared.join("model.dta")).unwrap();
    assert!(model.config.share_denoiser_weights);
    assert!(model.params.names().all(|n| !n.starts_with("stage1/")));
}

#[test]
fn train_seed_fixes_epoch_zero_loss() {
    let f = Files::new();
    let (a, b, c) = (f.path("a"), f.path("b"), f.path("c"));
    for (dir, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        assert!(train_tiny(dir, &["--seed", seed, "--precision", "double"])
            .status
            .success());
    }
    assert_eq!(epoch_zero_loss(&a), epoch_zero_loss(&b));
    assert_ne!(epoch_zero_loss(&a), epoch_zero_loss(&c));
}

#[test]
fn train_flags_override_the_config_file() {
    let f = Files::new();
    std::fs::write(f.path("cfg.json"), r#"{"stages": 3, "channels": 4, "seed": 11}"#).unwrap();
    let run = f.path("run");
    let o = train_tiny(&run, &["--config", s(&f.path("cfg.json")), "--stages", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model = Model::load(&run.join("model.dta")).unwrap();
    assert_eq!(model.config.stages, 1);

    std::fs::write(f.path("bad.json"), r#"{"stages": "many"}"#).unwrap();
    let o = train_tiny(&f.path("x"), &["--config", s(&f.path("bad.json"))]);
    assert_eq!(o.status.code(), Some(1));
    let o = train_tiny(&f.path("x"), &["--mask-density", "2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn reconstruct_prints_one_parameter_pair_per_stage() {
    let f = Files::new();
    let run = f.path("run");
    assert!(train_tiny(&run, &["--stages", "2"]).status.success());
    ramp_cube(8, 8, 3).write(&f.path("cube.hsc")).unwrap();
    let mask = run.join("mask.hsc");
    let o = dauhst(&[
        "simulate",
        "--cube",
        s(&f.path("cube.hsc")),
        "--mask",
        s(&mask),
        "--out",
        s(&f.path("y.hsc")),
    ]);
    assert!(o.status.success());
    let out = f.path("x.hsc");
    let o = dauhst(&[
        "reconstruct",
        "--measurement",
        s(&f.path("y.hsc")),
        "--mask",
        s(&mask),
        "--checkpoint",
        s(&run.join("model.dta")),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(HsiCube::read(&out).unwrap().dims(), (8, 8, 3));
    let stages: Vec<_> = stdout(&o)
        .lines()
        .filter(|l| l.starts_with("stage "))
        .map(String::from)
        .collect();
    assert_eq!(stages.len(), 2, "{}", stdout(&o));

    let o = dauhst(&[
        "reconstruct",
        "--measurement",
        s(&f.path("y.hsc")),
        "--mask",
        s(&mask),
        "--checkpoint",
        s(&run.join("model.dta")),
        "--out",
        s(&out),
        "--json",
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for st in v["stages"].as_array().unwrap() {
        assert!(st["alpha"].as_f64().unwrap() > 0.0 && st["beta"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn reconstruct_rejects_a_different_spatial_size() {
    let f = Files::new();
    let run = f.path("run");
    assert!(train_tiny(&run, &[]).status.success());
    Mask::ones(8, 10).write(&f.path("mask.hsc")).unwrap();
    ramp_cube(8, 10, 3).write(&f.path("cube.hsc")).unwrap();
    let o = dauhst(&[
        "simulate",
        "--cube",
        s(&f.path("cube.hsc")),
        "--mask",
        s(&f.path("mask.hsc")),
        "--out",
        s(&f.path("y.hsc")),
    ]);
    assert!(o.status.success());
    let out = f.path("x.hsc");
    let o = dauhst(&[
        "reconstruct",
        "--measurement",
        s(&f.path("y.hsc")),
        "--mask",
        s(&f.path("mask.hsc")),
        "--checkpoint",
        s(&run.join("model.dta")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("spatial size"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn verify_reports_every_group_and_rejects_bad_caps() {
    let o = dauhst(&["verify", "--instances", "1", "--json"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["results"].as_array().unwrap().len() >= 6);

    let o = Command::new(env!("CARGO_BIN_EXE_dauhst"))
        .args(["verify", "--instances", "1"])
        .env("DAUHST_VERIFY_CAP", "lots")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_dauhst"))
        .args(["verify", "--instances", "1"])
        .env("DAUHST_VERIFY_CAP", "4")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cap"), "{}", stderr(&o));
}
