//! End-to-end subcommand tests against the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nightshift"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_CONFIG: &str = r#"{
  "steps": 2, "batch": 1, "ckpt_every": 1, "seed": 5,
  "backbone": {"image_size": 32, "base_channels": 4, "content_channels": 16, "style_dim": 8},
  "aggregator": {"patch_stride": 2, "token_dim": 16, "blocks": 1, "heads": 2, "mlp_dim": 32, "freq_bands": 2},
  "nce": {"patches_per_layer": 8, "projection_dim": 16}
}"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ppm_dims(path: &Path) -> (usize, usize) {
    let bytes = fs::read(path).unwrap();
    let head = String::from_utf8_lossy(&bytes[..32.min(bytes.len())]).into_owned();
    let mut it = head.split_ascii_whitespace();
    assert_eq!(it.next(), Some("P6"), "{path:?}");
    let w = it.next().unwrap().parse().unwrap();
    let h = it.next().unwrap().parse().unwrap();
    (w, h)
}

#[test]
fn gen_data_rejects_indivisible_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--out", s(dir.path()), "--n", "1", "--size", "31"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("divisible by 4"), "{}", stderr(&out));
}

#[test]
fn train_reports_missing_config_path() {
    let out = run(&[
        "train", "--config", "/definitely/missing.json",
        "--data-a", "x", "--data-b", "y", "--out", "z",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing.json"), "{}", stderr(&out));
}

#[test]
fn train_rejects_unknown_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"steps": 2, "bogus_key": 1}"#).unwrap();
    let out = run(&[
        "train", "--config", s(&cfg),
        "--data-a", "x", "--data-b", "y", "--out", "z",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus_key"), "{}", stderr(&out));
}

#[test]
fn grad_check_passes_on_fresh_build() {
    let out = ok(&["grad-check", "--seed", "1"]);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("PASS"));
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // gen-data: n samples per domain, deterministic bytes
    let data = root.join("data");
    ok(&["gen-data", "--out", s(&data), "--n", "4", "--size", "32", "--seed", "5"]);
    for dom in ["A", "B"] {
        let images = fs::read_dir(data.join(dom).join("images")).unwrap().count();
        assert_eq!(images, 4, "domain {dom}");
    }
    let data2 = root.join("data2");
    ok(&["gen-data", "--out", s(&data2), "--n", "4", "--size", "32", "--seed", "5"]);
    for rel in ["A/annotations.jsonl", "A/images/A_000005.ppm", "B/manifest.json"] {
        assert_eq!(
            fs::read(data.join(rel)).unwrap(),
            fs::read(data2.join(rel)).unwrap(),
            "{rel} not deterministic"
        );
    }

    // train: artifacts + defaults-filled run.json echo
    let cfg = root.join("cfg.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let run_dir = root.join("run");
    let (da, db) = (data.join("A"), data.join("B"));
    ok(&[
        "train", "--config", s(&cfg),
        "--data-a", s(&da), "--data-b", s(&db), "--out", s(&run_dir),
    ]);
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(echoed["lr"], serde_json::json!(2e-4));
    assert_eq!(echoed["steps"], serde_json::json!(2));
    assert_eq!(echoed["backbone"]["image_size"], serde_json::json!(32));
    assert!(echoed["data_a"].as_str().unwrap().ends_with("A"));
    let csv = fs::read_to_string(run_dir.join("losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    let ckpt = run_dir.join("ckpt_000002.bin");
    assert!(ckpt.exists());

    // translate: deterministic per seed, multi-modal across seeds
    let tr1 = root.join("tr1");
    let tr1b = root.join("tr1b");
    let tr2 = root.join("tr2");
    ok(&["translate", "--ckpt", s(&ckpt), "--input", s(&da), "--out", s(&tr1), "--style-seed", "1"]);
    ok(&["translate", "--ckpt", s(&ckpt), "--input", s(&da), "--out", s(&tr1b), "--style-seed", "1"]);
    ok(&["translate", "--ckpt", s(&ckpt), "--input", s(&da), "--out", s(&tr2), "--style-seed", "2"]);
    assert_eq!(fs::read_dir(&tr1).unwrap().count(), 4);
    let first = "A_000005.ppm";
    assert_eq!(fs::read(tr1.join(first)).unwrap(), fs::read(tr1b.join(first)).unwrap());
    assert_ne!(fs::read(tr1.join(first)).unwrap(), fs::read(tr2.join(first)).unwrap());
    ok(&["translate", "--ckpt", s(&ckpt), "--input", s(&da), "--out", s(&root.join("trb")), "--boxes", "on"]);

    // translate rejects data at the wrong scale
    let big = root.join("big");
    ok(&["gen-data", "--out", s(&big), "--n", "1", "--size", "64", "--seed", "9", "--domains", "A"]);
    let bad = run(&["translate", "--ckpt", s(&ckpt), "--input", s(&big.join("A")), "--out", s(&root.join("trbad"))]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("trained at 32"), "{}", stderr(&bad));

    // eval: metrics.json with the four metric keys
    let ev = root.join("ev");
    ok(&["eval", "--ckpt", s(&ckpt), "--data-a", s(&da), "--data-b", s(&db), "--out", s(&ev)]);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["images"].as_array().unwrap().len(), 4);
    for key in ["ssim", "palette_A", "palette_B"] {
        assert!(metrics["aggregate"][key].is_number(), "missing {key}");
    }
    let ssim_val = metrics["aggregate"]["ssim"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&ssim_val));

    // report: copied loss curve + montage with pinned width
    let rep = root.join("rep");
    ok(&["report", "--run", s(&run_dir), "--out", s(&rep)]);
    assert!(rep.join("loss_curve.csv").exists());
    let (w, h) = ppm_dims(&rep.join("montage.ppm"));
    assert_eq!(w, 3 * 32 + 2 * 2);
    assert_eq!(h, 4 * 32 + 3 * 2);

    // resume: two more steps append to the same artifacts
    let cfg4 = root.join("cfg4.json");
    fs::write(&cfg4, TINY_CONFIG.replace("\"steps\": 2", "\"steps\": 4")).unwrap();
    ok(&[
        "train", "--config", s(&cfg4),
        "--data-a", s(&da), "--data-b", s(&db), "--out", s(&run_dir),
        "--resume", s(&ckpt),
    ]);
    let csv = fs::read_to_string(run_dir.join("losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(run_dir.join("ckpt_000004.bin").exists());
}
