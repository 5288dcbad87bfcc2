use std::path::Path;
use std::process::{Command, Output};

fn igc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_igc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn json(out: &[u8]) -> serde_json::Value {
    serde_json::from_slice(out).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(out)))
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_export_evaluate() {
    let root = tempfile::tempdir().unwrap();
    let faces = root.path().join("faces");
    let out = igc(&["synth", "--out", arg(&faces), "--count", "40", "--size", "32", "--seed", "3"]);
    assert!(out.status.success());
    assert_eq!(json(&out.stdout)["images"], 40);

    let config = root.path().join("small.toml");
    std::fs::write(
        &config,
        "image_size = 32\nembed_dim = 16\npart_dim = 16\nencoder_channels = [4, 8, 8, 8, 16]\n\
         decoder_channels = [8, 8, 4, 4, 4]\nperceptual_channels = [4]\nbatch_size = 4\ncheckpoint_every = 5\n",
    )
    .unwrap();
    let run = root.path().join("run");
    let out = igc(&[
        "train", "--config", arg(&config), "--data", arg(&faces), "--out", arg(&run), "--max-steps", "6",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = json(&out.stdout)["checkpoint"].as_str().unwrap().to_string();
    assert!(ckpt.ends_with("ckpt_6"));
    assert!(run.join("ckpt_5").is_file());
    assert!(run.join("manifest.jsonl").is_file());
    assert!(run.join("figures/step_5/labels.png").is_file());
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 6);

    let figs = root.path().join("figs");
    let image = faces.join("face_00000.png");
    let out = igc(&["export-hierarchy", "--ckpt", &ckpt, "--image", arg(&image), "--out", arg(&figs)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out.stdout)["files"].as_array().unwrap().len(), 3 * 6 + 6);

    let report = root.path().join("report.json");
    let out = igc(&[
        "eval-seg",
        "--ckpt",
        &ckpt,
        "--data",
        arg(&run.join("manifest.jsonl")),
        "--landmarks",
        arg(&faces.join("landmarks.csv")),
        "--out",
        arg(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out.stdout);
    assert!(r["nme_l"].as_f64().unwrap().is_finite());
    assert!(r["nme_dl"].is_null());
    assert_eq!(json(&std::fs::read(&report).unwrap()), r);
}

#[test]
fn failures_are_reported_as_json() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("nope.toml");
    let out = igc(&["train", "--config", arg(&missing), "--data", arg(root.path())]);
    assert!(!out.status.success());
    let err = json(&out.stderr);
    assert!(err["error"].is_string());
    assert!(err["message"].as_str().unwrap().contains("nope.toml"));

    let out = igc(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out.stderr)["error"], "usage");

    let bad = root.path().join("bad.toml");
    std::fs::write(&bad, "num_capsules = 0\n").unwrap();
    let out = igc(&["train", "--config", arg(&bad), "--data", arg(root.path())]);
    assert!(!out.status.success());
    assert!(json(&out.stderr)["error"].is_string());
}
