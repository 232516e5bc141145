use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn usqm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usqm"))
        .args(args)
        .current_dir(dir)
        .env_remove("USQM_SEED")
        .output()
        .expect("spawn usqm")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = usqm(dir, args);
    assert!(
        out.status.success(),
        "usqm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    usqm(dir, args).status.code().unwrap()
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// Phantoms, degradations, a bank, scores, pairs and an eval report in `dir`.
fn pipeline(dir: &Path, jobs: &str) {
    let ok = |dir: &Path, args: &[&str]| {
        let mut full = vec!["--jobs", jobs];
        full.extend_from_slice(args);
        ok(dir, &full)
    };
    ok(dir, &["phantom", "--count", "3", "--organ", "liver", "--out-dir", "ph"]);
    ok(dir, &["phantom", "--count", "3", "--organ", "kidney", "--seed", "50", "--style", "coarse", "--out-dir", "ph"]);
    for src in ["ph/liver_000000.png", "ph/kidney_000050.png"] {
        ok(dir, &["degrade", src, "--kind", "speckle,gaussian-blur,elastic", "--target-psnr", "20,25", "--seed", "4", "--out-dir", "deg"]);
    }
    ok(dir, &["nrq", "fit", "--manifest", "ph/manifest.jsonl", "--out", "bank.bin", "--pca-dim", "4", "--components", "1"]);
    ok(dir, &["nrq", "score", "--bank", "bank.bin", "deg", "--out", "scores.jsonl"]);
    ok(dir, &["study", "pairgen", "--manifest", "deg/degradations.json", "--n-pairs", "6", "--seed", "2", "--out", "deg/pairs.json"]);

    let mut csv = String::from("image_id,distortion,theta,metric_value,anchor_damage\n");
    for (i, (m, d)) in [(0.1, 0.2), (0.2, 0.3), (0.4, 0.35), (0.5, 0.6)].iter().enumerate() {
        csv.push_str(&format!("img{i},speckle,{i},{m},{d}\n"));
    }
    std::fs::write(dir.join("anchor.csv"), csv).unwrap();
    ok(dir, &["eval", "task-anchor", "anchor.csv", "--seeds", "1,2", "--out-dir", "rep"]);
}

const ARTIFACTS: &[&str] = &[
    "ph/liver_000001.png",
    "ph/manifest.jsonl",
    "deg/degradations.json",
    "deg/kidney_000050_elastic_psnr20.png",
    "bank.bin",
    "scores.jsonl",
    "deg/pairs.json",
    "rep/task-anchor.json",
    "rep/task-anchor.md",
];

#[test]
fn artifacts_are_byte_identical_across_runs_and_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "4");
    pipeline(b.path(), "1");
    for f in ARTIFACTS {
        let x = std::fs::read(a.path().join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn jobs_flag_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--count", "2", "--height", "448", "--width", "336", "--organ", "liver", "--out-dir", "ph"]);
    ok(d, &["nrq", "fit", "--manifest", "ph/manifest.jsonl", "--out", "bank.bin", "--pca-dim", "8", "--components", "2"]);
    let s1 = ok(d, &["--jobs", "1", "nrq", "score", "--bank", "bank.bin", "ph"]);
    let s4 = ok(d, &["--jobs", "4", "nrq", "score", "--bank", "bank.bin", "ph"]);
    assert_eq!(s1, s4);
    let rows = json_lines(&s1);
    assert_eq!(rows.len(), 2);
    // 448x336 gives 3x2 patch origins at stride 112
    assert_eq!(rows[0]["patch_scores"].as_array().unwrap().len(), 6);
    assert_eq!(rows[0]["kappa"], 1);
}

#[test]
fn fr_score_identity_and_upscaling() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--count", "2", "--height", "128", "--width", "128", "--out-dir", "."]);
    let same: Value = serde_json::from_str(&ok(d, &["fr-score", "phantom_000000.png", "phantom_000000.png", "--token-loss"])).unwrap();
    assert_eq!(same["final"], 0.0);
    assert_eq!(same["token_loss"], 0.0);
    assert_eq!(same["provenance"]["upscaled"], true);
    assert_eq!(same["layers"].as_array().unwrap().len(), 4);

    let diff: Value = serde_json::from_str(&ok(d, &["fr-score", "phantom_000000.png", "phantom_000001.png"])).unwrap();
    assert!(diff["final"].as_f64().unwrap() > 0.0);
    let rev: Value = serde_json::from_str(&ok(d, &["fr-score", "phantom_000001.png", "phantom_000000.png"])).unwrap();
    assert_eq!(diff["final"], rev["final"]);
}

#[test]
fn print_config_reflects_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), r#"{"fr": {"radius": 2, "temperature": 5.0}}"#).unwrap();
    let v: Value = serde_json::from_str(&ok(d, &["--config", "c.json", "--print-config", "fr-score", "a", "b", "--radius", "1"])).unwrap();
    assert_eq!(v["config"]["fr"]["radius"], 1);
    assert_eq!(v["config"]["fr"]["temperature"], 5.0);
    assert_eq!(v["config"]["nr"]["pca_dim"], 128);

    let env = Command::new(env!("CARGO_BIN_EXE_usqm"))
        .args(["--print-config"])
        .env("USQM_SEED", "77")
        .output()
        .unwrap();
    let v: Value = serde_json::from_slice(&env.stdout).unwrap();
    assert_eq!(v["config"]["extractor"], "builtin-seeded:77");
    let default: Value = serde_json::from_str(&ok(d, &["--print-config"])).unwrap();
    assert_ne!(v["config_hash"], default["config_hash"]);

    std::fs::write(d.join("bad.json"), r#"{"fr": {"radus": 2}}"#).unwrap();
    assert_eq!(code(d, &["--config", "bad.json", "--print-config"]), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--count", "2", "--organ", "liver", "--out-dir", "ph"]);

    assert_eq!(code(d, &["fr-score", "missing.png", "ph/liver_000000.png"]), 2);
    std::fs::write(d.join("junk.png"), b"not an image").unwrap();
    assert_eq!(code(d, &["fr-score", "junk.png", "ph/liver_000000.png"]), 2);
    assert_eq!(code(d, &["no-such-command"]), 3);
    assert_eq!(code(d, &["degrade", "ph/liver_000000.png", "--kind", "sharpen", "--theta", "1"]), 3);

    ok(d, &["phantom", "--count", "1", "--height", "240", "--out-dir", "odd"]);
    assert_eq!(code(d, &["fr-score", "ph/liver_000000.png", "odd/phantom_000000.png"]), 3);

    std::fs::write(d.join("empty.jsonl"), "").unwrap();
    assert_eq!(code(d, &["nrq", "fit", "--manifest", "empty.jsonl", "--out", "b.bin"]), 4);

    ok(d, &["nrq", "fit", "--manifest", "ph/manifest.jsonl", "--out", "bank.bin", "--pca-dim", "2", "--components", "1"]);
    assert_eq!(code(d, &["nrq", "score", "--bank", "bank.bin", "ph", "--organ", "spleen"]), 3);
    assert_eq!(code(d, &["--extractor", "builtin-seeded:3", "nrq", "score", "--bank", "bank.bin", "ph"]), 3);
    ok(d, &["--extractor", "builtin-seeded:3", "nrq", "score", "--bank", "bank.bin", "ph", "--allow-fingerprint-mismatch"]);
    std::fs::write(d.join("trunc.bin"), &std::fs::read(d.join("bank.bin")).unwrap()[..40]).unwrap();
    assert_eq!(code(d, &["nrq", "score", "--bank", "trunc.bin", "ph"]), 2);

    // a constant image cannot reach any PSNR target under speckle
    let flat = usqm_core::image::GrayImage::from_fn(64, 64, |_, _| 0.0).unwrap();
    flat.save_png(d.join("flat.png")).unwrap();
    assert_eq!(code(d, &["degrade", "flat.png", "--kind", "speckle", "--target-psnr", "20", "--out-dir", "x"]), 5);

    std::fs::write(d.join("bad.csv"), "image_id,distortion,theta,metric_value,anchor_damage\na,speckle,0.1,oops,1\n").unwrap();
    assert_eq!(code(d, &["eval", "task-anchor", "bad.csv"]), 6);
    std::fs::write(d.join("bad.jsonl"), "{\"path\": 3}\n").unwrap();
    assert_eq!(code(d, &["nrq", "fit", "--manifest", "bad.jsonl", "--out", "b.bin"]), 6);
    std::fs::write(d.join("const.csv"), "image_id,distortion,theta,metric_value,anchor_damage\na,speckle,0.1,1,1\nb,speckle,0.2,1,2\n").unwrap();
    assert_eq!(code(d, &["eval", "task-anchor", "const.csv"]), 4);
}

#[test]
fn degrade_manifest_is_merged_not_duplicated() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--count", "2", "--out-dir", "ph"]);
    ok(d, &["degrade", "ph", "--kind", "speckle", "--theta", "0.2", "--out-dir", "deg"]);
    ok(d, &["degrade", "ph", "--kind", "speckle,specular-clip", "--theta", "0.2", "--out-dir", "deg"]);
    let rows: Vec<Value> = serde_json::from_slice(&std::fs::read(d.join("deg/degradations.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    let printed = json_lines(&ok(d, &["degrade", "ph/phantom_000000.png", "--kind", "all", "--target-psnr", "25", "--out-dir", "cal"]));
    assert_eq!(printed.len(), 8);
    for r in &printed {
        assert!((r["achieved_psnr"].as_f64().unwrap() - 25.0).abs() <= 0.05, "{r}");
    }
}
