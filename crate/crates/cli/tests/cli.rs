use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lingsplat"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "lingsplat {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset, quantized and trained for a few epochs.
fn pipeline(dir: &Path, threads: &str) -> PathBuf {
    let data = dir.join("data");
    run(&[
        "--threads", threads, "gen-synthetic", "--out", s(&data), "--size", "32", "--gaussians-per-cluster", "12",
        "--static-grid", "5", "--frames", "3", "--bases", "3", "--df", "4", "--embed-dim", "6",
    ]);
    let manifest = data.join("manifest.json");
    run(&["--threads", threads, "quantize", "--manifest", s(&manifest), "--n", "3", "--epochs", "10"]);
    let train = dir.join("train");
    run(&["--threads", threads, "train", "--manifest", s(&manifest), "--out", s(&train), "--epochs", "8", "--hidden", "16"]);
    let loc = dir.join("loc");
    run(&[
        "--threads", threads, "localize", "--scene", s(&train.join("scene.lgsc")), "--manifest", s(&manifest),
        "--query", "cluster_0", "--tau", "0.5", "--n", "3", "--m", "2", "--out", s(&loc),
    ]);
    manifest
}

#[test]
fn full_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let manifest = pipeline(dir, "1");
    let data = dir.join("data");
    for f in ["codebook.lgcb", "index_maps.lgt", "quantize.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let train = dir.join("train");
    for f in ["run.jsonl", "scene.lgsc", "decoder.lgdc", "train.json"] {
        assert!(train.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(train.join("run.jsonl")).unwrap();
    assert!(log.lines().count() >= 9);
    let loc: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("loc/localization.json")).unwrap()).unwrap();
    assert_eq!(loc["label"], "cluster_0");
    assert_eq!(loc["count"].as_u64().unwrap() as usize, loc["selected"].as_array().unwrap().len());

    let render = dir.join("render");
    run(&[
        "render", "--scene", s(&train.join("scene.lgsc")), "--camera-path", s(&data.join("cameras.txt")),
        "--channels", "both", "--out", s(&render),
    ]);
    for f in ["color.lgt", "feature.lgt", "alpha.lgt", "depth.lgt", "render.json", "color/00002.png"] {
        assert!(render.join(f).is_file(), "{f}");
    }

    let edit = dir.join("edit");
    run(&[
        "edit", "--scene", s(&dir.join("loc/scene.lgsc")), "--localization", s(&dir.join("loc/localization.json")),
        "--reference-video", s(&data.join("edits/cluster_0_red")), "--camera-path", s(&data.join("cameras.txt")),
        "--k", "5", "--out", s(&edit),
    ]);
    assert!(edit.join("edit.json").is_file() && edit.join("frames/00000.png").is_file());

    let psnr = dir.join("psnr.json");
    run(&[
        "eval", "--mode", "psnr", "--a", s(&render.join("color.lgt")), "--b", s(&data.join("rgb.lgt")),
        "--manifest", s(&manifest), "--label", "cluster_0", "--out", s(&psnr),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&psnr).unwrap()).unwrap();
    assert!(v["result"].is_object());

    let miou = dir.join("miou.json");
    run(&[
        "eval", "--mode", "miou", "--manifest", s(&manifest), "--scene", s(&train.join("scene.lgsc")),
        "--train-record", s(&train.join("train.json")),
        "--variant", &format!("full={}", s(&dir.join("loc/localization.json"))), "--out", s(&miou),
    ]);
    assert!(miou.is_file() && miou.with_extension("csv").is_file());

    run(&[
        "eval", "--mode", "dirsim", "--manifest", s(&manifest), "--scene", s(&dir.join("loc/scene.lgsc")),
        "--decoder", s(&train.join("decoder.lgdc")), "--edited", s(&edit.join("scene.lgsc")),
        "--localization", s(&dir.join("loc/localization.json")), "--before", "cluster_0", "--after", "cluster_1",
    ]);
}

#[test]
fn outputs_do_not_depend_on_run_or_thread_count() {
    // Same directory for both runs: scene headers record absolute paths.
    let tmp = tempfile::tempdir().unwrap();
    let files = ["data/codebook.lgcb", "data/index_maps.lgt", "train/scene.lgsc", "train/decoder.lgdc", "loc/scene.lgsc"];
    let snapshot = |threads: &str| {
        let dir = tmp.path().join("run");
        let _ = fs::remove_dir_all(&dir);
        pipeline(&dir, threads);
        let loc: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.join("loc/localization.json")).unwrap()).unwrap();
        let bytes: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.join(f)).unwrap()).collect();
        (bytes, loc["selected"].clone())
    };
    let (a, sel_a) = snapshot("1");
    let (b, sel_b) = snapshot("4");
    for (f, (x, y)) in files.iter().zip(a.iter().zip(&b)) {
        assert!(x == y, "{f} differs");
    }
    assert_eq!(sel_a, sel_b);
}

#[test]
fn unreachable_threshold_is_not_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let manifest = pipeline(dir, "1");
    let out = dir.join("empty");
    let o = run(&[
        "localize", "--scene", s(&dir.join("train/scene.lgsc")), "--manifest", s(&manifest), "--query", "cluster_1",
        "--tau", "1.0", "--out", s(&out),
    ]);
    let loc: serde_json::Value = serde_json::from_slice(&fs::read(out.join("localization.json")).unwrap()).unwrap();
    assert_eq!(loc["count"], 0);
    assert!(o.status.success());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin().args(["quantize", "--manifest", s(&tmp.path().join("missing.json"))]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
    let o = bin().args(["localize", "--scene", "x"]).output().unwrap();
    assert!(!o.status.success());
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["gen-synthetic", "quantize", "train", "localize", "render", "edit", "eval", "ablation"] {
        let o = bin().args([sub, "--help"]).output().unwrap();
        assert!(o.status.success(), "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("--"), "{sub}");
    }
}
