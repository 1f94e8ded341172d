use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn brickpose(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brickpose")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Vec<u8> {
    let out = brickpose(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).expect("valid JSON")
}

#[test]
fn synth_writes_bundles_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--scenes", "1", "--bricks", "1", "--out", "s"], dir.path());
    let scene = dir.path().join("s/scene_0000");
    let mut names: Vec<String> =
        fs::read_dir(&scene).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["boxes.json", "cloud.ply", "mask.pgm", "poses.json", "spec.json"]);
    let manifest = json(&fs::read(dir.path().join("s/manifest.json")).unwrap());
    assert_eq!(manifest["scenes"].as_array().unwrap().len(), 1);

    ok(&["synth", "--scenes", "0", "--out", "empty"], dir.path());
    let manifest = json(&fs::read(dir.path().join("empty/manifest.json")).unwrap());
    assert!(manifest["scenes"].as_array().unwrap().is_empty());
}

#[test]
fn pose_recovers_rendered_brick() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--scenes", "3", "--bricks", "1", "--out", "s"], dir.path());
    for i in 0..3 {
        let scene = format!("s/scene_{i:04}");
        let out = ok(
            &[
                "pose",
                "--cloud",
                &format!("{scene}/cloud.ply"),
                "--box",
                &format!("{scene}/boxes.json"),
                "--debug-dir",
                "dbg",
            ],
            dir.path(),
        );
        let pose = json(&out);
        let truth = json(&fs::read(dir.path().join(format!("{scene}/poses.json"))).unwrap())[0].clone();
        let t: Vec<f64> = (0..3).map(|k| pose["t"][k].as_f64().unwrap()).collect();
        let g: Vec<f64> = (0..3).map(|k| truth["t"][k].as_f64().unwrap()).collect();
        let err = t.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err < 2e-3, "centroid error {err}");
        assert!(["LW", "LH", "WH"].contains(&pose["face"].as_str().unwrap()));
    }
    for f in ["crop.ply", "inliers.ply", "boundary.ply", "lines.ply", "corners.ply", "stages.json"] {
        assert!(dir.path().join("dbg").join(f).exists(), "{f} missing");
    }
}

#[test]
fn pose_reports_stage_errors() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--scenes", "1", "--bricks", "1", "--out", "s"], dir.path());
    fs::write(dir.path().join("tiny.json"), r#"{"cx": 2, "cy": 2, "w": 0.5, "h": 0.5, "theta": 0, "class": "blue"}"#)
        .unwrap();
    let out = brickpose(&["pose", "--cloud", "s/scene_0000/cloud.ply", "--box", "tiny.json"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("crop stage failed") && err.contains("no cloud points"), "{err}");

    ok(&["--dims", "0.1,0.095,0.09", "synth", "--scenes", "1", "--bricks", "1", "--out", "cube"], dir.path());
    let out = brickpose(
        &[
            "--dims",
            "0.1,0.095,0.09",
            "pose",
            "--cloud",
            "cube/scene_0000/cloud.ply",
            "--box",
            "cube/scene_0000/boxes.json",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("identify_surface") && err.contains("several faces"), "{err}");
}

#[test]
fn pose_all_selects_topmost() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--scenes", "1", "--bricks", "4", "--out", "s"], dir.path());
    let out = json(&ok(
        &["pose", "--cloud", "s/scene_0000/cloud.ply", "--box", "s/scene_0000/boxes.json", "--all"],
        dir.path(),
    ));
    let idx = out["topmost"].as_u64().unwrap() as usize;
    let poses = out["poses"].as_array().unwrap();
    let height = |p: &serde_json::Value| -p["pose"]["t"][2].as_f64().unwrap();
    let best = height(&poses[idx]);
    for p in poses.iter().filter(|p| p.get("pose").is_some()) {
        assert!(height(p) <= best);
    }
}

#[test]
fn eval_modes_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--scenes", "1", "--bricks", "6", "--out", "s"], dir.path());
    let r = json(&ok(
        &["eval", "--pred", "s/scene_0000/boxes.json", "--gt", "s/scene_0000", "--mode", "rotated"],
        dir.path(),
    ));
    assert_eq!(r["recall"].as_f64().unwrap(), 1.0);
    assert!(r["map"].is_null());
    let rotated_p = r["precision"].as_f64().unwrap();
    let u = json(&ok(
        &["eval", "--pred", "s/scene_0000/boxes.json", "--gt", "s/scene_0000", "--mode", "upright"],
        dir.path(),
    ));
    assert!(u["precision"].as_f64().unwrap() < rotated_p);
    assert!(u["map"].as_f64().is_some());

    fs::write(dir.path().join("bad.json"), "[{").unwrap();
    let out = brickpose(&["eval", "--pred", "bad.json", "--gt", "s/scene_0000"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}

#[test]
fn simulate_examples() {
    let dir = tempfile::tempdir().unwrap();
    let counts = |args: &[&str]| -> Vec<u64> {
        let mut full = vec!["simulate"];
        full.extend_from_slice(args);
        json(&ok(&full, dir.path()))["layers"]
            .as_array()
            .unwrap()
            .iter()
            .map(|l| l["successful_rounds"].as_u64().unwrap())
            .collect()
    };
    assert_eq!(counts(&[]), vec![25; 5]);
    let big = counts(&["--sigma-t", "0.5"]);
    assert!(big[0] <= 2, "{big:?}");
    let mid = counts(&["--sigma-t", "0.02", "--sigma-r", "0.05"]);
    assert!(mid.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn codec_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--scenes", "1", "--bricks", "6", "--out", "s"], dir.path());
    let rep = json(&ok(&["codec", "encode", "--scene", "s/scene_0000", "--out", "t.bin"], dir.path()));
    assert_eq!(fs::metadata(dir.path().join("t.bin")).unwrap().len(), 8 + 30 * 40 * 8 * 4);
    let boxes = json(&ok(&["codec", "decode", "--tensor", "t.bin"], dir.path()));
    assert_eq!(boxes.as_array().unwrap().len(), rep["assigned"].as_array().unwrap().len());

    let out = brickpose(&["--cell-size", "32", "codec", "decode", "--tensor", "t.bin"], dir.path());
    assert!(!out.status.success(), "shape mismatch must be rejected");
}
