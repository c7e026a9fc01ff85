mod common;

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use posedist::harness::{cmd_bench, SceneConfig};
use posedist::heatmap::write_heatmaps;
use posedist::projection::write_point_csv;
use posedist::{CameraIntrinsics, HeatmapStack, Pose};

use common::*;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posedist"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("failed to launch posedist")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn intrinsics_json(c: &CameraIntrinsics) -> Value {
    json!({
        "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
        "crop_offset": c.crop_offset, "crop_scale": c.crop_scale, "resolution": c.resolution,
    })
}

fn pose_json(p: &Pose) -> Value {
    json!({
        "rotation": p.rotation.wxyz(),
        "translation": [p.translation.x, p.translation.y, p.translation.z],
    })
}

/// Writes the box keypoints and a synthesis scene for ground-truth pose
/// `pose_seed`, then applies `edit` to the config before saving it.
fn write_scene(dir: &Path, pose_seed: u64, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let kp = box_keypoints();
    let gt = gt_pose(pose_seed);
    let mut file = fs::File::create(dir.join("keypoints.csv")).unwrap();
    write_point_csv(&mut file, kp.points()).unwrap();
    let mut config = json!({
        "keypoints_path": "keypoints.csv",
        "synthesis": { "sigma": 1.0 },
        "intrinsics": intrinsics_json(&object_crop(&kp, &gt)),
        "gt_pose": pose_json(&gt),
        "recursion": 3,
        "mode": "coupled",
    });
    edit(&mut config);
    let path = dir.join("scene.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn eval_ll(config: &Path, out: &Path) -> f64 {
    run_ok(&["eval", "--config", s(config), "--out", s(out)]);
    read_json(&out.join("summary.json"))["gt_log_likelihood"]
        .as_f64()
        .unwrap()
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let config = write_scene(dir.path(), 1, |_| {});
    let out = dir.path().join("out");

    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["eval", "--out", s(&out)]).status.code(), Some(1));
    assert_eq!(
        run(&["eval", "--config", s(&config), "--mode", "joint"])
            .status
            .code(),
        Some(1)
    );

    let bad = write_scene(dir.path(), 1, |c| c["colour"] = json!("red"));
    let failed = run(&["eval", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(failed.status.code(), Some(1));

    let invalid = write_scene(dir.path(), 1, |c| c["synthesis"]["sigma"] = json!(-1.0));
    let failed = run(&["eval", "--config", s(&invalid), "--out", s(&out)]);
    assert_eq!(failed.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&failed.stderr).contains("sigma"));

    let missing = write_scene(dir.path(), 1, |c| {
        c.as_object_mut().unwrap().remove("synthesis");
        c["heatmaps_path"] = json!("nowhere.kphm");
    });
    let failed = run(&["eval", "--config", s(&missing), "--out", s(&out)]);
    assert_eq!(failed.status.code(), Some(2));
}

#[test]
fn noisy_eval_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let config = write_scene(dir.path(), 2, |c| {
        c["noise"] = json!({});
        c["seed"] = json!(5);
        c["recursion"] = json!(2);
    });
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    run_ok(&["eval", "--config", s(&config), "--out", s(&a)]);
    run_ok(&["eval", "--config", s(&config), "--out", s(&b)]);
    run_ok(&[
        "eval",
        "--config",
        s(&config),
        "--out",
        s(&c),
        "--seed",
        "6",
    ]);
    for file in ["rotation_distribution.csv", "summary.json"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap()
        );
    }
    let (sa, sc) = (
        read_json(&a.join("summary.json")),
        read_json(&c.join("summary.json")),
    );
    assert_ne!(sa["noise"], sc["noise"]);
    let offset = sa["noise"]["position_offset"].as_array().unwrap();
    assert!(offset.iter().all(|v| v.as_f64().unwrap().abs() <= 0.010));
}

#[test]
fn synth_then_eval_matches_in_memory_eval() {
    let dir = TempDir::new().unwrap();
    let config = write_scene(dir.path(), 3, |c| {
        c["noise"] = json!({});
        c["seed"] = json!(9);
        c["recursion"] = json!(2);
    });
    let synth = dir.path().join("synth");
    run_ok(&["synth", "--config", s(&config), "--out", s(&synth)]);
    assert!(synth.join("heatmaps.kphm").exists());
    let manifest = read_json(&synth.join("manifest.json"));
    assert_eq!(manifest["seed"], json!(9));

    let (direct, from_files) = (dir.path().join("direct"), dir.path().join("files"));
    run_ok(&["eval", "--config", s(&config), "--out", s(&direct)]);
    run_ok(&[
        "eval",
        "--config",
        s(&synth.join("scene.json")),
        "--out",
        s(&from_files),
    ]);
    assert_eq!(
        fs::read(direct.join("rotation_distribution.csv")).unwrap(),
        fs::read(from_files.join("rotation_distribution.csv")).unwrap()
    );
    let (x, y) = (
        read_json(&direct.join("summary.json")),
        read_json(&from_files.join("summary.json")),
    );
    assert_eq!(x["gt_log_likelihood"], y["gt_log_likelihood"]);
}

#[test]
fn unimodal_scene_is_robust_to_one_pitch_of_position_error() {
    let dir = TempDir::new().unwrap();
    let gt = gt_pose(4).translation;
    let centered = write_scene(dir.path(), 4, |_| {});
    let base = eval_ll(&centered, &dir.path().join("centered"));
    assert!(base >= 5.0, "{base}");

    for (i, (dx, dy)) in [(0.001, 0.0), (0.0, -0.001)].into_iter().enumerate() {
        let sub = dir.path().join(format!("shift{i}"));
        fs::create_dir(&sub).unwrap();
        let shifted = write_scene(&sub, 4, |c| {
            c["position_estimate"] = json!([gt.x + dx, gt.y + dy, gt.z]);
        });
        let ll = eval_ll(&shifted, &sub.join("out"));
        assert!((ll - base).abs() < 0.1, "{base} vs {ll}");
    }
}

#[test]
fn uniform_heatmaps_score_the_uniform_baseline() {
    let dir = TempDir::new().unwrap();
    let kp = box_keypoints();
    let gt = gt_pose(5);
    write_heatmaps(
        &HeatmapStack::uniform(RESOLUTION, kp.len()).unwrap(),
        &dir.path().join("uniform.kphm"),
    )
    .unwrap();
    let config = write_scene(dir.path(), 5, |c| {
        c.as_object_mut().unwrap().remove("synthesis");
        c["heatmaps_path"] = json!("uniform.kphm");
        c["intrinsics"] = intrinsics_json(&enclosing_crop(&kp, &gt, 0.010));
    });
    let ll = eval_ll(&config, &dir.path().join("out"));
    assert!((ll - (1.0 / (PI * PI)).ln()).abs() <= 0.005, "{ll}");
}

#[test]
fn sweep_reports_grid_bounds() {
    let dir = TempDir::new().unwrap();
    let config = write_scene(dir.path(), 1, |_| {});
    let out = dir.path().join("out");
    run_ok(&[
        "sweep",
        "--config",
        s(&config),
        "--out",
        s(&out),
        "--recursions",
        "0,1,2",
    ]);
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("recursion,grid_size,evaluations,gt_log_likelihood,upper_bound")
    );
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for (s, row) in rows.iter().enumerate() {
        let m = 72.0 * 8f64.powi(s as i32);
        assert_eq!(row[0], s as f64);
        assert_eq!(row[1], m);
        assert_eq!(row[2], m * 121.0);
        assert!(row[3] <= row[4] + 1e-9);
        assert!((row[4] - (m / (PI * PI)).ln()).abs() < 1e-9);
    }

    let failed = run(&[
        "sweep",
        "--config",
        s(&config),
        "--out",
        s(&out),
        "--recursions",
        "6",
    ]);
    assert_eq!(failed.status.code(), Some(1));
}

#[test]
fn viz_from_eval_output() {
    let dir = TempDir::new().unwrap();
    let config = write_scene(dir.path(), 6, |c| c["recursion"] = json!(2));
    let eval = dir.path().join("eval");
    run_ok(&["eval", "--config", s(&config), "--out", s(&eval)]);
    let viz = dir.path().join("viz");
    let input = eval.join("rotation_distribution.csv");
    run_ok(&[
        "viz",
        "--input",
        s(&input),
        "--out",
        s(&viz),
        "--min-alpha",
        "0",
    ]);

    let csv = fs::read_to_string(viz.join("viz.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("index,a,b,c,alpha,x,y"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 72 * 64);
    assert!(rows.iter().any(|r| r[4] == 1.0));
    for r in &rows {
        assert!((0.0..=1.0).contains(&r[4]));
        // inside the Mollweide ellipse
        let (x, y) = (r[5], r[6]);
        assert!(x * x / 8.0 + y * y / 2.0 <= 1.0 + 1e-9);
    }
    let ppm = fs::read(viz.join("viz.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n800 400\n255\n"));
    assert_eq!(ppm.len(), b"P6\n800 400\n255\n".len() + 800 * 400 * 3);
    assert!(viz.join("viz.json").exists());

    // a viz table is not a rotation distribution
    let failed = run(&["viz", "--input", s(&viz.join("viz.csv")), "--out", s(&viz)]);
    assert_eq!(failed.status.code(), Some(2));
}

#[test]
fn grid_and_score_commands() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("grid");
    run_ok(&["grid", "--recursion", "1", "--out", s(&out)]);
    let rows = fs::read_to_string(out.join("grid.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 576 + 1);

    for (i, seed) in [1u64, 2].into_iter().enumerate() {
        let sub = dir.path().join(format!("scene{i}"));
        fs::create_dir(&sub).unwrap();
        write_scene(&sub, seed, |c| c["recursion"] = json!(2));
    }
    let list = dir.path().join("scenes.json");
    fs::write(
        &list,
        r#"[{"object": "box", "config": "scene0/scene.json"},
            {"object": "box", "config": "scene1/scene.json"}]"#,
    )
    .unwrap();
    let score = dir.path().join("score");
    run_ok(&["score", "--config", s(&list), "--out", s(&score)]);
    let csv = fs::read_to_string(score.join("score.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(score.join("score.json").exists());
}

#[test]
fn bench_counts_every_pose() {
    let dir = TempDir::new().unwrap();
    let path = write_scene(dir.path(), 1, |_| {});
    let config = SceneConfig::load(&path).unwrap();
    let report = cmd_bench(&config, 1).unwrap();
    assert_eq!(report.evaluations, 4_460_544);
    assert!(report.evaluations_per_second > 0.0);

    let single = write_scene(dir.path(), 1, |c| {
        c["recursion"] = json!(0);
        c["translation_grid"] = json!({ "side": 1 });
    });
    let report = cmd_bench(&SceneConfig::load(&single).unwrap(), 2).unwrap();
    assert_eq!(report.evaluations, 72);
    assert_eq!(report.repetitions, 2);

    let doubled = write_scene(dir.path(), 1, |c| {
        c["recursion"] = json!(1);
        c["translation_grid"] = json!({ "depth_offsets": [0.0, 0.001] });
    });
    let report = cmd_bench(&SceneConfig::load(&doubled).unwrap(), 1).unwrap();
    assert_eq!(report.evaluations, 576 * 242);
}
