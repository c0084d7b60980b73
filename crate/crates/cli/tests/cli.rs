//! End-to-end tests of the `fpp` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{Rotation3, Vector3};
use serde_json::Value;

use fpp_core::io::{write_ply, PlyData, PlyFormat};
use fpp_core::mesh::TriangleMesh;

fn fpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpp"))
        .args(["--quiet"])
        .args(args)
        .env_remove("FPP_OUTPUT_ROOT")
        .output()
        .expect("fpp runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "fpp failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Manifest with the wall-clock timings removed.
fn manifest_without_timings(dir: &Path) -> Value {
    let mut m = json(&dir.join("manifest.json"));
    m.as_object_mut().unwrap().remove("timings_ms");
    m
}

fn assert_same_tree(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut other: Vec<_> = fs::read_dir(b).unwrap().map(|e| e.unwrap().file_name()).collect();
    other.sort();
    assert_eq!(names, other, "{} vs {}", a.display(), b.display());
    for n in names {
        let (pa, pb) = (a.join(&n), b.join(&n));
        if pa.is_dir() {
            assert_same_tree(&pa, &pb);
        } else if n == "manifest.json" {
            assert_eq!(manifest_without_timings(a), manifest_without_timings(b));
        } else {
            assert!(fs::read(&pa).unwrap() == fs::read(&pb).unwrap(), "{} differs", pa.display());
        }
    }
}

fn sphere_points(n: usize, center: Vector3<f64>, r: f64) -> Vec<Vector3<f64>> {
    // Fibonacci lattice.
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - y * y).sqrt();
            let a = golden * i as f64;
            center + Vector3::new(rho * a.cos(), y, rho * a.sin()) * r
        })
        .collect()
}

fn write_cloud(path: &Path, points: Vec<Vector3<f64>>) {
    write_ply(path, &PlyData { points, uv: None, faces: vec![] }, PlyFormat::Ascii).unwrap();
}

#[test]
fn gen_patterns_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(fpp(&["gen-patterns", "--out", s(&a)]));
    ok(fpp(&["gen-patterns", "--out", s(&b)]));
    let pngs = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 52);
    assert_same_tree(&a, &b);
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["stage"], "patterns");
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 53);
}

#[test]
fn output_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fpp"))
        .args(["-q", "gen-board"])
        .env("FPP_OUTPUT_ROOT", dir.path())
        .output()
        .unwrap();
    ok(out);
    let report = json(&dir.path().join("board/board_metrics.json"));
    assert_eq!(report["metrics"]["circle_count"], 33);
}

#[test]
fn twin_extent_for_real_system_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let calib = repo_file("../core/fixtures/real_system_calibration.json");
    ok(fpp(&["pipeline", "--stages", "twin", "--calib", s(&calib), "--z", "400", "--out", s(dir.path())]));
    let report = json(&dir.path().join("twin/extent.json"));
    let e = &report["extents"][0];
    assert!((e["width_extent"].as_f64().unwrap() - 202.7).abs() <= 0.5, "{e}");
    assert!((e["height_extent"].as_f64().unwrap() - 323.3).abs() <= 0.5, "{e}");
    // Only the twin stage ran.
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn twin_extent_sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let calib = repo_file("../core/fixtures/virtual_projector_1m.json");
    ok(fpp(&["twin-extent", "--calib", s(&calib), "--z", "500,1000", "--pixel-size-mm", "0.00345", "--out", s(dir.path())]));
    let report = json(&dir.path().join("extent.json"));
    let far = &report["extents"][1];
    assert!((far["height_extent"].as_f64().unwrap() - 626.3).abs() <= 1.0);
    assert!((far["width_extent"].as_f64().unwrap() - 501.1).abs() <= 1.0);
    assert!(report["camera_transfer"]["focal_length_mm"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(dir.path().join("extent_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn missing_scene_is_a_config_error_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let missing = dir.path().join("no_such_scene.json");
    let out = fpp(&["pipeline", "--stages", "capture", "--scene", s(&missing), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_scene.json"));
    assert!(!out_dir.exists());

    let out = fpp(&["capture", "--scene", s(&missing), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 2);
    assert!(!out_dir.exists());
}

#[test]
fn downstream_stage_without_inputs_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = fpp(&["pipeline", "--stages", "reconstruct", "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    assert_eq!(code(&fpp(&["pipeline", "--stages", "bogus"])), 2);
}

#[test]
fn malformed_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"camera_widht": 480}"#).unwrap();
    let out = fpp(&["pipeline", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn fit_sphere_reports_radial_error_and_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("sphere.ply");
    let c = Vector3::new(5.0, -3.0, 480.0);
    let mut pts = sphere_points(2000, c, 50.0);
    pts.extend((0..50).map(|i| c + Vector3::new(90.0, i as f64, 0.0)));
    write_cloud(&cloud, pts);

    let out = dir.path().join("fit");
    ok(fpp(&["fit-sphere", "--cloud", s(&cloud), "--radius", "50", "--max-radial-error", "1", "--seed", "3", "--out", s(&out)]));
    let report = json(&out.join("sphere_fit.json"));
    assert!(report["radial_error"]["absolute_mm"].as_f64().unwrap() < 1e-6);
    assert_eq!(report["fit"]["inliers"], 2000);
    assert_eq!(json(&out.join("manifest.json"))["seed"], 3);

    let failing = fpp(&["fit-sphere", "--cloud", s(&cloud), "--radius", "45", "--max-radial-error", "1", "--out", s(&dir.path().join("fit2"))]);
    assert_eq!(code(&failing), 4);
    assert!(dir.path().join("fit2/sphere_fit.json").is_file());
}

#[test]
fn c2m_on_icosphere_and_icp_on_surface() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = TriangleMesh::icosphere(Vector3::zeros(), 50.0, 3);
    let mesh_path = dir.path().join("mesh.ply");
    write_ply(&mesh_path, &PlyData { points: mesh.vertices.clone(), uv: None, faces: mesh.faces.clone() }, PlyFormat::Ascii).unwrap();

    // Points 0.5 mm outside every vertex.
    let offset: Vec<_> = mesh.vertices.iter().map(|v| v * (50.5 / 50.0)).collect();
    let cloud_path = dir.path().join("offset.ply");
    write_cloud(&cloud_path, offset);
    let out = dir.path().join("c2m");
    ok(fpp(&["c2m", "--cloud", s(&cloud_path), "--mesh", s(&mesh_path), "--bins", "10", "--out", s(&out)]));
    let report = json(&out.join("c2m.json"));
    assert!((report["max"].as_f64().unwrap() - 0.5).abs() < 1e-9);
    let csv = fs::read_to_string(out.join("c2m_histogram.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);

    // A rotated and shifted copy of an asymmetric surface registers back.
    let surface: Vec<_> = (0..40)
        .flat_map(|i| (0..30).map(move |j| (i as f64 * 2.0, j as f64 * 2.0)))
        .map(|(x, y)| Vector3::new(x, y, 10.0 * (x / 17.0).sin() * (y / 11.0).cos() + 0.01 * x * y))
        .collect();
    let rot = Rotation3::from_euler_angles(0.004, -0.003, 0.006);
    let moved: Vec<_> = surface.iter().map(|v| rot * v + Vector3::new(0.3, -0.2, 0.4)).collect();
    let (src, dst) = (dir.path().join("moved.ply"), dir.path().join("surface.ply"));
    write_cloud(&src, moved);
    write_cloud(&dst, surface);
    let out = dir.path().join("icp");
    ok(fpp(&["icp", "--source", s(&src), "--target", s(&dst), "--out", s(&out)]));
    let report = json(&out.join("icp.json"));
    assert!(report["rms"].as_f64().unwrap() < 1e-6, "{report}");
    assert!(out.join("registered.ply").is_file());
}

/// Full run on the stock configuration, then stage isolation: each stage
/// re-run alone on a copy of the upstream outputs reproduces its artifacts.
#[test]
fn full_pipeline_meets_sphere_tolerance_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let config = repo_file("configs/sphere50.json");
    ok(fpp(&["pipeline", "--config", s(&config), "--stages", "all", "--out", s(&run)]));

    let calib = json(&run.join("calibration/calibration_report.json"));
    assert!(calib["stereo_reproj_rms"].as_f64().unwrap() < 0.5);
    assert!(calib["proj_reproj_rms"].as_f64().unwrap() < 0.5);
    let fit = json(&run.join("validation/sphere_fit.json"));
    let err = &fit["radial_error"];
    assert!(err["absolute_mm"].as_f64().unwrap() <= 1.0, "{fit}");
    assert!(err["relative"].as_f64().unwrap() <= 0.02);
    assert!(fit["inlier_fraction"].as_f64().unwrap() >= 0.99);
    assert!(run.join("reconstruction/cloud.ply").is_file());
    assert!(run.join("twin/extent_sweep.csv").is_file());
    for stage in ["patterns", "board", "capture_board", "capture_scene", "calibration", "reconstruction", "validation", "twin"] {
        assert_eq!(json(&run.join(stage).join("manifest.json"))["seed"], 0, "{stage}");
    }

    for (stage, dir_name) in [("calibrate", "calibration"), ("reconstruct", "reconstruction"), ("validate", "validation"), ("twin", "twin")] {
        let saved = dir.path().join(format!("saved_{dir_name}"));
        fs::rename(run.join(dir_name), &saved).unwrap();
        ok(fpp(&["pipeline", "--config", s(&config), "--stages", stage, "--out", s(&run)]));
        assert_same_tree(&saved, &run.join(dir_name));
    }

    // The same capture against an unreachable RMS threshold fails with exit code 4.
    let strict = fpp(&["calibrate", "--capture", s(&run.join("capture_board")), "--rms-threshold", "1e-6", "--out", s(&dir.path().join("strict"))]);
    assert_eq!(code(&strict), 4);
}
