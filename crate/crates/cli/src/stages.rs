//! Stage implementations shared by the individual subcommands and the
//! `pipeline` runner. Each stage validates its inputs before it creates its
//! output directory, writes its artifacts and a `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use fpp_core::calib::lm::LmConfig;
use fpp_core::calib::StereoConfig;
use fpp_core::geometry::{Intrinsics, RigidPose};
use fpp_core::image::GrayImage16;
use fpp_core::io::{load_projector_calibration, read_ply, write_ply, CalibrationFile, Extrinsics, PlyFormat};
use fpp_core::mesh::TriangleMesh;
use fpp_core::metrology::{cloud_to_mesh, fit_sphere_msac, icp_register, radial_error, IcpConfig, IcpTarget, MsacConfig, RadialError, SphereFit};
use fpp_core::patterns::{gen_calibration_board, BoardMetrics, BoardScaling, CalibBoardSpec, FringeDirection, PatternSetSpec};
use fpp_core::pipeline::{analyze_direction, calibrate_captures, Capture};
use fpp_core::recon::{reconstruct_cloud, PointCloud, TriangulationInputs};
use fpp_core::render::capture::{read_manifest, run_capture_session, PoseProtocol};
use fpp_core::render::config::{ObjectConfig, SceneConfig, TextureConfig};
use fpp_core::render::render_frame;
use fpp_core::render::scenes::BoardObject;
use fpp_core::render::Scene;
use fpp_core::twin::{camera_params_to_sim, extent_linearity_sweep, projected_extent_at_distance, CameraTransferSpec, ExtentSweep, ProjectedExtent, SimCameraParams};

use crate::failure::{CliResult, Classify, Failure};
use crate::manifest::ManifestBuilder;

pub fn write_json(path: &Path, value: &impl Serialize, stage: &str) -> CliResult<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).stage_err(stage)?;
    Ok(path.to_path_buf())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).config_err(format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).config_err(format!("parsing {what} {}", path.display()))
}

pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::config(format!("{what} not found: {}", path.display())))
    }
}

fn create_dir(dir: &Path, stage: &str) -> CliResult<()> {
    fs::create_dir_all(dir).stage_err(stage)
}

// ---------------------------------------------------------------- patterns

pub fn gen_patterns(spec: &PatternSetSpec, out: &Path) -> CliResult<()> {
    const STAGE: &str = "patterns";
    let t0 = Instant::now();
    let patterns = spec.build().config_err("invalid pattern spec")?;
    create_dir(out, STAGE)?;
    let mut m = ManifestBuilder::new(STAGE, out, 0, spec);
    for p in &patterns {
        let path = out.join(format!("{}.png", p.id));
        p.image.write(&path).stage_err(STAGE)?;
        m.artifact(path);
    }
    m.artifact(write_json(&out.join("pattern_spec.json"), spec, STAGE)?);
    m.timing("generate", t0);
    m.finish()?;
    log::info!("wrote {} patterns to {}", patterns.len(), out.display());
    Ok(())
}

// ------------------------------------------------------------------- board

#[derive(Debug, Serialize, Deserialize)]
pub struct BoardReport {
    pub spec: CalibBoardSpec,
    pub scaling: BoardScaling,
    pub metrics: BoardMetrics,
}

pub fn gen_board(spec: &CalibBoardSpec, scaling: BoardScaling, out: &Path) -> CliResult<()> {
    const STAGE: &str = "board";
    let t0 = Instant::now();
    let (texture, metrics) = gen_calibration_board(spec, scaling).config_err("invalid board spec")?;
    create_dir(out, STAGE)?;
    let report = BoardReport { spec: spec.clone(), scaling, metrics };
    let mut m = ManifestBuilder::new(STAGE, out, 0, &report);
    let png = out.join("board.png");
    texture.write(&png).stage_err(STAGE)?;
    m.artifact(png);
    m.artifact(write_json(&out.join("board_metrics.json"), &report, STAGE)?);
    m.timing("generate", t0);
    m.finish()?;
    log::info!(
        "board: {} circles, diameter {:.2} mm, scale {:.4}",
        report.metrics.circle_count,
        report.metrics.circle_diameter_sim_m * 1000.0,
        report.metrics.scale
    );
    Ok(())
}

// ------------------------------------------------------------------ render

/// Loads and builds a scene file, resolving relative paths against its directory.
pub fn load_scene(path: &Path) -> CliResult<(SceneConfig, Scene)> {
    require_file(path, "scene file")?;
    let cfg = SceneConfig::load(path).config_err("loading scene")?;
    let base = path.parent().unwrap_or(Path::new("."));
    let scene = cfg.build(base).config_err(format!("building scene {}", path.display()))?;
    Ok((cfg, scene))
}

pub fn render_one(scene_path: &Path, pattern_path: Option<&Path>, out: &Path) -> CliResult<()> {
    const STAGE: &str = "render";
    let (cfg, scene) = load_scene(scene_path)?;
    let pattern = match pattern_path {
        Some(p) => {
            require_file(p, "pattern image")?;
            Some(GrayImage16::read(p).config_err(format!("reading pattern {}", p.display()))?)
        }
        None => None,
    };
    let t0 = Instant::now();
    let frame = render_frame(&scene, pattern.as_ref()).config_err("rendering")?;
    create_dir(out, STAGE)?;
    let mut m = ManifestBuilder::new(STAGE, out, 0, &cfg);
    m.input("scene", scene_path)?;
    if let Some(p) = pattern_path {
        m.input("pattern", p)?;
    }
    let path = out.join("frame.png");
    frame.write(&path).stage_err(STAGE)?;
    m.artifact(path);
    m.timing("render", t0);
    m.finish()?;
    Ok(())
}

// ----------------------------------------------------------------- capture

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoardPlacement {
    pub spec: CalibBoardSpec,
    pub scaling: BoardScaling,
    /// Index of the board plane among the scene objects.
    pub object_index: usize,
}

/// Board-to-world pose as written to `capture.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub r: [f64; 9],
    pub t: [f64; 3],
}

/// Description of a capture directory, read back by later stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptureMeta {
    pub patterns: PatternSetSpec,
    pub board: Option<BoardPlacement>,
    pub protocol: Option<PoseProtocol>,
    pub poses: Vec<PoseRecord>,
}

/// Finds the first board-textured plane of a scene configuration and its
/// configured placement.
pub fn find_board(cfg: &SceneConfig) -> CliResult<Option<(BoardPlacement, RigidPose)>> {
    for (i, o) in cfg.objects.iter().enumerate() {
        if let ObjectConfig::Plane { pose, texture: Some(TextureConfig::Board { spec, scaling }), .. } = o {
            let base = pose.device_pose(cfg.unit).config_err("board pose")?;
            return Ok(Some((BoardPlacement { spec: spec.clone(), scaling: *scaling, object_index: i }, base)));
        }
    }
    Ok(None)
}

/// Renders every pattern at every board pose (or once, without a board).
pub fn capture(
    scene: &Scene,
    spec: &PatternSetSpec,
    board: Option<(BoardPlacement, RigidPose)>,
    protocol: &PoseProtocol,
    out: &Path,
    scene_file: Option<&Path>,
) -> CliResult<()> {
    const STAGE: &str = "capture";
    let patterns = spec.build().config_err("invalid pattern spec")?;
    let (placement, poses, object) = match board {
        Some((placement, base)) => {
            let object = BoardObject::new(&placement.spec, placement.scaling).config_err("invalid board")?;
            let poses = protocol.generate(&base, &object.plane_center()).config_err("invalid pose protocol")?;
            (Some(placement), poses, Some(object))
        }
        None => (None, Vec::new(), None),
    };
    let meta = CaptureMeta {
        patterns: spec.clone(),
        protocol: placement.as_ref().map(|_| protocol.clone()),
        board: placement.clone(),
        poses: poses
            .iter()
            .map(|p| {
                let e = Extrinsics::from_pose(p);
                PoseRecord { r: e.r, t: e.t }
            })
            .collect(),
    };
    create_dir(out, STAGE)?;
    let t0 = Instant::now();
    let mut m = ManifestBuilder::new(STAGE, out, protocol.seed, &meta);
    if let Some(f) = scene_file {
        m.input("scene", f)?;
    }
    let board_arg = match (&placement, &object) {
        (Some(p), Some(o)) => Some((poses.as_slice(), o, p.object_index)),
        _ => None,
    };
    let records = run_capture_session(scene, &patterns, board_arg, out).stage_err(STAGE)?;
    for r in &records {
        m.artifact(out.join(&r.path));
    }
    m.artifact(out.join("manifest.jsonl"));
    m.artifact(write_json(&out.join("capture.json"), &meta, STAGE)?);
    m.timing("render", t0);
    m.finish()?;
    log::info!("captured {} frames into {}", records.len(), out.display());
    Ok(())
}

/// Reads a capture directory back into per-pose frame maps.
pub fn load_captures(dir: &Path) -> CliResult<(CaptureMeta, Vec<Capture>)> {
    let meta: CaptureMeta = read_json(&dir.join("capture.json"), "capture description")?;
    let manifest = dir.join("manifest.jsonl");
    require_file(&manifest, "capture manifest")?;
    let records = read_manifest(&manifest).config_err("reading capture manifest")?;
    let mut by_pose: BTreeMap<usize, Capture> = BTreeMap::new();
    for r in records {
        let path = dir.join(&r.path);
        let img = GrayImage16::read(&path).config_err(format!("reading frame {}", path.display()))?;
        by_pose.entry(r.pose_index).or_default().insert(r.pattern_id, img);
    }
    Ok((meta, by_pose.into_values().collect()))
}

// --------------------------------------------------------------- calibrate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationThresholds {
    #[serde(default = "default_rms_threshold")]
    pub rms_threshold: f64,
    #[serde(default = "default_outlier_factor")]
    pub outlier_factor: f64,
    /// Minimum fringe modulation as a fraction of full scale.
    #[serde(default = "default_modulation")]
    pub modulation_threshold: f64,
}

fn default_rms_threshold() -> f64 {
    0.5
}
fn default_outlier_factor() -> f64 {
    3.0
}
fn default_modulation() -> f64 {
    0.02
}

impl Default for CalibrationThresholds {
    fn default() -> Self {
        CalibrationThresholds { rms_threshold: 0.5, outlier_factor: 3.0, modulation_threshold: 0.02 }
    }
}

#[derive(Debug, Serialize)]
struct CalibrationReport {
    camera: Intrinsics,
    projector: Intrinsics,
    camera_to_projector: PoseRecord,
    stereo_reproj_rms: f64,
    proj_reproj_rms: f64,
    rms_threshold: f64,
    within_threshold: bool,
    accepted_poses: Vec<usize>,
    skipped_poses: Vec<(usize, String)>,
    iterations: usize,
}

pub fn calibrate(capture_dir: &Path, thresholds: &CalibrationThresholds, out: &Path) -> CliResult<()> {
    const STAGE: &str = "calibrate";
    if !(thresholds.rms_threshold > 0.0 && thresholds.outlier_factor > 1.0 && (0.0..1.0).contains(&thresholds.modulation_threshold)) {
        return Err(Failure::config(format!("invalid calibration thresholds {thresholds:?}")));
    }
    let (meta, captures) = load_captures(capture_dir)?;
    let board = meta.board.as_ref().ok_or_else(|| Failure::config("capture has no calibration board"))?;
    let t0 = Instant::now();
    let stereo = StereoConfig { outlier_factor: thresholds.outlier_factor, rms_threshold: thresholds.rms_threshold };
    let run = calibrate_captures(
        &meta.patterns,
        &board.spec,
        board.scaling,
        &captures,
        thresholds.modulation_threshold * 65535.0,
        &stereo,
        &LmConfig::default(),
    )
    .stage_err(STAGE)?;
    create_dir(out, STAGE)?;
    let mut m = ManifestBuilder::new(STAGE, out, 0, thresholds);
    m.input("capture", &capture_dir.join("capture.json"))?;
    let r = &run.result;
    let e = Extrinsics::from_pose(&r.cam_to_proj);
    let report = CalibrationReport {
        camera: r.cam,
        projector: r.proj,
        camera_to_projector: PoseRecord { r: e.r, t: e.t },
        stereo_reproj_rms: r.stereo_reproj_rms,
        proj_reproj_rms: r.proj_reproj_rms,
        rms_threshold: thresholds.rms_threshold,
        within_threshold: r.within_threshold(thresholds.rms_threshold),
        accepted_poses: r.accepted_poses.clone(),
        skipped_poses: run.skipped.clone(),
        iterations: r.iterations,
    };
    m.artifact(write_json(&out.join("calibration.json"), &r.to_file(), STAGE)?);
    m.artifact(write_json(&out.join("calibration_report.json"), &report, STAGE)?);
    m.timing("calibrate", t0);
    m.finish()?;
    log::info!(
        "stereo RMS {:.4} px, projector RMS {:.4} px, {} poses accepted",
        r.stereo_reproj_rms,
        r.proj_reproj_rms,
        r.accepted_poses.len()
    );
    if !report.within_threshold {
        return Err(Failure::threshold(format!(
            "calibration RMS ({:.4}, {:.4}) px exceeds threshold {} px",
            r.stereo_reproj_rms, r.proj_reproj_rms, thresholds.rms_threshold
        )));
    }
    Ok(())
}

// ------------------------------------------------------------- reconstruct

#[derive(Debug, Serialize)]
struct ReconstructionReport {
    pose: usize,
    points: usize,
    valid_pixels: usize,
    skipped_singular: usize,
    scale: f64,
}

pub fn load_calibration(path: &Path) -> CliResult<CalibrationFile> {
    require_file(path, "calibration file")?;
    CalibrationFile::load(path).config_err("loading calibration")
}

pub fn reconstruct(capture_dir: &Path, pose: usize, calib_path: &Path, scale: f64, modulation_threshold: f64, format: PlyFormat, out: &Path) -> CliResult<()> {
    const STAGE: &str = "reconstruct";
    let calib = load_calibration(calib_path)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Failure::config(format!("scale must be positive, got {scale}")));
    }
    let (meta, captures) = load_captures(capture_dir)?;
    let capture = captures.get(pose).ok_or_else(|| Failure::config(format!("capture has no pose {pose}")))?;
    let inputs = TriangulationInputs::from_file(&calib, meta.patterns.period_px as f64).config_err("calibration geometry")?;
    let t0 = Instant::now();
    let maps = analyze_direction(&meta.patterns, capture, FringeDirection::Vertical, modulation_threshold * 65535.0).stage_err(STAGE)?;
    let rec = reconstruct_cloud(&maps, &inputs, scale).stage_err(STAGE)?;
    create_dir(out, STAGE)?;
    let mut m = ManifestBuilder::new(STAGE, out, 0, &(pose, scale, modulation_threshold));
    m.input("calibration", calib_path)?;
    m.input("capture", &capture_dir.join("capture.json"))?;
    let ply = out.join("cloud.ply");
    write_ply(&ply, &rec.cloud.to_ply(), format).stage_err(STAGE)?;
    m.artifact(ply);
    let report = ReconstructionReport { pose, points: rec.cloud.len(), valid_pixels: maps.valid_count(), skipped_singular: rec.skipped, scale };
    m.artifact(write_json(&out.join("reconstruction.json"), &report, STAGE)?);
    m.timing("reconstruct", t0);
    m.finish()?;
    log::info!("reconstructed {} points", rec.cloud.len());
    Ok(())
}

// -------------------------------------------------------------- fit-sphere

pub fn load_cloud(path: &Path) -> CliResult<PointCloud> {
    require_file(path, "point cloud")?;
    let data = read_ply(path).config_err(format!("reading {}", path.display()))?;
    Ok(PointCloud::from_ply(&data))
}

#[derive(Debug, Serialize)]
struct SphereReport {
    fit: SphereFit,
    inlier_fraction: f64,
    radial_error: Option<RadialError>,
    max_radial_error_mm: Option<f64>,
}

pub fn fit_sphere(cloud_path: &Path, cfg: &MsacConfig, actual_radius: Option<f64>, max_radial_error: Option<f64>, out: &Path) -> CliResult<()> {
    const STAGE: &str = "fit-sphere";
    if let Some(r) = actual_radius {
        if !(r > 0.0) {
            return Err(Failure::config(format!("actual radius must be positive, got {r}")));
        }
    }
    let cloud = load_cloud(cloud_path)?;
    let t0 = Instant::now();
    let fit = fit_sphere_msac(&cloud, cfg).stage_err(STAGE)?;
    let err = actual_radius.map(|r| radial_error(&fit, r));
    create_dir(out, STAGE)?;
    let mut m = ManifestBuilder::new(STAGE, out, cfg.seed, cfg);
    m.input("cloud", cloud_path)?;
    let report = SphereReport { inlier_fraction: fit.inlier_fraction(), fit, radial_error: err, max_radial_error_mm: max_radial_error };
    m.artifact(write_json(&out.join("sphere_fit.json"), &report, STAGE)?);
    m.timing("fit", t0);
    m.finish()?;
    log::info!("sphere radius {:.4} mm, inliers {}/{}", fit.radius, fit.inliers, fit.total);
    if let (Some(e), Some(max)) = (err, max_radial_error) {
        if e.absolute_mm > max {
            return Err(Failure::threshold(format!("radial error {:.4} mm exceeds {max} mm", e.absolute_mm)));
        }
    }
    Ok(())
}

// --------------------------------------------------------------------- c2m

pub fn load_mesh(path: &Path) -> CliResult<TriangleMesh> {
    require_file(path, "mesh")?;
    let data = read_ply(path).config_err(format!("reading {}", path.display()))?;
    TriangleMesh::new(data.points, data.faces, 0.0).config_err(format!("mesh {}", path.display()))
}

pub fn c2m(cloud_path: &Path, mesh_path: &Path, bins: usize, out: &Path) -> CliResult<()> {
    const STAGE: &str = "c2m";
    if bins == 0 {
        return Err(Failure::config("bins must be at least 1"));
    }
    let cloud = load_cloud(cloud_path)?;
    let mesh = load_mesh(mesh_path)?;
    let t0 = Instant::now();
    let report = cloud_to_mesh(&cloud, &mesh, bins).stage_err(STAGE)?;
    create_dir(out, STAGE)?;
    let mut m = ManifestBuilder::new(STAGE, out, 0, &bins);
    m.input("cloud", cloud_path)?;
    m.input("mesh", mesh_path)?;
    m.artifact(write_json(&out.join("c2m.json"), &report, STAGE)?);
    let csv = out.join("c2m_histogram.csv");
    report.histogram.write_csv(&csv).stage_err(STAGE)?;
    m.artifact(csv);
    m.timing("c2m", t0);
    m.finish()?;
    log::info!("C2M mean {:.4} mm, RMS {:.4} mm, max {:.4} mm", report.mean, report.rms, report.max);
    Ok(())
}

// --------------------------------------------------------------------- icp

#[derive(Debug, Serialize)]
struct IcpReport {
    pose: PoseRecord,
    rms: f64,
    iterations: usize,
    rms_history: Vec<f64>,
}

pub fn icp(source_path: &Path, target_path: &Path, cfg: &IcpConfig, out: &Path) -> CliResult<()> {
    const STAGE: &str = "icp";
    let source = load_cloud(source_path)?;
    require_file(target_path, "target")?;
    let target_data = read_ply(target_path).config_err(format!("reading {}", target_path.display()))?;
    let target_cloud;
    let target_mesh;
    let target = if target_data.faces.is_empty() {
        target_cloud = PointCloud::from_ply(&target_data);
        IcpTarget::Cloud(&target_cloud)
    } else {
        target_mesh = TriangleMesh::new(target_data.points, target_data.faces, 0.0).config_err("target mesh")?;
        IcpTarget::Mesh(&target_mesh)
    };
    let t0 = Instant::now();
    let res = icp_register(&source, target, RigidPose::identity(), cfg).stage_err(STAGE)?;
    create_dir(out, STAGE)?;
    let mut m = ManifestBuilder::new(STAGE, out, 0, cfg);
    m.input("source", source_path)?;
    m.input("target", target_path)?;
    let ply = out.join("registered.ply");
    write_ply(&ply, &res.transformed.to_ply(), PlyFormat::Ascii).stage_err(STAGE)?;
    m.artifact(ply);
    let e = Extrinsics::from_pose(&res.pose);
    let report = IcpReport { pose: PoseRecord { r: e.r, t: e.t }, rms: res.rms, iterations: res.iterations, rms_history: res.rms_history };
    m.artifact(write_json(&out.join("icp.json"), &report, STAGE)?);
    m.timing("icp", t0);
    m.finish()?;
    log::info!("ICP RMS {:.4} mm after {} iterations", report.rms, report.iterations);
    Ok(())
}

// -------------------------------------------------------------------- twin

#[derive(Debug, Serialize)]
struct TwinReport {
    projector: Intrinsics,
    resolution: [u32; 2],
    extents: Vec<ProjectedExtent>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<ExtentSweep>,
    #[serde(skip_serializing_if = "Option::is_none")]
    camera_transfer: Option<SimCameraParams>,
}

pub fn twin_extent(calib_path: &Path, z_list: &[f64], resolution: Option<(u32, u32)>, pixel_size_mm: Option<f64>, out: &Path) -> CliResult<()> {
    const STAGE: &str = "twin";
    require_file(calib_path, "calibration file")?;
    if z_list.is_empty() || z_list.iter().any(|z| !(*z > 0.0 && z.is_finite())) {
        return Err(Failure::config(format!("distances must be positive, got {z_list:?}")));
    }
    let projector = load_projector_calibration(calib_path).config_err("loading projector calibration")?;
    let camera_transfer = match pixel_size_mm {
        Some(s) => {
            let calib = CalibrationFile::load(calib_path).config_err("camera transfer needs a full calibration document")?;
            let k = calib.camera.intrinsics;
            let spec = CameraTransferSpec { fx: k.fx, fy: k.fy, width: k.width, height: k.height, pixel_size_mm: s };
            Some(camera_params_to_sim(&spec).config_err("camera transfer")?)
        }
        None => None,
    };
    let k = projector.intrinsics;
    let res = resolution.unwrap_or((k.width, k.height));
    let mext = projector.extrinsics.matrix_mm();
    let t0 = Instant::now();
    let extents = z_list.iter().map(|&z| projected_extent_at_distance(&k, &mext, res, z)).collect::<Result<Vec<_>, _>>().stage_err(STAGE)?;
    let sweep = if z_list.len() >= 2 { Some(extent_linearity_sweep(&k, &mext, res, z_list).stage_err(STAGE)?) } else { None };
    create_dir(out, STAGE)?;
    let mut m = ManifestBuilder::new(STAGE, out, 0, &(z_list, res, pixel_size_mm));
    m.input("calibration", calib_path)?;
    if let Some(s) = &sweep {
        let csv = out.join("extent_sweep.csv");
        fs::write(&csv, s.to_csv()).stage_err(STAGE)?;
        m.artifact(csv);
    }
    for e in &extents {
        log::info!("z = {} mm: width {:.2} mm, height {:.2} mm", e.z, e.width_extent, e.height_extent);
    }
    let report = TwinReport { projector: k, resolution: [res.0, res.1], extents, sweep, camera_transfer };
    m.artifact(write_json(&out.join("extent.json"), &report, STAGE)?);
    m.timing("extent", t0);
    m.finish()?;
    Ok(())
}
