//! End-to-end runner: patterns, board, capture, calibrate, reconstruct,
//! validate and twin, executed in that order over one output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fpp_core::io::PlyFormat;
use fpp_core::metrology::MsacConfig;
use fpp_core::patterns::{BoardScaling, CalibBoardSpec, PatternSetSpec};
use fpp_core::render::capture::PoseProtocol;
use fpp_core::render::scenes::{board_scene, sphere_scene, BoardObject, LightingTier};
use fpp_core::render::Material;

use crate::failure::{CliResult, Classify, Failure};
use crate::stages::{self, BoardPlacement, CalibrationThresholds};

pub const STAGES: [&str; 7] = ["patterns", "board", "capture", "calibrate", "reconstruct", "validate", "twin"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub count: usize,
    pub translation_mm: f64,
    pub tilt_min_deg: f64,
    pub tilt_max_deg: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let p = PoseProtocol::default();
        ProtocolConfig { count: p.count, translation_mm: p.translation_mm, tilt_min_deg: p.tilt_min_deg, tilt_max_deg: p.tilt_max_deg }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub scale: f64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig { scale: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub sphere_radius_mm: f64,
    pub inlier_threshold_mm: f64,
    pub max_trials: usize,
    pub max_radial_error_mm: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig { sphere_radius_mm: 50.0, inlier_threshold_mm: 1.0, max_trials: 2000, max_radial_error_mm: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinConfig {
    /// Calibration to evaluate; defaults to the calibrate stage output.
    pub calibration: Option<PathBuf>,
    pub z_mm: Vec<f64>,
}

impl Default for TwinConfig {
    fn default() -> Self {
        TwinConfig { calibration: None, z_mm: vec![400.0, 600.0, 800.0, 1000.0] }
    }
}

/// Pipeline configuration. Relative paths resolve against the directory of
/// the configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Scene measured by the reconstruct stage; the stock 50 mm sphere when absent.
    pub measurement_scene: Option<PathBuf>,
    /// Width of the stock square camera used for calibration.
    pub camera_width: u32,
    pub patterns: PatternSetSpec,
    pub board: CalibBoardSpec,
    pub board_scaling: BoardScaling,
    pub protocol: ProtocolConfig,
    pub output_dir: Option<PathBuf>,
    pub calibration: CalibrationThresholds,
    pub reconstruction: ReconstructionConfig,
    pub validation: ValidationConfig,
    pub twin: TwinConfig,
    /// Drives the pose jitter and the sphere fit.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            measurement_scene: None,
            camera_width: 480,
            patterns: PatternSetSpec::default(),
            board: CalibBoardSpec::default(),
            board_scaling: BoardScaling::default(),
            protocol: ProtocolConfig::default(),
            output_dir: None,
            calibration: CalibrationThresholds::default(),
            reconstruction: ReconstructionConfig::default(),
            validation: ValidationConfig::default(),
            twin: TwinConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        stages::require_file(path, "pipeline config")?;
        let mut cfg: PipelineConfig = stages::read_json(path, "pipeline config")?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.measurement_scene = cfg.measurement_scene.map(|p| base.join(p));
        cfg.output_dir = cfg.output_dir.map(|p| base.join(p));
        cfg.twin.calibration = cfg.twin.calibration.map(|p| base.join(p));
        Ok(cfg)
    }

    fn protocol(&self) -> PoseProtocol {
        let p = &self.protocol;
        PoseProtocol {
            count: p.count,
            translation_mm: p.translation_mm,
            tilt_min_deg: p.tilt_min_deg,
            tilt_max_deg: p.tilt_max_deg,
            seed: self.seed,
        }
    }
}

/// Parses `all` or a comma-separated subset into canonical stage order.
pub fn parse_stages(list: &str) -> CliResult<Vec<&'static str>> {
    let requested: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if requested.contains(&"all") {
        return Ok(STAGES.to_vec());
    }
    for r in &requested {
        if !STAGES.contains(r) {
            return Err(Failure::config(format!("unknown stage '{r}'; expected one of {} or 'all'", STAGES.join(", "))));
        }
    }
    if requested.is_empty() {
        return Err(Failure::config("no stages requested"));
    }
    Ok(STAGES.iter().copied().filter(|s| requested.contains(s)).collect())
}

struct Layout {
    patterns: PathBuf,
    board: PathBuf,
    capture_board: PathBuf,
    capture_scene: PathBuf,
    calibration: PathBuf,
    reconstruction: PathBuf,
    validation: PathBuf,
    twin: PathBuf,
}

impl Layout {
    fn new(root: &Path) -> Self {
        Layout {
            patterns: root.join("patterns"),
            board: root.join("board"),
            capture_board: root.join("capture_board"),
            capture_scene: root.join("capture_scene"),
            calibration: root.join("calibration"),
            reconstruction: root.join("reconstruction"),
            validation: root.join("validation"),
            twin: root.join("twin"),
        }
    }
}

/// Checks that every requested stage has its inputs, either from an earlier
/// requested stage or already on disk, before anything is written.
fn preflight(cfg: &PipelineConfig, stages: &[&str], l: &Layout) -> CliResult<()> {
    let runs = |s: &str| stages.contains(&s);
    let need = |stage: &str, producer: &str, path: PathBuf| -> CliResult<()> {
        if runs(producer) || path.is_file() {
            Ok(())
        } else {
            Err(Failure::config(format!("stage '{stage}' needs {} (run '{producer}' first)", path.display())))
        }
    };
    if runs("patterns") || runs("capture") {
        cfg.patterns.build().config_err("invalid pattern spec")?;
    }
    if runs("board") || runs("capture") {
        cfg.board.metrics(cfg.board_scaling).config_err("invalid board spec")?;
    }
    if runs("capture") {
        cfg.protocol().validate().config_err("invalid pose protocol")?;
        if let Some(scene) = &cfg.measurement_scene {
            stages::load_scene(scene)?;
        }
    }
    if runs("calibrate") {
        need("calibrate", "capture", l.capture_board.join("capture.json"))?;
    }
    if runs("reconstruct") {
        need("reconstruct", "capture", l.capture_scene.join("capture.json"))?;
        need("reconstruct", "calibrate", l.calibration.join("calibration.json"))?;
    }
    if runs("validate") {
        need("validate", "reconstruct", l.reconstruction.join("cloud.ply"))?;
    }
    if runs("twin") {
        match &cfg.twin.calibration {
            Some(p) => stages::require_file(p, "twin calibration")?,
            None => need("twin", "calibrate", l.calibration.join("calibration.json"))?,
        }
    }
    Ok(())
}

pub fn run(cfg: &PipelineConfig, stages_to_run: &[&str], root: &Path) -> CliResult<()> {
    let l = Layout::new(root);
    preflight(cfg, stages_to_run, &l)?;
    for &stage in stages_to_run {
        log::info!("stage {stage}");
        match stage {
            "patterns" => stages::gen_patterns(&cfg.patterns, &l.patterns)?,
            "board" => stages::gen_board(&cfg.board, cfg.board_scaling, &l.board)?,
            "capture" => {
                let board = BoardObject::new(&cfg.board, cfg.board_scaling).config_err("invalid board")?;
                let scene = board_scene(cfg.camera_width, &board);
                let placement = BoardPlacement { spec: cfg.board.clone(), scaling: cfg.board_scaling, object_index: 0 };
                stages::capture(&scene, &cfg.patterns, Some((placement, board.base_pose())), &cfg.protocol(), &l.capture_board, None)?;
                let (scene, file) = match &cfg.measurement_scene {
                    Some(p) => (stages::load_scene(p)?.1, Some(p.as_path())),
                    None => (sphere_scene(cfg.camera_width, Material::baseline(), LightingTier::Baseline), None),
                };
                stages::capture(&scene, &cfg.patterns, None, &cfg.protocol(), &l.capture_scene, file)?;
            }
            "calibrate" => stages::calibrate(&l.capture_board, &cfg.calibration, &l.calibration)?,
            "reconstruct" => stages::reconstruct(
                &l.capture_scene,
                0,
                &l.calibration.join("calibration.json"),
                cfg.reconstruction.scale,
                cfg.calibration.modulation_threshold,
                PlyFormat::BinaryLittleEndian,
                &l.reconstruction,
            )?,
            "validate" => {
                let v = &cfg.validation;
                let msac = MsacConfig { inlier_threshold: v.inlier_threshold_mm, max_trials: v.max_trials, seed: cfg.seed, ..MsacConfig::default() };
                stages::fit_sphere(&l.reconstruction.join("cloud.ply"), &msac, Some(v.sphere_radius_mm), Some(v.max_radial_error_mm), &l.validation)?
            }
            "twin" => {
                let calib = cfg.twin.calibration.clone().unwrap_or_else(|| l.calibration.join("calibration.json"));
                stages::twin_extent(&calib, &cfg.twin.z_mm, None, None, &l.twin)?
            }
            _ => unreachable!("stage names are validated"),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_are_put_in_canonical_order() {
        assert_eq!(parse_stages("twin,patterns").unwrap(), vec!["patterns", "twin"]);
        assert_eq!(parse_stages("all").unwrap().len(), 7);
        assert_eq!(parse_stages("bogus").unwrap_err().code, crate::failure::EXIT_CONFIG);
    }

    #[test]
    fn empty_config_uses_defaults() {
        let cfg: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.camera_width, 480);
        assert_eq!(cfg.protocol.count, 18);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"camera_widht": 3}"#).is_err());
    }
}
