//! `fpp`: command-line driver for the virtual fringe projection workbench.
//!
//! Every stage is a subcommand reading and writing plain files, and
//! `pipeline` chains them over one output directory.

mod failure;
mod manifest;
mod pipeline;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fpp_core::io::PlyFormat;
use fpp_core::metrology::{IcpConfig, MsacConfig};
use fpp_core::patterns::{BoardScaling, CalibBoardSpec, PatternSetSpec};
use fpp_core::render::capture::PoseProtocol;

use failure::{CliResult, Classify, Failure};
use pipeline::PipelineConfig;
use stages::CalibrationThresholds;

#[derive(Parser)]
#[command(name = "fpp", version, about = "Virtual fringe projection profilometry workbench")]
struct Cli {
    /// Root under which stages write when `--out` is not given.
    #[arg(long, env = "FPP_OUTPUT_ROOT", default_value = "fpp-out", global = true)]
    output_root: PathBuf,
    /// Worker thread cap for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More logging (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phase-shift and Gray-code pattern set.
    GenPatterns(GenPatternsArgs),
    /// Generate the asymmetric circle-grid board texture.
    GenBoard(GenBoardArgs),
    /// Render one frame of a scene, optionally with a projected pattern.
    Render(RenderArgs),
    /// Render every pattern at every board pose of a scene.
    Capture(CaptureArgs),
    /// Calibrate camera and projector from a board capture.
    Calibrate(CalibrateArgs),
    /// Triangulate a point cloud from a capture and a calibration.
    Reconstruct(ReconstructArgs),
    /// Robust sphere fit of a point cloud.
    FitSphere(FitSphereArgs),
    /// Cloud-to-mesh distances.
    C2m(C2mArgs),
    /// Rigid registration of a cloud onto a cloud or mesh.
    Icp(IcpArgs),
    /// Projected image extent of a calibrated projector at given distances.
    TwinExtent(TwinExtentArgs),
    /// Run several stages in order from one configuration.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct PatternFlags {
    /// Pattern set specification (JSON); flags below override its fields.
    #[arg(long = "patterns")]
    spec: Option<PathBuf>,
    #[arg(long)]
    proj_width: Option<u32>,
    #[arg(long)]
    proj_height: Option<u32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    period: Option<u32>,
}

impl PatternFlags {
    fn resolve(&self) -> CliResult<PatternSetSpec> {
        let mut spec = match &self.spec {
            Some(p) => stages::read_json(p, "pattern spec")?,
            None => PatternSetSpec::default(),
        };
        override_with(&mut spec.proj_width, self.proj_width);
        override_with(&mut spec.proj_height, self.proj_height);
        override_with(&mut spec.n_steps, self.steps);
        override_with(&mut spec.period_px, self.period);
        Ok(spec)
    }
}

#[derive(Args)]
struct GenPatternsArgs {
    #[command(flatten)]
    patterns: PatternFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalingArg {
    Fit,
    Unscaled,
}

impl From<ScalingArg> for BoardScaling {
    fn from(s: ScalingArg) -> Self {
        match s {
            ScalingArg::Fit => BoardScaling::FitToPlane,
            ScalingArg::Unscaled => BoardScaling::Unscaled,
        }
    }
}

#[derive(Args)]
struct GenBoardArgs {
    /// Board specification (JSON); the stock 5x11 board when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "fit")]
    scaling: ScalingArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Pattern image (16-bit PNG) to project; ambient light only when absent.
    #[arg(long)]
    pattern: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProtocolFlags {
    #[arg(long)]
    pose_count: Option<usize>,
    #[arg(long)]
    translation_mm: Option<f64>,
    #[arg(long)]
    tilt_min_deg: Option<f64>,
    #[arg(long)]
    tilt_max_deg: Option<f64>,
}

#[derive(Args)]
struct CaptureArgs {
    #[arg(long)]
    scene: PathBuf,
    #[command(flatten)]
    patterns: PatternFlags,
    #[command(flatten)]
    protocol: ProtocolFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Capture directory of a board scene.
    #[arg(long)]
    capture: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    rms_threshold: f64,
    #[arg(long, default_value_t = 3.0)]
    outlier_factor: f64,
    /// Minimum fringe modulation as a fraction of full scale.
    #[arg(long, default_value_t = 0.02)]
    modulation_threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    capture: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Pose index within the capture.
    #[arg(long, default_value_t = 0)]
    pose: usize,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 0.02)]
    modulation_threshold: f64,
    /// Write ASCII instead of binary PLY.
    #[arg(long)]
    ascii: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitSphereArgs {
    #[arg(long)]
    cloud: PathBuf,
    /// Inlier band half-width in mm.
    #[arg(long, default_value_t = 1.0)]
    threshold: f64,
    #[arg(long, default_value_t = 2000)]
    max_trials: usize,
    #[arg(long, default_value_t = 0.99)]
    confidence: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Known radius in mm, for the radial error report.
    #[arg(long)]
    radius: Option<f64>,
    /// Fail with exit code 4 when the radial error exceeds this (mm).
    #[arg(long, requires = "radius")]
    max_radial_error: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct C2mArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IcpArgs {
    #[arg(long)]
    source: PathBuf,
    /// Target cloud, or mesh when the PLY has faces.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 100)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TwinExtentArgs {
    /// Calibration document or bare projector calibration (JSON).
    #[arg(long)]
    calib: PathBuf,
    /// Distances in mm, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    z: Vec<f64>,
    /// Projector resolution as WIDTHxHEIGHT; the calibrated size when absent.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<(u32, u32)>,
    /// Also convert the camera intrinsics to simulator parameters.
    #[arg(long)]
    pixel_size_mm: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline configuration (JSON); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `all` or a comma-separated subset of patterns, board, capture,
    /// calibrate, reconstruct, validate, twin.
    #[arg(long, default_value = "all")]
    stages: String,
    /// Measurement scene file.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Calibration used by the twin stage.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Twin distances in mm, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    z: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    camera_width: Option<u32>,
    #[command(flatten)]
    protocol: ProtocolFlags,
    #[arg(long)]
    rms_threshold: Option<f64>,
    #[arg(long)]
    modulation_threshold: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_resolution(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got '{s}'"))?;
    let w = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    Ok((w, h))
}

fn override_with<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn out_dir(out: &Option<PathBuf>, root: &Path, name: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| root.join(name))
}

fn protocol_from(flags: &ProtocolFlags, seed: u64) -> PoseProtocol {
    let mut p = PoseProtocol { seed, ..PoseProtocol::default() };
    override_with(&mut p.count, flags.pose_count);
    override_with(&mut p.translation_mm, flags.translation_mm);
    override_with(&mut p.tilt_min_deg, flags.tilt_min_deg);
    override_with(&mut p.tilt_max_deg, flags.tilt_max_deg);
    p
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().config_err("configuring thread pool")?;
    }
    let root = &cli.output_root;
    match &cli.command {
        Command::GenPatterns(a) => stages::gen_patterns(&a.patterns.resolve()?, &out_dir(&a.out, root, "patterns")),
        Command::GenBoard(a) => {
            let spec = match &a.spec {
                Some(p) => stages::read_json(p, "board spec")?,
                None => CalibBoardSpec::default(),
            };
            stages::gen_board(&spec, a.scaling.into(), &out_dir(&a.out, root, "board"))
        }
        Command::Render(a) => stages::render_one(&a.scene, a.pattern.as_deref(), &out_dir(&a.out, root, "render")),
        Command::Capture(a) => {
            let spec = a.patterns.resolve()?;
            let protocol = protocol_from(&a.protocol, a.seed);
            protocol.validate().config_err("invalid pose protocol")?;
            let (cfg, scene) = stages::load_scene(&a.scene)?;
            let board = stages::find_board(&cfg)?;
            stages::capture(&scene, &spec, board, &protocol, &out_dir(&a.out, root, "capture"), Some(&a.scene))
        }
        Command::Calibrate(a) => {
            let t = CalibrationThresholds {
                rms_threshold: a.rms_threshold,
                outlier_factor: a.outlier_factor,
                modulation_threshold: a.modulation_threshold,
            };
            stages::calibrate(&a.capture, &t, &out_dir(&a.out, root, "calibration"))
        }
        Command::Reconstruct(a) => {
            let format = if a.ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
            stages::reconstruct(
                &a.capture,
                a.pose,
                &a.calib,
                a.scale,
                a.modulation_threshold,
                format,
                &out_dir(&a.out, root, "reconstruction"),
            )
        }
        Command::FitSphere(a) => {
            let cfg = MsacConfig { inlier_threshold: a.threshold, max_trials: a.max_trials, confidence: a.confidence, seed: a.seed };
            stages::fit_sphere(&a.cloud, &cfg, a.radius, a.max_radial_error, &out_dir(&a.out, root, "sphere"))
        }
        Command::C2m(a) => stages::c2m(&a.cloud, &a.mesh, a.bins, &out_dir(&a.out, root, "c2m")),
        Command::Icp(a) => {
            let cfg = IcpConfig { max_iterations: a.max_iterations, tolerance: a.tolerance };
            stages::icp(&a.source, &a.target, &cfg, &out_dir(&a.out, root, "icp"))
        }
        Command::TwinExtent(a) => stages::twin_extent(&a.calib, &a.z, a.resolution, a.pixel_size_mm, &out_dir(&a.out, root, "twin")),
        Command::Pipeline(a) => {
            let mut cfg = match &a.config {
                Some(p) => PipelineConfig::load(p)?,
                None => PipelineConfig::default(),
            };
            if a.scene.is_some() {
                cfg.measurement_scene = a.scene.clone();
            }
            if a.calib.is_some() {
                cfg.twin.calibration = a.calib.clone();
            }
            override_with(&mut cfg.twin.z_mm, a.z.clone());
            override_with(&mut cfg.seed, a.seed);
            override_with(&mut cfg.camera_width, a.camera_width);
            override_with(&mut cfg.protocol.count, a.protocol.pose_count);
            override_with(&mut cfg.protocol.translation_mm, a.protocol.translation_mm);
            override_with(&mut cfg.protocol.tilt_min_deg, a.protocol.tilt_min_deg);
            override_with(&mut cfg.protocol.tilt_max_deg, a.protocol.tilt_max_deg);
            override_with(&mut cfg.calibration.rms_threshold, a.rms_threshold);
            override_with(&mut cfg.calibration.modulation_threshold, a.modulation_threshold);
            override_with(&mut cfg.reconstruction.scale, a.scale);
            let stage_list = pipeline::parse_stages(&a.stages)?;
            let out = a.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| root.join("pipeline"));
            pipeline::run(&cfg, &stage_list, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
