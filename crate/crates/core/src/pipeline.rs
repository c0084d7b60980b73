//! Stage glue shared by the command-line tool and the end-to-end tests:
//! phase analysis of captured pattern stacks and calibration from a set of
//! board captures.

use std::collections::HashMap;

use nalgebra::Vector2;
use rayon::prelude::*;
use thiserror::Error;

use crate::calib::lm::LmConfig;
use crate::calib::{detect_circle_grid, map_centers_to_projector, stereo_calibrate, CalibError, CalibrationResult, GridDetection, StereoConfig};
use crate::image::GrayImage16;
use crate::patterns::{board_object_points, BoardScaling, CalibBoardSpec, FringeDirection, PatternError, PatternSetSpec};
use crate::phase::{analyze, compute_wrapped_phase, PhaseError, PhaseMaps};
use crate::render::{prepare_view, render_object_ids, RenderError, Scene};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("capture is missing frame '{0}'")]
    MissingFrame(String),
    #[error("pattern set has no {0} fringes")]
    MissingDirection(&'static str),
    #[error("only {usable} usable calibration poses, need at least 3")]
    TooFewPoses { usable: usize },
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// One pose worth of captured frames keyed by pattern id.
pub type Capture = HashMap<String, GrayImage16>;

/// Pairs frames rendered in [`PatternSetSpec::build`] order with their ids.
pub fn capture_from_frames(spec: &PatternSetSpec, frames: Vec<GrayImage16>) -> Capture {
    spec.ids().into_iter().zip(frames).collect()
}

fn frame<'a>(capture: &'a Capture, id: &str) -> Result<&'a GrayImage16, PipelineError> {
    capture.get(id).ok_or_else(|| PipelineError::MissingFrame(id.to_string()))
}

/// Phase maps for one fringe direction of a capture.
pub fn analyze_direction(
    spec: &PatternSetSpec,
    capture: &Capture,
    direction: FringeDirection,
    modulation_threshold: f64,
) -> Result<PhaseMaps, PipelineError> {
    if !spec.directions.contains(&direction) {
        return Err(PipelineError::MissingDirection(direction.name()));
    }
    let fringes = spec.fringe_ids(direction).iter().map(|id| frame(capture, id).cloned()).collect::<Result<Vec<_>, _>>()?;
    let mut gray = spec.gray_ids(direction).iter().map(|id| frame(capture, id).cloned()).collect::<Result<Vec<_>, _>>()?;
    let complement = if spec.complementary { gray.pop() } else { None };
    Ok(analyze(&fringes, &gray, complement.as_ref(), frame(capture, "white")?, frame(capture, "black")?, modulation_threshold)?)
}

/// Camera and projector observations of one accepted pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseObservation {
    pub detection: GridDetection,
    pub projector_points: Vec<Vector2<f64>>,
}

/// Detects the board and maps its centres into the projector for one pose.
pub fn observe_pose(
    spec: &PatternSetSpec,
    board: &CalibBoardSpec,
    capture: &Capture,
    pose_index: usize,
    modulation_threshold: f64,
) -> Result<PoseObservation, PipelineError> {
    let detection = detect_circle_grid(frame(capture, "white")?, board, pose_index)?;
    let v = analyze_direction(spec, capture, FringeDirection::Vertical, modulation_threshold)?;
    let h = analyze_direction(spec, capture, FringeDirection::Horizontal, modulation_threshold)?;
    let projector_points = map_centers_to_projector(&detection, &v, &h, spec.period_px as f64)?;
    Ok(PoseObservation { detection, projector_points })
}

#[derive(Debug, Clone)]
pub struct CalibrationRun {
    pub result: CalibrationResult,
    pub observations: Vec<PoseObservation>,
    /// Poses whose detection or phase mapping failed, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Full calibration from board captures. Poses that cannot be observed are
/// skipped with a warning; at least three must remain.
pub fn calibrate_captures(
    spec: &PatternSetSpec,
    board: &CalibBoardSpec,
    scaling: BoardScaling,
    captures: &[Capture],
    modulation_threshold: f64,
    stereo: &StereoConfig,
    lm: &LmConfig,
) -> Result<CalibrationRun, PipelineError> {
    let object_points = board_object_points(board, scaling)?;
    let observed: Vec<Result<PoseObservation, PipelineError>> =
        captures.par_iter().enumerate().map(|(i, c)| observe_pose(spec, board, c, i, modulation_threshold)).collect();
    let mut observations = Vec::new();
    let mut skipped = Vec::new();
    for (i, o) in observed.into_iter().enumerate() {
        match o {
            Ok(o) => observations.push(o),
            Err(e) => {
                log::warn!("pose {i} skipped: {e}");
                skipped.push((i, e.to_string()));
            }
        }
    }
    if observations.len() < 3 {
        return Err(PipelineError::TooFewPoses { usable: observations.len() });
    }
    let cam: Vec<&[Vector2<f64>]> = observations.iter().map(|o| o.detection.centers.as_slice()).collect();
    let proj: Vec<&[Vector2<f64>]> = observations.iter().map(|o| o.projector_points.as_slice()).collect();
    let ids: Vec<usize> = observations.iter().map(|o| o.detection.pose_index).collect();
    let d = &observations[0].detection;
    let result = stereo_calibrate(
        &cam,
        &proj,
        &ids,
        &object_points,
        (d.image_width, d.image_height),
        (spec.proj_width, spec.proj_height),
        stereo,
        lm,
    )?;
    Ok(CalibrationRun { result, observations, skipped })
}

/// Fringe quality of one object under a given material and lighting.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FringeQuality {
    /// Mean of modulation over average intensity across the object's pixels.
    pub mean_modulation_ratio: f64,
    /// Object pixels clamped to full scale in at least one fringe frame.
    pub saturated_pixels: usize,
    pub object_pixels: usize,
}

/// Renders the vertical fringe stack of `spec` and scores the pixels that
/// see object `object`.
pub fn fringe_quality(scene: &Scene, spec: &PatternSetSpec, object: usize) -> Result<FringeQuality, PipelineError> {
    let ids = render_object_ids(scene);
    let view = prepare_view(scene)?;
    let fringes = crate::patterns::gen_fringe_patterns(&spec.fringe_spec(FringeDirection::Vertical))?
        .iter()
        .map(|p| view.render(Some(p)))
        .collect::<Result<Vec<_>, _>>()?;
    let w = compute_wrapped_phase(&fringes, fringes.len())?;
    let mut ratio_sum = 0.0;
    let mut saturated = 0;
    let mut count = 0;
    for (i, id) in ids.iter().enumerate() {
        if *id != Some(object) {
            continue;
        }
        count += 1;
        if w.avg[i] > 0.0 {
            ratio_sum += w.modulation[i] / w.avg[i];
        }
        if fringes.iter().any(|f| f.data()[i] == u16::MAX) {
            saturated += 1;
        }
    }
    Ok(FringeQuality { mean_modulation_ratio: ratio_sum / count.max(1) as f64, saturated_pixels: saturated, object_pixels: count })
}
