//! Capture sessions: every pattern rendered at every board pose, with a
//! JSON-lines manifest describing the written frames.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenes::BoardObject;
use super::{prepare_view, Geometry, RenderError, Scene};
use crate::geometry::{ProjectionMatrix, RigidPose};
use crate::image::GrayImage16;
use crate::patterns::NamedPattern;

/// Randomised board poses around a base pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseProtocol {
    pub count: usize,
    /// Lateral (x) and vertical (y) offsets are drawn from `±translation_mm`.
    pub translation_mm: f64,
    pub tilt_min_deg: f64,
    pub tilt_max_deg: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PoseProtocol {
    fn default() -> Self {
        PoseProtocol { count: 18, translation_mm: 15.0, tilt_min_deg: 5.0, tilt_max_deg: 15.0, seed: 0 }
    }
}

impl PoseProtocol {
    pub fn validate(&self) -> Result<(), RenderError> {
        let ok = self.count > 0
            && self.translation_mm >= 0.0
            && self.tilt_min_deg >= 0.0
            && self.tilt_max_deg >= self.tilt_min_deg
            && self.tilt_max_deg < 80.0;
        if ok {
            Ok(())
        } else {
            Err(RenderError::InvalidScene(format!("invalid pose protocol: {self:?}")))
        }
    }

    /// Board-to-world poses. Each pose tilts the board about its own centre
    /// around the camera x and y axes by a signed angle whose magnitude lies
    /// in `[tilt_min, tilt_max]`, then shifts it laterally and vertically.
    pub fn generate(&self, base: &RigidPose, board_center: &Vector3<f64>) -> Result<Vec<RigidPose>, RenderError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let center_world = base.transform_point(board_center);
        let mut poses = Vec::with_capacity(self.count);
        for _ in 0..self.count {
            let mut tilt = || {
                let mag = if self.tilt_max_deg > self.tilt_min_deg {
                    rng.random_range(self.tilt_min_deg..=self.tilt_max_deg)
                } else {
                    self.tilt_min_deg
                };
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (sign * mag).to_radians()
            };
            let (ax, ay) = (tilt(), tilt());
            let mut shift = || if self.translation_mm > 0.0 { rng.random_range(-self.translation_mm..=self.translation_mm) } else { 0.0 };
            let (dx, dy) = (shift(), shift());
            let r = Rotation3::from_axis_angle(&Vector3::x_axis(), ax) * Rotation3::from_axis_angle(&Vector3::y_axis(), ay);
            let rot = r.matrix() * base.rotation();
            let t = center_world + Vector3::new(dx, dy, 0.0) - rot * board_center;
            poses.push(RigidPose::new(rot, t).expect("product of rotations"));
        }
        Ok(poses)
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub pose_index: usize,
    pub pattern_id: String,
    pub path: String,
    pub in_view: bool,
}

/// Replaces the placement of plane object `index` with `board_to_world`.
pub fn place_plane(scene: &mut Scene, index: usize, board_to_world: RigidPose) -> Result<(), RenderError> {
    match scene.objects.get_mut(index).map(|o| &mut o.geometry) {
        Some(Geometry::Plane(p)) => {
            p.to_world = board_to_world;
            Ok(())
        }
        _ => Err(RenderError::InvalidScene(format!("object {index} is not a plane"))),
    }
}

/// True when all plane corners project inside the camera image.
pub fn board_in_view(scene: &Scene, board: &BoardObject, pose: &RigidPose) -> bool {
    let k = &scene.camera.intrinsics;
    let m = ProjectionMatrix::camera(k, &scene.camera.pose);
    board.corners().iter().all(|c| {
        let x = pose.transform_point(c);
        matches!(m.project(&x), Ok(uv) if scene.camera.pose.transform_point(&x).z > 0.0
            && uv.x >= -0.5 && uv.y >= -0.5 && uv.x <= k.width as f64 - 0.5 && uv.y <= k.height as f64 - 0.5)
    })
}

/// Renders every pattern at every pose without touching the disk.
/// `poses` reposition the board plane at object index `board_index`.
pub fn capture_in_memory(
    scene: &Scene,
    patterns: &[NamedPattern],
    poses: Option<(&[RigidPose], usize)>,
) -> Result<Vec<Vec<GrayImage16>>, RenderError> {
    if patterns.is_empty() {
        return Err(RenderError::InvalidScene("no patterns to capture".into()));
    }
    let placements: Vec<Option<RigidPose>> = match poses {
        Some((p, _)) => p.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    let mut out = Vec::with_capacity(placements.len());
    for placement in placements {
        let mut s = scene.clone();
        if let (Some(pose), Some((_, idx))) = (placement, poses) {
            place_plane(&mut s, idx, pose)?;
        }
        let view = prepare_view(&s)?;
        out.push(patterns.iter().map(|p| view.render(Some(&p.image))).collect::<Result<Vec<_>, _>>()?);
    }
    Ok(out)
}

/// Renders and writes `pose_XX/<pattern id>.png` for every pose and pattern
/// and a `manifest.jsonl` in `out_dir`. Poses run sequentially, so the
/// manifest order is fixed.
pub fn run_capture_session(
    scene: &Scene,
    patterns: &[NamedPattern],
    poses: Option<(&[RigidPose], &BoardObject, usize)>,
    out_dir: &Path,
) -> Result<Vec<CaptureRecord>, RenderError> {
    if patterns.is_empty() {
        return Err(RenderError::InvalidScene("no patterns to capture".into()));
    }
    scene.validate()?;
    for p in patterns {
        scene.check_pattern(&p.image)?;
    }
    let placements: Vec<Option<RigidPose>> = match poses {
        Some((p, _, _)) => p.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    fs::create_dir_all(out_dir)?;
    let mut records = Vec::new();
    for (pi, placement) in placements.iter().enumerate() {
        let mut s = scene.clone();
        let mut in_view = true;
        if let (Some(pose), Some((_, board, idx))) = (placement, poses) {
            place_plane(&mut s, idx, *pose)?;
            in_view = board_in_view(&s, board, pose);
            if !in_view {
                log::warn!("pose {pi}: board leaves the camera frustum");
            }
        }
        let dir_name = format!("pose_{pi:02}");
        fs::create_dir_all(out_dir.join(&dir_name))?;
        let view = prepare_view(&s)?;
        for p in patterns {
            let rel: PathBuf = [dir_name.as_str(), &format!("{}.png", p.id)].iter().collect();
            view.render(Some(&p.image))?.write(out_dir.join(&rel))?;
            records.push(CaptureRecord {
                pose_index: pi,
                pattern_id: p.id.clone(),
                path: rel.to_string_lossy().replace('\\', "/"),
                in_view,
            });
        }
    }
    let mut manifest = fs::File::create(out_dir.join("manifest.jsonl"))?;
    for r in &records {
        writeln!(manifest, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    Ok(records)
}

/// Reads a manifest written by [`run_capture_session`].
pub fn read_manifest(path: &Path) -> Result<Vec<CaptureRecord>, RenderError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| RenderError::InvalidScene(format!("manifest line: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{BoardScaling, CalibBoardSpec};
    use crate::render::scenes::{board_scene, BoardObject};

    #[test]
    fn protocol_respects_bounds() {
        let board = BoardObject::new(&CalibBoardSpec::default(), BoardScaling::FitToPlane).unwrap();
        let base = board.base_pose();
        let c = board.plane_center();
        let poses = PoseProtocol::default().generate(&base, &c).unwrap();
        assert_eq!(poses.len(), 18);
        for p in &poses {
            let angle = p.rotation_angle_to(&base).to_degrees();
            assert!((5.0..=15.0 * 2f64.sqrt() + 1e-9).contains(&angle), "tilt {angle}");
            let shift = p.transform_point(&c) - base.transform_point(&c);
            assert!(shift.x.abs() <= 15.0 && shift.y.abs() <= 15.0 && shift.z.abs() < 1e-9);
        }
        assert_eq!(poses, PoseProtocol::default().generate(&base, &c).unwrap());
    }

    #[test]
    fn single_capture_writes_one_file() {
        let board = BoardObject::new(&CalibBoardSpec::default(), BoardScaling::FitToPlane).unwrap();
        let scene = board_scene(48, &board);
        let pattern = NamedPattern { id: "white".into(), image: GrayImage16::filled(912, 1140, 65535) };
        let dir = tempfile::tempdir().unwrap();
        let poses = [board.base_pose()];
        let recs = run_capture_session(&scene, std::slice::from_ref(&pattern), Some((&poses, &board, 0)), dir.path()).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(dir.path().join(&recs[0].path).exists());
        assert_eq!(read_manifest(&dir.path().join("manifest.jsonl")).unwrap(), recs);
    }
}
