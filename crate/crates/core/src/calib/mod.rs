//! Camera/projector calibration from virtual captures.
//!
//! Circle centres are detected in the camera image and mapped into the
//! projector image through the unwrapped phase, which turns the projector
//! into a second camera observing the same board. Each device is
//! initialised in closed form and the pair is then refined jointly, with
//! the camera frame as the world frame.

pub mod detect;
pub mod lm;
pub mod zhang;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use detect::{detect_circle_grid, find_blobs, GridDetection};
use lm::{levenberg_marquardt, LmConfig, LmReport, Problem};
use zhang::{homography_dlt, intrinsics_from_homographies, pose_from_homography};

use crate::geometry::{exp_so3, log_so3, nearest_rotation, skew, Intrinsics, RigidPose};
use crate::io::{CalibrationFile, DeviceCalibration, CALIBRATION_VERSION};
use crate::phase::PhaseMaps;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("circle grid not found: {found} blobs, expected {expected}")]
    GridNotFound { found: usize, expected: usize },
    #[error("circle grid orientation is ambiguous")]
    AmbiguousOrientation,
    #[error("circle centre {index} falls on masked phase")]
    CenterMasked { index: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("refinement did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("camera has {camera} poses but projector has {projector}")]
    InconsistentPoseCount { camera: usize, projector: usize },
    #[error("observation count mismatch: {0}")]
    ObservationMismatch(String),
}

/// Projector pixel coordinates of each detected centre, from the
/// vertical-fringe (column) and horizontal-fringe (row) phase maps.
pub fn map_centers_to_projector(
    det: &GridDetection,
    phi_v: &PhaseMaps,
    phi_h: &PhaseMaps,
    period_px: f64,
) -> Result<Vec<Vector2<f64>>, CalibError> {
    let k = period_px / (2.0 * std::f64::consts::PI);
    det.centers
        .iter()
        .enumerate()
        .map(|(index, c)| {
            let u = phi_v.sample_unwrapped(c.x, c.y).ok_or(CalibError::CenterMasked { index })?;
            let v = phi_h.sample_unwrapped(c.x, c.y).ok_or(CalibError::CenterMasked { index })?;
            Ok(Vector2::new(u * k, v * k))
        })
        .collect()
}

/// Pinhole projection of a device-frame point with its Jacobians with
/// respect to the point and to `(fx, fy, ox, oy)`.
fn project_with_jacobian(k: &[f64; 4], x: &Vector3<f64>) -> (Vector2<f64>, Matrix2x3<f64>, [[f64; 4]; 2]) {
    let iz = 1.0 / x.z;
    let (a, b) = (x.x * iz, x.y * iz);
    let pix = Vector2::new(k[0] * a + k[2], k[1] * b + k[3]);
    let d_x = Matrix2x3::new(k[0] * iz, 0.0, -k[0] * a * iz, 0.0, k[1] * iz, -k[1] * b * iz);
    (pix, d_x, [[a, 0.0, 1.0, 0.0], [0.0, b, 0.0, 1.0]])
}

fn project(k: &[f64; 4], x: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(k[0] * x.x / x.z + k[2], k[1] * x.y / x.z + k[3])
}

/// Parameters of the reprojection problem. With `kp = None` only the
/// camera (or a single device) is refined.
#[derive(Debug, Clone, PartialEq)]
pub struct RigState {
    pub kc: [f64; 4],
    pub kp: Option<[f64; 4]>,
    pub cam_to_proj: RigidPose,
    /// Board-to-camera poses.
    pub poses: Vec<RigidPose>,
}

/// Squared reprojection over one or two devices observing a planar board.
/// Residuals are ordered as all camera residuals (pose-major, point-major,
/// u then v), followed by all projector residuals in the same order.
pub struct ReprojectionProblem<'a> {
    pub object_points: &'a [Vector3<f64>],
    pub camera: Vec<&'a [Vector2<f64>]>,
    pub projector: Option<Vec<&'a [Vector2<f64>]>>,
}

impl ReprojectionProblem<'_> {
    fn n_points(&self) -> usize {
        self.object_points.len()
    }

    fn pose_offset(&self) -> usize {
        if self.projector.is_some() {
            14
        } else {
            4
        }
    }

    pub fn n_params(&self) -> usize {
        self.pose_offset() + 6 * self.camera.len()
    }

    /// Camera and projector residuals as separate vectors.
    pub fn split_residuals(&self, s: &RigState) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>) {
        let mut cam = Vec::with_capacity(self.camera.len() * self.n_points());
        let mut proj = Vec::new();
        for (i, pose) in s.poses.iter().enumerate() {
            for (j, x) in self.object_points.iter().enumerate() {
                let xc = pose.transform_point(x);
                cam.push(project(&s.kc, &xc) - self.camera[i][j]);
                if let (Some(obs), Some(kp)) = (&self.projector, &s.kp) {
                    proj.push(project(kp, &s.cam_to_proj.transform_point(&xc)) - obs[i][j]);
                }
            }
        }
        (cam, proj)
    }
}

impl Problem for ReprojectionProblem<'_> {
    type State = RigState;

    fn residuals(&self, s: &RigState) -> DVector<f64> {
        let (cam, proj) = self.split_residuals(s);
        DVector::from_iterator(2 * (cam.len() + proj.len()), cam.iter().chain(&proj).flat_map(|r| [r.x, r.y]))
    }

    fn jacobian(&self, s: &RigState) -> DMatrix<f64> {
        let np = self.n_points();
        let n_cam_rows = 2 * np * self.camera.len();
        let rows = if self.projector.is_some() { 2 * n_cam_rows } else { n_cam_rows };
        let mut j = DMatrix::zeros(rows, self.n_params());
        let po = self.pose_offset();
        let rcp = *s.cam_to_proj.rotation();
        for (i, pose) in s.poses.iter().enumerate() {
            let col = po + 6 * i;
            for (k, x) in self.object_points.iter().enumerate() {
                let rx = pose.rotation() * x;
                let xc = rx + pose.translation();
                let d_rot = -skew(&rx);
                let row = 2 * (i * np + k);
                let (_, dpx, dk) = project_with_jacobian(&s.kc, &xc);
                for a in 0..2 {
                    for b in 0..4 {
                        j[(row + a, b)] = dk[a][b];
                    }
                }
                j.view_mut((row, col), (2, 3)).copy_from(&(dpx * d_rot));
                j.view_mut((row, col + 3), (2, 3)).copy_from(&dpx);

                if let Some(kp) = &s.kp {
                    let xp = s.cam_to_proj.transform_point(&xc);
                    let (_, dpp, dkp) = project_with_jacobian(kp, &xp);
                    let prow = n_cam_rows + row;
                    for a in 0..2 {
                        for b in 0..4 {
                            j[(prow + a, 4 + b)] = dkp[a][b];
                        }
                    }
                    j.view_mut((prow, 8), (2, 3)).copy_from(&(dpp * -skew(&(rcp * xc))));
                    j.view_mut((prow, 11), (2, 3)).copy_from(&dpp);
                    j.view_mut((prow, col), (2, 3)).copy_from(&(dpp * rcp * d_rot));
                    j.view_mut((prow, col + 3), (2, 3)).copy_from(&(dpp * rcp));
                }
            }
        }
        j
    }

    fn retract(&self, s: &RigState, d: &DVector<f64>) -> RigState {
        let add4 = |k: &[f64; 4], o: usize| [k[0] + d[o], k[1] + d[o + 1], k[2] + d[o + 2], k[3] + d[o + 3]];
        let v3 = |o: usize| Vector3::new(d[o], d[o + 1], d[o + 2]);
        let po = self.pose_offset();
        RigState {
            kc: add4(&s.kc, 0),
            kp: s.kp.as_ref().map(|k| add4(k, 4)),
            cam_to_proj: if s.kp.is_some() { s.cam_to_proj.perturbed(&v3(8), &v3(11)) } else { s.cam_to_proj },
            poses: s.poses.iter().enumerate().map(|(i, p)| p.perturbed(&v3(po + 6 * i), &v3(po + 6 * i + 3))).collect(),
        }
    }
}

/// Root mean square of the point residual lengths.
pub fn rms(residuals: &[Vector2<f64>]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    (residuals.iter().map(|r| r.norm_squared()).sum::<f64>() / residuals.len() as f64).sqrt()
}

/// Single-device calibration result.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicCalibration {
    pub intrinsics: Intrinsics,
    /// Board-to-device poses.
    pub poses: Vec<RigidPose>,
    pub rms: f64,
    pub report: LmReport,
}

fn check_views(views: &[&[Vector2<f64>]], object_points: &[Vector3<f64>]) -> Result<(), CalibError> {
    if object_points.iter().any(|p| p.z != 0.0) {
        return Err(CalibError::ObservationMismatch("board object points must lie in z = 0".into()));
    }
    for (i, v) in views.iter().enumerate() {
        if v.len() != object_points.len() {
            return Err(CalibError::ObservationMismatch(format!(
                "view {i} has {} points, board has {}",
                v.len(),
                object_points.len()
            )));
        }
    }
    Ok(())
}

fn to_intrinsics(k: &[f64; 4], size: (u32, u32)) -> Result<Intrinsics, CalibError> {
    Intrinsics::new(k[0], k[1], k[2], k[3], size.0, size.1).map_err(|e| CalibError::DegenerateConfiguration(e.to_string()))
}

/// Closed-form initialisation of one device: `(fx, fy, ox, oy)` and the
/// board-to-device pose of every view.
pub fn initialize_device(views: &[&[Vector2<f64>]], object_points: &[Vector3<f64>]) -> Result<([f64; 4], Vec<RigidPose>), CalibError> {
    check_views(views, object_points)?;
    if views.len() < 3 {
        return Err(CalibError::DegenerateConfiguration(format!("need at least 3 poses, got {}", views.len())));
    }
    let plane: Vec<Vector2<f64>> = object_points.iter().map(|p| p.xy()).collect();
    let hs = views.iter().map(|v| homography_dlt(&plane, v)).collect::<Result<Vec<_>, _>>()?;
    let k = intrinsics_from_homographies(&hs)?;
    let km = Matrix3::new(k[0], 0.0, k[2], 0.0, k[1], k[3], 0.0, 0.0, 1.0);
    let poses = hs.iter().map(|h| pose_from_homography(h, &km)).collect::<Result<Vec<_>, _>>()?;
    Ok((k, poses))
}

/// Calibrates one device from ≥3 views of the board: closed-form
/// initialisation followed by Levenberg–Marquardt on the intrinsics and
/// every pose.
pub fn calibrate_intrinsics(
    views: &[&[Vector2<f64>]],
    object_points: &[Vector3<f64>],
    image_size: (u32, u32),
    cfg: &LmConfig,
) -> Result<IntrinsicCalibration, CalibError> {
    let (k, poses) = initialize_device(views, object_points)?;
    let problem = ReprojectionProblem { object_points, camera: views.to_vec(), projector: None };
    let start = RigState { kc: k, kp: None, cam_to_proj: RigidPose::identity(), poses };
    let (state, report) = levenberg_marquardt(&problem, start, cfg);
    if !report.converged {
        return Err(CalibError::NonConvergence { iterations: report.iterations });
    }
    let rms = rms(&problem.split_residuals(&state).0);
    Ok(IntrinsicCalibration { intrinsics: to_intrinsics(&state.kc, image_size)?, poses: state.poses, rms, report })
}

/// Mean rotation in the rotation group: chordal mean followed by
/// Karcher (geodesic) iterations.
pub fn average_rotations(rs: &[Matrix3<f64>]) -> Option<Matrix3<f64>> {
    if rs.is_empty() {
        return None;
    }
    let sum: Matrix3<f64> = rs.iter().sum();
    let mut mean = nearest_rotation(&sum)?;
    for _ in 0..50 {
        let step: Vector3<f64> = rs.iter().map(|r| log_so3(&(mean.transpose() * r))).sum::<Vector3<f64>>() / rs.len() as f64;
        mean *= exp_so3(&step);
        if step.norm() < 1e-15 {
            break;
        }
    }
    Some(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoConfig {
    /// Poses whose RMS exceeds this multiple of the median are dropped and
    /// the refinement repeated once.
    pub outlier_factor: f64,
    /// Acceptance threshold on both reported RMS values, in pixels.
    pub rms_threshold: f64,
}

impl Default for StereoConfig {
    fn default() -> Self {
        StereoConfig { outlier_factor: 3.0, rms_threshold: 0.5 }
    }
}

/// Serialised through [`CalibrationResult::to_file`].
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub cam: Intrinsics,
    pub proj: Intrinsics,
    /// Camera-to-projector transform; the camera frame is the world frame.
    pub cam_to_proj: RigidPose,
    /// Board-to-camera pose of every accepted view.
    pub per_pose_board: Vec<RigidPose>,
    pub stereo_reproj_rms: f64,
    pub proj_reproj_rms: f64,
    /// Capture pose indices that survived outlier rejection.
    pub accepted_poses: Vec<usize>,
    pub iterations: usize,
}

impl CalibrationResult {
    pub fn within_threshold(&self, threshold: f64) -> bool {
        self.stereo_reproj_rms < threshold && self.proj_reproj_rms < threshold
    }

    pub fn to_file(&self) -> CalibrationFile {
        CalibrationFile {
            version: CALIBRATION_VERSION,
            camera: DeviceCalibration::new(self.cam, &RigidPose::identity()),
            projector: DeviceCalibration::new(self.proj, &self.cam_to_proj),
            stereo_reproj_rms: Some(self.stereo_reproj_rms),
            proj_reproj_rms: Some(self.proj_reproj_rms),
            accepted_poses: Some(self.accepted_poses.clone()),
        }
    }
}

fn per_pose_rms(problem: &ReprojectionProblem, s: &RigState) -> Vec<f64> {
    let (cam, proj) = problem.split_residuals(s);
    let np = problem.n_points();
    (0..s.poses.len())
        .map(|i| {
            let mut r = cam[i * np..(i + 1) * np].to_vec();
            r.extend_from_slice(&proj[i * np..(i + 1) * np]);
            rms(&r)
        })
        .collect()
}

/// Stereo calibration of the camera/projector pair. `cam_views[i]` and
/// `proj_views[i]` are the camera and projector images of the board
/// object points in pose `i`; `pose_ids[i]` labels the pose in the result.
pub fn stereo_calibrate(
    cam_views: &[&[Vector2<f64>]],
    proj_views: &[&[Vector2<f64>]],
    pose_ids: &[usize],
    object_points: &[Vector3<f64>],
    cam_size: (u32, u32),
    proj_size: (u32, u32),
    cfg: &StereoConfig,
    lm_cfg: &LmConfig,
) -> Result<CalibrationResult, CalibError> {
    if cam_views.len() != proj_views.len() || pose_ids.len() != cam_views.len() {
        return Err(CalibError::InconsistentPoseCount { camera: cam_views.len(), projector: proj_views.len() });
    }
    let cam = calibrate_intrinsics(cam_views, object_points, cam_size, lm_cfg)?;
    let proj = calibrate_intrinsics(proj_views, object_points, proj_size, lm_cfg)?;

    let relative: Vec<RigidPose> = cam.poses.iter().zip(&proj.poses).map(|(c, p)| p.compose(&c.inverse())).collect();
    let rot = average_rotations(&relative.iter().map(|r| *r.rotation()).collect::<Vec<_>>())
        .ok_or_else(|| CalibError::DegenerateConfiguration("rotation averaging failed".into()))?;
    let t = relative.iter().map(|r| *r.translation()).sum::<Vector3<f64>>() / relative.len() as f64;
    let c2p = RigidPose::new(rot, t).map_err(|e| CalibError::DegenerateConfiguration(e.to_string()))?;

    let mut state = RigState {
        kc: [cam.intrinsics.fx, cam.intrinsics.fy, cam.intrinsics.ox, cam.intrinsics.oy],
        kp: Some([proj.intrinsics.fx, proj.intrinsics.fy, proj.intrinsics.ox, proj.intrinsics.oy]),
        cam_to_proj: c2p,
        poses: cam.poses,
    };
    let mut kept: Vec<usize> = (0..cam_views.len()).collect();
    let mut iterations = 0;
    for round in 0..2 {
        let problem = ReprojectionProblem {
            object_points,
            camera: kept.iter().map(|&i| cam_views[i]).collect(),
            projector: Some(kept.iter().map(|&i| proj_views[i]).collect()),
        };
        let (refined, report) = levenberg_marquardt(&problem, state, lm_cfg);
        iterations += report.iterations;
        if !report.converged {
            return Err(CalibError::NonConvergence { iterations: report.iterations });
        }
        state = refined;
        if round == 1 {
            break;
        }
        let per_pose = per_pose_rms(&problem, &state);
        let mut sorted = per_pose.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let keep: Vec<bool> = per_pose.iter().map(|r| *r <= cfg.outlier_factor * median).collect();
        let n_keep = keep.iter().filter(|k| **k).count();
        if n_keep == kept.len() || n_keep < 3 {
            break;
        }
        log::info!("dropping {} outlier poses", kept.len() - n_keep);
        state.poses = state.poses.iter().zip(&keep).filter(|(_, k)| **k).map(|(p, _)| *p).collect();
        kept = kept.iter().zip(&keep).filter(|(_, k)| **k).map(|(i, _)| *i).collect();
    }

    let problem = ReprojectionProblem {
        object_points,
        camera: kept.iter().map(|&i| cam_views[i]).collect(),
        projector: Some(kept.iter().map(|&i| proj_views[i]).collect()),
    };
    let (cam_res, proj_res) = problem.split_residuals(&state);
    Ok(CalibrationResult {
        cam: to_intrinsics(&state.kc, cam_size)?,
        proj: to_intrinsics(&state.kp.expect("stereo state has projector intrinsics"), proj_size)?,
        cam_to_proj: state.cam_to_proj,
        per_pose_board: state.poses,
        stereo_reproj_rms: rms(&cam_res),
        proj_reproj_rms: rms(&proj_res),
        accepted_poses: kept.iter().map(|&i| pose_ids[i]).collect(),
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ProjectionMatrix;
    use crate::patterns::{board_object_points, BoardScaling, CalibBoardSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn object_points() -> Vec<Vector3<f64>> {
        board_object_points(&CalibBoardSpec::default(), BoardScaling::FitToPlane).unwrap()
    }

    fn true_cam() -> Intrinsics {
        Intrinsics::new(1142.88, 1140.0, 241.0, 237.5, 480, 480).unwrap()
    }

    fn true_proj() -> Intrinsics {
        Intrinsics::new(1820.0, 1815.0, 455.5, 569.5, 912, 1140).unwrap()
    }

    fn true_c2p() -> RigidPose {
        RigidPose::look_at(Vector3::new(-125.0, 100.0, 0.0), Vector3::new(0.0, 0.0, 500.0), Vector3::new(0.0, -1.0, 0.0)).unwrap()
    }

    fn board_poses(n: usize) -> Vec<RigidPose> {
        let c = Vector3::new(50.0, 50.0, 0.0);
        (0..n)
            .map(|i| {
                let a = i as f64 * 2.4;
                let w = Vector3::new(0.22 * a.sin(), 0.2 * (1.7 * a).cos(), 0.05 * a.cos());
                let r = exp_so3(&w);
                RigidPose::new(r, Vector3::new(10.0 * a.cos(), 8.0 * a.sin(), 500.0) - r * c).unwrap()
            })
            .collect()
    }

    fn views(k: &Intrinsics, device: &RigidPose, poses: &[RigidPose]) -> Vec<Vec<Vector2<f64>>> {
        let m = ProjectionMatrix::camera(k, device);
        poses.iter().map(|p| object_points().iter().map(|x| m.project(&p.transform_point(x)).unwrap()).collect()).collect()
    }

    fn refs(v: &[Vec<Vector2<f64>>]) -> Vec<&[Vector2<f64>]> {
        v.iter().map(|x| x.as_slice()).collect()
    }

    #[test]
    fn noise_free_intrinsics_are_recovered() {
        let obj = object_points();
        let v = views(&true_cam(), &RigidPose::identity(), &board_poses(5));
        let res = calibrate_intrinsics(&refs(&v), &obj, (480, 480), &LmConfig::default()).unwrap();
        let k = res.intrinsics;
        let t = true_cam();
        for (a, b) in [(k.fx, t.fx), (k.fy, t.fy), (k.ox, t.ox), (k.oy, t.oy)] {
            assert!((a - b).abs() / b < 1e-3, "{a} vs {b}");
        }
        assert!(res.rms < 1e-6, "rms {}", res.rms);
        assert!(res.report.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn noisy_detections_give_rms_near_sigma() {
        let obj = object_points();
        let clean = views(&true_cam(), &RigidPose::identity(), &board_poses(8));
        let sigma = 0.05;
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut ratios = Vec::new();
        for trial in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let noisy: Vec<Vec<Vector2<f64>>> = clean
                .iter()
                .map(|v| v.iter().map(|p| p + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))).collect())
                .collect();
            let res = calibrate_intrinsics(&refs(&noisy), &obj, (480, 480), &LmConfig::default()).unwrap();
            // The point RMS of a 2D residual is about σ·√2 shrunk by the fitted degrees of freedom.
            ratios.push(res.rms / (sigma * 2f64.sqrt()));
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(mean > 1.0 / 1.5 && mean < 1.5, "mean ratio {mean}");
    }

    #[test]
    fn two_views_are_degenerate() {
        let obj = object_points();
        let v = views(&true_cam(), &RigidPose::identity(), &board_poses(2));
        assert!(matches!(
            calibrate_intrinsics(&refs(&v), &obj, (480, 480), &LmConfig::default()),
            Err(CalibError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let obj = object_points();
        let poses = board_poses(3);
        let cv = views(&true_cam(), &RigidPose::identity(), &poses);
        let pv = views(&true_proj(), &true_c2p(), &poses);
        let problem = ReprojectionProblem { object_points: &obj, camera: refs(&cv), projector: Some(refs(&pv)) };
        let state = RigState {
            kc: [1100.0, 1150.0, 230.0, 250.0],
            kp: Some([1800.0, 1790.0, 450.0, 560.0]),
            cam_to_proj: true_c2p().perturbed(&Vector3::new(0.01, -0.02, 0.005), &Vector3::new(1.0, 2.0, -1.0)),
            poses: poses.iter().map(|p| p.perturbed(&Vector3::new(0.01, 0.0, -0.01), &Vector3::new(0.5, -0.5, 2.0))).collect(),
        };
        let a = problem.jacobian(&state);
        let n = lm::numeric_jacobian(&problem, &state, problem.n_params(), 1e-6);
        let scale = a.abs().max();
        let err = (&a - &n).abs().max();
        assert!(err / scale < 1e-5, "relative Jacobian error {}", err / scale);
    }

    #[test]
    fn noise_free_stereo_is_exact() {
        let obj = object_points();
        let poses = board_poses(6);
        let cv = views(&true_cam(), &RigidPose::identity(), &poses);
        let pv = views(&true_proj(), &true_c2p(), &poses);
        let ids: Vec<usize> = (0..6).collect();
        let res = stereo_calibrate(&refs(&cv), &refs(&pv), &ids, &obj, (480, 480), (912, 1140), &StereoConfig::default(), &LmConfig::default())
            .unwrap();
        assert!((res.cam_to_proj.translation() - true_c2p().translation()).norm() < 0.01);
        assert!(res.cam_to_proj.rotation_angle_to(&true_c2p()).to_degrees() < 1e-3);
        assert!(res.stereo_reproj_rms < 1e-6 && res.proj_reproj_rms < 1e-6);
        assert_eq!(res.accepted_poses, ids);

    }

    #[test]
    fn reported_rms_matches_recomputation() {
        let obj = object_points();
        let poses = board_poses(6);
        let cv = views(&true_cam(), &RigidPose::identity(), &poses);
        let mut pv = views(&true_proj(), &true_c2p(), &poses);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 0.1).unwrap();
        for p in pv.iter_mut().flatten() {
            *p += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
        }
        let ids: Vec<usize> = (0..6).collect();
        let res = stereo_calibrate(&refs(&cv), &refs(&pv), &ids, &obj, (480, 480), (912, 1140), &StereoConfig::default(), &LmConfig::default())
            .unwrap();
        let pix = |k: &Intrinsics, x: Vector3<f64>| Vector2::new(k.fx * x.x / x.z + k.ox, k.fy * x.y / x.z + k.oy);
        let (mut sc, mut sp, mut n) = (0.0, 0.0, 0.0);
        for (i, p) in res.per_pose_board.iter().enumerate() {
            for (j, x) in obj.iter().enumerate() {
                let w = p.rotation() * x + p.translation();
                sc += (pix(&res.cam, w) - cv[i][j]).norm_squared();
                sp += (pix(&res.proj, res.cam_to_proj.rotation() * w + res.cam_to_proj.translation()) - pv[i][j]).norm_squared();
                n += 1.0;
            }
        }
        let (rc, rp) = ((sc / n).sqrt(), (sp / n).sqrt());
        assert!((rc - res.stereo_reproj_rms).abs() <= 1e-12 * rc, "{rc} vs {}", res.stereo_reproj_rms);
        assert!((rp - res.proj_reproj_rms).abs() <= 1e-12 * rp, "{rp} vs {}", res.proj_reproj_rms);
        assert!(rp > 0.05 && rc > 0.0);
    }

    #[test]
    fn mismatched_pose_lists_are_rejected() {
        let obj = object_points();
        let cv = views(&true_cam(), &RigidPose::identity(), &board_poses(4));
        let pv = views(&true_proj(), &true_c2p(), &board_poses(3));
        assert!(matches!(
            stereo_calibrate(&refs(&cv), &refs(&pv), &[0, 1, 2, 3], &obj, (480, 480), (912, 1140), &StereoConfig::default(), &LmConfig::default()),
            Err(CalibError::InconsistentPoseCount { camera: 4, projector: 3 })
        ));
    }

    #[test]
    fn outlier_pose_is_dropped() {
        let obj = object_points();
        let poses = board_poses(8);
        let cv = views(&true_cam(), &RigidPose::identity(), &poses);
        let mut pv = views(&true_proj(), &true_c2p(), &poses);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.05).unwrap();
        for v in pv.iter_mut() {
            for p in v.iter_mut() {
                *p += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
        }
        for p in pv[3].iter_mut() {
            *p += Vector2::new(noise.sample(&mut rng) * 40.0, noise.sample(&mut rng) * 40.0);
        }
        let ids: Vec<usize> = (10..18).collect();
        let res = stereo_calibrate(&refs(&cv), &refs(&pv), &ids, &obj, (480, 480), (912, 1140), &StereoConfig::default(), &LmConfig::default())
            .unwrap();
        assert!(!res.accepted_poses.contains(&13));
        assert_eq!(res.per_pose_board.len(), res.accepted_poses.len());
    }

    #[test]
    fn zero_phase_maps_to_zero_column() {
        let maps = PhaseMaps {
            width: 4,
            height: 4,
            wrapped: vec![0.0; 16],
            order: vec![0; 16],
            unwrapped: vec![0.0; 16],
            avg: vec![0.0; 16],
            modulation: vec![1.0; 16],
            mask: vec![true; 16],
        };
        let mut rows = maps.clone();
        rows.unwrapped = (0..16).map(|i| (i / 4) as f64).collect();
        let det = GridDetection { pose_index: 0, image_width: 4, image_height: 4, centers: vec![Vector2::new(1.5, 1.25)] };
        let p = map_centers_to_projector(&det, &maps, &rows, 19.0).unwrap();
        assert_eq!(p[0].x, 0.0);
        let p2 = map_centers_to_projector(&det, &maps, &rows, 38.0).unwrap();
        assert!((p2[0].y - 2.0 * p[0].y).abs() < 1e-12);
        let mut masked = maps.clone();
        masked.mask[5] = false;
        assert_eq!(map_centers_to_projector(&det, &masked, &rows, 19.0), Err(CalibError::CenterMasked { index: 0 }));
    }
}
