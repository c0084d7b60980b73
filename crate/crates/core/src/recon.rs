//! Phase-to-depth triangulation.
//!
//! Each valid camera pixel `(u_c, v_c)` with projector column `u_p` gives
//! three linear equations in the world point: two from the camera matrix
//! and one from the first projector row.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::calib::CalibrationResult;
use crate::geometry::{GeometryError, ProjectionMatrix, RigidPose};
use crate::io::{CalibrationFile, PlyData};
use crate::phase::PhaseMaps;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconError {
    #[error("singular triangulation geometry (normalised det {0:e})")]
    SingularGeometry(f64),
    #[error("phase map has no valid pixels")]
    EmptyMask,
    #[error("invalid reconstruction input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Points in millimetres, optionally tagged with their source pixel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub pixels: Option<Vec<[u32; 2]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        PointCloud { points, pixels: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| p * factor).collect(), pixels: self.pixels.clone() }
    }

    pub fn transformed(&self, pose: &RigidPose) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| pose.transform_point(p)).collect(), pixels: self.pixels.clone() }
    }

    pub fn to_ply(&self) -> PlyData {
        PlyData {
            points: self.points.clone(),
            uv: self.pixels.as_ref().map(|px| px.iter().map(|p| [p[0] as f64, p[1] as f64]).collect()),
            faces: Vec::new(),
        }
    }

    pub fn from_ply(data: &PlyData) -> PointCloud {
        PointCloud {
            points: data.points.clone(),
            pixels: data.uv.as_ref().map(|uv| uv.iter().map(|p| [p[0].round() as u32, p[1].round() as u32]).collect()),
        }
    }
}

/// Camera and projector matrices of one calibration, plus the fringe period
/// of the vertical (column-encoding) patterns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulationInputs {
    pub m_c: ProjectionMatrix,
    pub m_p: ProjectionMatrix,
    pub period_px: f64,
}

impl TriangulationInputs {
    pub fn from_result(calib: &CalibrationResult, period_px: f64) -> Self {
        TriangulationInputs {
            m_c: ProjectionMatrix::camera(&calib.cam, &RigidPose::identity()),
            m_p: ProjectionMatrix::projector(&calib.proj, &calib.cam_to_proj),
            period_px,
        }
    }

    pub fn from_file(calib: &CalibrationFile, period_px: f64) -> Result<Self, ReconError> {
        Ok(TriangulationInputs {
            m_c: ProjectionMatrix::camera(&calib.camera.intrinsics, &calib.camera.extrinsics.pose()?),
            m_p: ProjectionMatrix::projector(&calib.projector.intrinsics, &calib.projector.extrinsics.pose()?),
            period_px,
        })
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn solve3(mut a: Matrix3<f64>, mut b: Vector3<f64>) -> Option<Vector3<f64>> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))?;
        if a[(pivot, col)] == 0.0 {
            return None;
        }
        a.swap_rows(col, pivot);
        b.swap_rows(col, pivot);
        for row in col + 1..3 {
            let f = a[(row, col)] / a[(col, col)];
            for k in col..3 {
                a[(row, k)] -= f * a[(col, k)];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = Vector3::zeros();
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[(row, k)] * x[k]).sum();
        x[row] = (b[row] - s) / a[(row, row)];
    }
    Some(x)
}

/// World point seen at camera pixel `(u_c, v_c)` and projector column `u_p`.
pub fn triangulate_point(m_c: &ProjectionMatrix, m_p: &ProjectionMatrix, u_c: f64, v_c: f64, u_p: f64) -> Result<Vector3<f64>, ReconError> {
    let (c, p) = (&m_c.m, &m_p.m);
    let row = |m: &nalgebra::Matrix3x4<f64>, r: usize, s: f64| {
        (
            [m[(r, 0)] - s * m[(2, 0)], m[(r, 1)] - s * m[(2, 1)], m[(r, 2)] - s * m[(2, 2)]],
            s * m[(2, 3)] - m[(r, 3)],
        )
    };
    let rows = [row(c, 0, u_c), row(c, 1, v_c), row(p, 0, u_p)];
    let a = Matrix3::from_fn(|i, j| rows[i].0[j]);
    let b = Vector3::new(rows[0].1, rows[1].1, rows[2].1);
    // det relative to the product of row norms (Hadamard bound) is scale free.
    let scale: f64 = (0..3).map(|i| a.row(i).norm()).product();
    let rel = if scale > 0.0 { a.determinant().abs() / scale } else { 0.0 };
    if rel < 1e-12 {
        return Err(ReconError::SingularGeometry(rel));
    }
    solve3(a, b).ok_or(ReconError::SingularGeometry(rel))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub cloud: PointCloud,
    /// Valid pixels skipped because their geometry was singular.
    pub skipped: usize,
}

/// Triangulates every valid pixel of a vertical-fringe phase map and
/// multiplies the coordinates by `scale`. Output is row-major.
pub fn reconstruct_cloud(maps: &PhaseMaps, inputs: &TriangulationInputs, scale: f64) -> Result<Reconstruction, ReconError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(ReconError::InvalidInput(format!("scale must be positive, got {scale}")));
    }
    if maps.valid_count() == 0 {
        return Err(ReconError::EmptyMask);
    }
    let k = inputs.period_px / (2.0 * std::f64::consts::PI);
    let rows: Vec<(Vec<(Vector3<f64>, [u32; 2])>, usize)> = (0..maps.height)
        .into_par_iter()
        .map(|y| {
            let mut pts = Vec::new();
            let mut skipped = 0;
            for x in 0..maps.width {
                let i = maps.index(x, y);
                if !maps.mask[i] {
                    continue;
                }
                match triangulate_point(&inputs.m_c, &inputs.m_p, x as f64, y as f64, maps.unwrapped[i] * k) {
                    Ok(p) => pts.push((p * scale, [x, y])),
                    Err(_) => skipped += 1,
                }
            }
            (pts, skipped)
        })
        .collect();
    let skipped = rows.iter().map(|r| r.1).sum();
    if skipped > 0 {
        log::debug!("{skipped} pixels skipped for singular geometry");
    }
    let (points, pixels): (Vec<_>, Vec<_>) = rows.into_iter().flat_map(|r| r.0).unzip();
    Ok(Reconstruction { cloud: PointCloud { points, pixels: Some(pixels) }, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{DeviceRole, Intrinsics};
    use nalgebra::{DMatrix, DVector, Matrix3x4};
    use proptest::prelude::*;

    fn raw(m: Matrix3x4<f64>, role: DeviceRole) -> ProjectionMatrix {
        ProjectionMatrix { m, role }
    }

    fn rig() -> (ProjectionMatrix, ProjectionMatrix) {
        let kc = Intrinsics::new(1142.88, 1142.88, 239.5, 239.5, 480, 480).unwrap();
        let kp = Intrinsics::new(1820.0, 1820.0, 455.5, 569.5, 912, 1140).unwrap();
        let pose = RigidPose::look_at(Vector3::new(-125.0, 100.0, 0.0), Vector3::new(0.0, 0.0, 500.0), Vector3::new(0.0, -1.0, 0.0)).unwrap();
        (ProjectionMatrix::camera(&kc, &RigidPose::identity()), ProjectionMatrix::projector(&kp, &pose))
    }

    #[test]
    fn identity_geometry() {
        let mc = raw(Matrix3x4::identity(), DeviceRole::Camera);
        let mut mp = Matrix3x4::identity();
        mp[(0, 3)] = -1.0;
        let x = triangulate_point(&mc, &raw(mp, DeviceRole::Projector), 0.0, 0.0, -1.0).unwrap();
        assert!((x - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_baseline_is_singular() {
        let (mc, _) = rig();
        assert!(matches!(triangulate_point(&mc, &mc, 240.0, 240.0, 240.0), Err(ReconError::SingularGeometry(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn projected_points_round_trip(x in -80.0..80.0f64, y in -80.0..80.0f64, z in 400.0..600.0f64) {
            let (mc, mp) = rig();
            let w = Vector3::new(x, y, z);
            let c = mc.project(&w).unwrap();
            let p = mp.project(&w).unwrap();
            let t = triangulate_point(&mc, &mp, c.x, c.y, p.x).unwrap();
            prop_assert!((t - w).norm() < 1e-6);
            // Closure: reprojection of the estimate.
            prop_assert!((mc.project(&t).unwrap() - c).norm() < 1e-8);
            prop_assert!((mp.project(&t).unwrap().x - p.x).abs() < 1e-8);
            // Independent least-squares solve of all four equations.
            let mut a = DMatrix::zeros(4, 3);
            let mut b = DVector::zeros(4);
            for (i, (m, s, r)) in [(&mc, c.x, 0), (&mc, c.y, 1), (&mp, p.x, 0), (&mp, p.y, 1)].into_iter().enumerate() {
                for j in 0..3 {
                    a[(i, j)] = m.m[(r, j)] - s * m.m[(2, j)];
                }
                b[i] = s * m.m[(2, 3)] - m.m[(r, 3)];
                let n = a.row(i).norm();
                a.row_mut(i).scale_mut(1.0 / n);
                b[i] /= n;
            }
            let qr = a.qr();
            let ls = qr.r().solve_upper_triangular(&(qr.q().transpose() * &b)).unwrap();
            let d = (Vector3::new(ls[0], ls[1], ls[2]) - t).norm();
            prop_assert!(d < 1e-9, "least-squares gap {d}");
        }
    }

    fn plane_maps(mc: &ProjectionMatrix, mp: &ProjectionMatrix, n: u32) -> PhaseMaps {
        // Plane z = 500 + 0.2x seen by a small camera window.
        let mut maps = PhaseMaps {
            width: n,
            height: n,
            wrapped: vec![0.0; (n * n) as usize],
            order: vec![0; (n * n) as usize],
            unwrapped: vec![0.0; (n * n) as usize],
            avg: vec![0.0; (n * n) as usize],
            modulation: vec![1.0; (n * n) as usize],
            mask: vec![true; (n * n) as usize],
        };
        let kinv = mc.m.fixed_view::<3, 3>(0, 0).try_inverse().unwrap();
        for y in 0..n {
            for x in 0..n {
                let d = kinv * Vector3::new(x as f64 + 200.0, y as f64 + 200.0, 1.0);
                let t = 500.0 / (d.z - 0.2 * d.x);
                let w = d * t;
                let i = maps.index(x, y);
                maps.unwrapped[i] = mp.project(&w).unwrap().x * 2.0 * std::f64::consts::PI / 19.0;
            }
        }
        maps
    }

    #[test]
    fn plane_reconstruction_is_planar_and_scales_linearly() {
        let (mc, mp) = rig();
        // Shift the camera principal point so the 40x40 map covers pixels 200..240.
        let mut shifted = mc;
        shifted.m[(0, 2)] -= 200.0 * shifted.m[(2, 2)];
        shifted.m[(1, 2)] -= 200.0 * shifted.m[(2, 2)];
        let maps = plane_maps(&mc, &mp, 40);
        let inputs = TriangulationInputs { m_c: shifted, m_p: mp, period_px: 19.0 };
        let one = reconstruct_cloud(&maps, &inputs, 1.0).unwrap();
        assert_eq!(one.cloud.len(), 1600);
        assert_eq!(one.skipped, 0);
        let rms = (one.cloud.points.iter().map(|p| (p.z - 500.0 - 0.2 * p.x).powi(2)).sum::<f64>() / 1600.0).sqrt();
        assert!(rms < 0.05 * 1e-3, "plane residual {rms}");
        let two = reconstruct_cloud(&maps, &inputs, 2.0).unwrap();
        for (a, b) in one.cloud.points.iter().zip(&two.cloud.points) {
            assert_eq!(a * 2.0, *b);
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let (mc, mp) = rig();
        let mut maps = plane_maps(&mc, &mp, 4);
        maps.mask.iter_mut().for_each(|m| *m = false);
        let inputs = TriangulationInputs { m_c: mc, m_p: mp, period_px: 19.0 };
        assert_eq!(reconstruct_cloud(&maps, &inputs, 1.0), Err(ReconError::EmptyMask));
    }
}
