//! Parameter transfer from a calibrated rig to a simulator: camera
//! intrinsics in physical units, and the metric size of the projected image
//! at a given distance through the inverse pinhole model.

use nalgebra::{Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{extrinsic_pseudo_inverse, GeometryError, Intrinsics, RigidPose};
use crate::image::GrayImage16;
use crate::render::{render_frame, Camera, Falloff, Geometry, Material, PlanePatch, ProjectorLight, RenderError, Scene, SceneObject};

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("invalid camera transfer spec: {0}")]
    InvalidSpec(String),
    #[error("evaluation distance must be positive, got {0}")]
    InvalidDistance(f64),
    #[error("sweep needs at least two distances")]
    TooFewDistances,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Calibrated camera intrinsics plus the sensor pixel pitch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraTransferSpec {
    pub fx: f64,
    pub fy: f64,
    pub width: u32,
    pub height: u32,
    pub pixel_size_mm: f64,
}

impl CameraTransferSpec {
    pub fn validate(&self) -> Result<(), TwinError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.fx) && ok(self.fy) && ok(self.pixel_size_mm)) || self.width == 0 || self.height == 0 {
            return Err(TwinError::InvalidSpec(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Simulator camera parameters in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimCameraParams {
    pub focal_length_mm: f64,
    pub horizontal_aperture_mm: f64,
    pub vertical_aperture_mm: f64,
}

/// Mean focal length and sensor apertures in millimetres.
pub fn camera_params_to_sim(spec: &CameraTransferSpec) -> Result<SimCameraParams, TwinError> {
    spec.validate()?;
    let s = spec.pixel_size_mm;
    Ok(SimCameraParams {
        focal_length_mm: (spec.fx + spec.fy) / 2.0 * s,
        horizontal_aperture_mm: spec.width as f64 * s,
        vertical_aperture_mm: spec.height as f64 * s,
    })
}

/// Metric span of the projected image at distance `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedExtent {
    /// Span along the projector's u axis (mm).
    pub width_extent: f64,
    /// Span along the projector's v axis (mm).
    pub height_extent: f64,
    pub z: f64,
}

/// Back-projects the image corners `(0, 0)` and `(U, V)` with
/// `Z · pinv(M_ext) · inv(M_int) · [u, v, 1]ᵀ` and reports the span of the
/// first two world coordinates. `extrinsics` is the raw `[R | t]` in
/// millimetres; it is not required to be exactly orthonormal.
pub fn projected_extent_at_distance(
    k: &Intrinsics,
    extrinsics: &Matrix3x4<f64>,
    resolution: (u32, u32),
    z: f64,
) -> Result<ProjectedExtent, TwinError> {
    if !(z > 0.0 && z.is_finite()) {
        return Err(TwinError::InvalidDistance(z));
    }
    let pinv = extrinsic_pseudo_inverse(extrinsics)?;
    let k_inv = k.inverse_matrix();
    let back = |u: f64, v: f64| pinv * (k_inv * Vector3::new(u, v, 1.0)) * z;
    let a = back(0.0, 0.0);
    let b = back(resolution.0 as f64, resolution.1 as f64);
    Ok(ProjectedExtent { width_extent: (b[0] - a[0]).abs(), height_extent: (b[1] - a[1]).abs(), z })
}

/// [`projected_extent_at_distance`] for a validated rigid pose.
pub fn projected_extent_for_pose(k: &Intrinsics, pose: &RigidPose, resolution: (u32, u32), z: f64) -> Result<ProjectedExtent, TwinError> {
    projected_extent_at_distance(k, &pose.matrix(), resolution, z)
}

/// Least-squares line `y = slope·z + intercept` with its goodness of fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Mean absolute residual against the line (mm).
    pub mae: f64,
}

impl LinearFit {
    pub fn fit(x: &[f64], y: &[f64]) -> LinearFit {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let residuals: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - (slope * a + intercept)).collect();
        let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
        let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
        let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
        LinearFit { slope, intercept, r_squared, mae: residuals.iter().map(|r| r.abs()).sum::<f64>() / n }
    }

    pub fn predict(&self, z: f64) -> f64 {
        self.slope * z + self.intercept
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtentSweep {
    pub rows: Vec<ProjectedExtent>,
    pub width_fit: LinearFit,
    pub height_fit: LinearFit,
}

impl ExtentSweep {
    /// One row per distance; the residual column is the larger of the two
    /// axis residuals against their fitted lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("z_mm,width_mm,height_mm,fit_residual_mm\n");
        for r in &self.rows {
            let res = (r.width_extent - self.width_fit.predict(r.z)).abs().max((r.height_extent - self.height_fit.predict(r.z)).abs());
            s.push_str(&format!("{},{},{},{:e}\n", r.z, r.width_extent, r.height_extent, res));
        }
        s
    }
}

/// Evaluates the extent over `z_list` and fits a line per axis.
pub fn extent_linearity_sweep(
    k: &Intrinsics,
    extrinsics: &Matrix3x4<f64>,
    resolution: (u32, u32),
    z_list: &[f64],
) -> Result<ExtentSweep, TwinError> {
    if z_list.len() < 2 {
        return Err(TwinError::TooFewDistances);
    }
    let rows = z_list.iter().map(|&z| projected_extent_at_distance(k, extrinsics, resolution, z)).collect::<Result<Vec<_>, _>>()?;
    let z: Vec<f64> = rows.iter().map(|r| r.z).collect();
    let w: Vec<f64> = rows.iter().map(|r| r.width_extent).collect();
    let h: Vec<f64> = rows.iter().map(|r| r.height_extent).collect();
    Ok(ExtentSweep { width_fit: LinearFit::fit(&z, &w), height_fit: LinearFit::fit(&z, &h), rows })
}

/// Lit footprint of a projector on a rendered fronto-parallel screen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderedFootprint {
    pub width_px: u32,
    pub height_px: u32,
    /// Camera pixels per millimetre on the screen.
    pub px_per_mm: f64,
}

/// Renders an all-white projector frame onto a screen at depth `z` seen by a
/// camera at the world origin with focal length `camera_f_px`, and measures
/// the bounding box of pixels brighter than half the peak.
pub fn render_footprint(
    k_p: &Intrinsics,
    world_to_projector: &RigidPose,
    z: f64,
    camera_f_px: f64,
    camera_size: u32,
) -> Result<RenderedFootprint, TwinError> {
    if !(z > 0.0) {
        return Err(TwinError::InvalidDistance(z));
    }
    let c = (camera_size as f64 - 1.0) / 2.0;
    let half_view = (c + 1.0) * z / camera_f_px;
    let scene = Scene {
        camera: Camera { intrinsics: Intrinsics::new(camera_f_px, camera_f_px, c, c, camera_size, camera_size)?, pose: RigidPose::identity() },
        projector: ProjectorLight { intrinsics: *k_p, pose: *world_to_projector, texture: None, intensity: 1.0, falloff: Falloff::None },
        ambients: vec![],
        objects: vec![SceneObject {
            geometry: Geometry::Plane(PlanePatch {
                to_world: RigidPose::from_translation(Vector3::new(0.0, 0.0, z)),
                min: nalgebra::Vector2::new(-half_view, -half_view),
                size: nalgebra::Vector2::new(2.0 * half_view, 2.0 * half_view),
                texture: None,
            }),
            material: Material { albedo: 1.0, roughness: 1.0, specular: 0.0, metallic: 0.0, ao_to_diffuse: 1.0 },
        }],
        supersampling: 1,
    };
    let white = GrayImage16::filled(k_p.width, k_p.height, u16::MAX);
    let frame = render_frame(&scene, Some(&white))?;
    let peak = frame.data().iter().copied().max().unwrap_or(0);
    let (mut x0, mut x1, mut y0, mut y1) = (u32::MAX, 0, u32::MAX, 0);
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            if peak > 0 && frame.get(x, y) as u32 * 2 > peak as u32 {
                (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
            }
        }
    }
    let (width_px, height_px) = if x0 == u32::MAX { (0, 0) } else { (x1 - x0 + 1, y1 - y0 + 1) };
    Ok(RenderedFootprint { width_px, height_px, px_per_mm: camera_f_px / z })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eq19() -> (Intrinsics, Matrix3x4<f64>) {
        let k = Intrinsics::new(1820.10, 1819.95, 455.74, 571.74, 912, 1140).unwrap();
        #[rustfmt::skip]
        let m = Matrix3x4::new(
            1.0000, 0.0000, -0.0001, 89.72,
            -0.0000, 0.9999, -0.0012, -71.70,
            0.0001, 0.0012, 0.9999, -0.75,
        );
        (k, m)
    }

    #[test]
    fn camera_transfer_examples() {
        let p = camera_params_to_sim(&CameraTransferSpec { fx: 1000.0, fy: 1000.0, width: 960, height: 960, pixel_size_mm: 0.01 }).unwrap();
        assert!((p.focal_length_mm - 10.0).abs() < 1e-12);
        assert!((p.horizontal_aperture_mm - 9.6).abs() < 1e-12 && (p.vertical_aperture_mm - 9.6).abs() < 1e-12);
        let p = camera_params_to_sim(&CameraTransferSpec { fx: 1.0, fy: 1.0, width: 640, height: 480, pixel_size_mm: 1.0 }).unwrap();
        assert_eq!((p.focal_length_mm, p.horizontal_aperture_mm, p.vertical_aperture_mm), (1.0, 640.0, 480.0));
        let p = camera_params_to_sim(&CameraTransferSpec { fx: 1800.0, fy: 1840.0, width: 10, height: 10, pixel_size_mm: 0.01 }).unwrap();
        assert!((p.focal_length_mm - 18.2).abs() < 1e-12);
        assert!(camera_params_to_sim(&CameraTransferSpec { fx: 0.0, fy: 1.0, width: 1, height: 1, pixel_size_mm: 1.0 }).is_err());
    }

    #[test]
    fn unit_pinhole_extent() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 1).unwrap();
        let e = projected_extent_for_pose(&k, &RigidPose::identity(), (1, 1), 1.0).unwrap();
        assert_eq!((e.width_extent, e.height_extent), (1.0, 1.0));
        let e2 = projected_extent_for_pose(&k, &RigidPose::identity(), (1, 1), 2.0).unwrap();
        assert_eq!((e2.width_extent, e2.height_extent), (2.0, 2.0));
    }

    #[test]
    fn identity_extrinsics_match_similar_triangles() {
        let k = Intrinsics::new(1700.0, 1650.0, 400.0, 600.0, 912, 1140).unwrap();
        for z in [300.0, 750.0, 1234.5] {
            let e = projected_extent_for_pose(&k, &RigidPose::identity(), (912, 1140), z).unwrap();
            assert!((e.width_extent - z * 912.0 / 1700.0).abs() < 1e-9);
            assert!((e.height_extent - z * 1140.0 / 1650.0).abs() < 1e-9);
        }
    }

    #[test]
    fn eq19_sweep_scales_with_distance() {
        let (k, m) = eq19();
        let s = extent_linearity_sweep(&k, &m, (912, 1140), &[400.0, 600.0, 800.0, 1000.0]).unwrap();
        assert!(s.rows.windows(2).all(|w| w[1].width_extent > w[0].width_extent && w[1].height_extent > w[0].height_extent));
        let (a, b) = (s.rows[0], s.rows[3]);
        assert!((b.width_extent / a.width_extent / 2.5 - 1.0).abs() < 1e-6);
        assert!((b.height_extent / a.height_extent / 2.5 - 1.0).abs() < 1e-6);
        assert!(1.0 - s.width_fit.r_squared < 1e-12 && 1.0 - s.height_fit.r_squared < 1e-12);
        assert!(s.width_fit.mae < 1e-9 && s.height_fit.mae < 1e-9);
        assert!(s.to_csv().starts_with("z_mm,width_mm,height_mm,fit_residual_mm\n400,"));
    }

    #[test]
    fn rank_deficient_extrinsics_fail() {
        let (k, _) = eq19();
        let m = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(projected_extent_at_distance(&k, &m, (912, 1140), 1000.0), Err(TwinError::Geometry(_))));
        assert!(matches!(projected_extent_at_distance(&k, &eq19().1, (912, 1140), 0.0), Err(TwinError::InvalidDistance(_))));
    }

    #[test]
    fn rendered_footprint_matches_extent() {
        let k = Intrinsics::new(1820.0, 1820.0, 455.5, 569.5, 912, 1140).unwrap();
        let z = 800.0;
        let e = projected_extent_for_pose(&k, &RigidPose::identity(), (912, 1140), z).unwrap();
        let f = render_footprint(&k, &RigidPose::identity(), z, 500.0, 400).unwrap();
        assert!((f.width_px as f64 - e.width_extent * f.px_per_mm).abs() <= 1.0, "{f:?} {e:?}");
        assert!((f.height_px as f64 - e.height_extent * f.px_per_mm).abs() <= 1.0, "{f:?} {e:?}");
    }
}
