//! Stock rig and scenes: the virtual camera/projector pair, the
//! calibration board plane and the 50 mm sphere used for validation.

use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{AmbientLight, Camera, Falloff, Geometry, Material, PlanePatch, ProjectorLight, RenderError, Scene, SceneObject};
use crate::geometry::{Intrinsics, RigidPose};
use crate::patterns::{gen_calibration_board, BoardMetrics, BoardScaling, CalibBoardSpec};

/// Camera focal length over horizontal aperture (50 cm / 20.9995 cm).
pub const CAMERA_F_OVER_APERTURE: f64 = 50.0 / 20.9995;
pub const PROJECTOR_WIDTH: u32 = 912;
pub const PROJECTOR_HEIGHT: u32 = 1140;
pub const PROJECTOR_FOCAL_PX: f64 = 1820.0;
/// Projector optical centre: 125 mm left of and 100 mm below the camera.
pub const PROJECTOR_POSITION: [f64; 3] = [-125.0, 100.0, 0.0];
/// Distance of the base board pose and of the sphere centre from the rig.
pub const WORKING_DISTANCE_MM: f64 = 500.0;
pub const DEFAULT_PROJECTOR_INTENSITY: f64 = 0.7;
pub const SPHERE_RADIUS_MM: f64 = 50.0;

/// Square pinhole camera whose horizontal field of view follows the
/// focal-length-to-aperture ratio; principal point at the image centre.
pub fn default_camera(width: u32) -> Camera {
    let f = CAMERA_F_OVER_APERTURE * width as f64;
    let c = (width as f64 - 1.0) / 2.0;
    Camera { intrinsics: Intrinsics::new(f, f, c, c, width, width).expect("valid camera"), pose: RigidPose::identity() }
}

/// 912x1140 pinhole projector aimed at the working point.
pub fn default_projector() -> ProjectorLight {
    let [x, y, z] = PROJECTOR_POSITION;
    ProjectorLight {
        intrinsics: Intrinsics::new(
            PROJECTOR_FOCAL_PX,
            PROJECTOR_FOCAL_PX,
            (PROJECTOR_WIDTH as f64 - 1.0) / 2.0,
            (PROJECTOR_HEIGHT as f64 - 1.0) / 2.0,
            PROJECTOR_WIDTH,
            PROJECTOR_HEIGHT,
        )
        .expect("valid projector"),
        pose: RigidPose::look_at(Vector3::new(x, y, z), Vector3::new(0.0, 0.0, WORKING_DISTANCE_MM), -Vector3::y())
            .expect("valid projector pose"),
        texture: None,
        intensity: DEFAULT_PROJECTOR_INTENSITY,
        falloff: Falloff::None,
    }
}

/// Ambient lighting tiers, from darkest to brightest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightingTier {
    NoAmbient,
    /// Uniform overhead sky only.
    Baseline,
    /// Sky plus a panel on the left.
    OneAmbient,
    /// Sky plus panels on both sides.
    TwoAmbient,
}

impl LightingTier {
    pub const ALL: [LightingTier; 4] =
        [LightingTier::NoAmbient, LightingTier::Baseline, LightingTier::OneAmbient, LightingTier::TwoAmbient];

    pub fn ambients(self) -> Vec<AmbientLight> {
        let target = Vector3::new(0.0, 0.0, WORKING_DISTANCE_MM);
        let panel = |x: f64| {
            AmbientLight::panel(Vector3::new(x, 0.0, 250.0), target, 400.0, 400.0, 4, 1.0).expect("valid panel")
        };
        match self {
            LightingTier::NoAmbient => vec![],
            LightingTier::Baseline => vec![AmbientLight::sky(0.15)],
            LightingTier::OneAmbient => vec![AmbientLight::sky(0.15), panel(-350.0)],
            LightingTier::TwoAmbient => vec![AmbientLight::sky(0.15), panel(-350.0), panel(350.0)],
        }
    }
}

/// Named material presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialPreset {
    Baseline,
    AoDisabled,
    Metallic,
}

impl MaterialPreset {
    pub fn material(self) -> Material {
        match self {
            MaterialPreset::Baseline => Material::baseline(),
            MaterialPreset::AoDisabled => Material::ao_disabled(),
            MaterialPreset::Metallic => Material::metallic(),
        }
    }
}

/// 50 mm sphere at the working distance.
pub fn sphere_scene(camera_width: u32, material: Material, lighting: LightingTier) -> Scene {
    Scene {
        camera: default_camera(camera_width),
        projector: default_projector(),
        ambients: lighting.ambients(),
        objects: vec![SceneObject {
            geometry: Geometry::Sphere { center: Vector3::new(0.0, 0.0, WORKING_DISTANCE_MM), radius: SPHERE_RADIUS_MM },
            material,
        }],
        supersampling: 1,
    }
}

/// Board plane textured with a generated circle grid.
#[derive(Debug, Clone)]
pub struct BoardObject {
    pub spec: CalibBoardSpec,
    pub metrics: BoardMetrics,
    pub patch: PlanePatch,
}

impl BoardObject {
    pub fn new(spec: &CalibBoardSpec, scaling: BoardScaling) -> Result<Self, RenderError> {
        let (texture, metrics) =
            gen_calibration_board(spec, scaling).map_err(|e| RenderError::InvalidScene(e.to_string()))?;
        let (min, size) = metrics.plane_rect();
        Ok(BoardObject {
            spec: spec.clone(),
            metrics,
            patch: PlanePatch { to_world: RigidPose::identity(), min, size, texture: Some(Arc::new(texture)) },
        })
    }

    /// Centre of the plane in the board frame.
    pub fn plane_center(&self) -> Vector3<f64> {
        let c: Vector2<f64> = self.patch.min + self.patch.size / 2.0;
        Vector3::new(c.x, c.y, 0.0)
    }

    /// Fronto-parallel pose with the plane centre on the camera axis at
    /// the working distance.
    pub fn base_pose(&self) -> RigidPose {
        RigidPose::from_translation(Vector3::new(0.0, 0.0, WORKING_DISTANCE_MM) - self.plane_center())
    }

    /// Plane corners in the board frame.
    pub fn corners(&self) -> [Vector3<f64>; 4] {
        let (m, s) = (self.patch.min, self.patch.size);
        [
            Vector3::new(m.x, m.y, 0.0),
            Vector3::new(m.x + s.x, m.y, 0.0),
            Vector3::new(m.x + s.x, m.y + s.y, 0.0),
            Vector3::new(m.x, m.y + s.y, 0.0),
        ]
    }

    pub fn object(&self, board_to_world: RigidPose) -> SceneObject {
        SceneObject {
            geometry: Geometry::Plane(PlanePatch { to_world: board_to_world, ..self.patch.clone() }),
            material: Material { albedo: 1.0, roughness: 0.95, specular: 0.05, metallic: 0.0, ao_to_diffuse: 0.95 },
        }
    }
}

/// Calibration rig with the board as object 0 at its base pose.
pub fn board_scene(camera_width: u32, board: &BoardObject) -> Scene {
    Scene {
        camera: default_camera(camera_width),
        projector: default_projector(),
        ambients: vec![],
        objects: vec![board.object(board.base_pose())],
        supersampling: 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn camera_focal_length_follows_aperture_ratio() {
        let c = default_camera(960);
        assert!((c.intrinsics.fx - 2285.77).abs() < 0.01);
        assert!((default_camera(480).intrinsics.fx - 1142.88).abs() < 0.01);
    }

    #[test]
    fn projector_sees_working_point_near_centre() {
        let p = default_projector();
        let m = crate::geometry::ProjectionMatrix::projector(&p.intrinsics, &p.pose);
        let uv = m.project(&Vector3::new(0.0, 0.0, WORKING_DISTANCE_MM)).unwrap();
        assert!((uv.x - 455.5).abs() < 1e-6 && (uv.y - 569.5).abs() < 1e-6);
    }

    #[test]
    fn base_pose_centres_board() {
        let board = BoardObject::new(&CalibBoardSpec::default(), BoardScaling::FitToPlane).unwrap();
        let c = board.base_pose().transform_point(&board.plane_center());
        assert!((c - Vector3::new(0.0, 0.0, WORKING_DISTANCE_MM)).norm() < 1e-12);
    }
}
