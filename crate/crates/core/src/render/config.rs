//! JSON scene description. Lengths are given in the document's `unit` and
//! converted to millimetres on load; intrinsics are always in pixels.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::scenes::{default_camera, default_projector, BoardObject, LightingTier, MaterialPreset};
use super::{AmbientKind, AmbientLight, Camera, Falloff, Geometry, Material, PlanePatch, ProjectorLight, RenderError, Scene, SceneObject};
use crate::geometry::{Intrinsics, LengthUnit, RigidPose};
use crate::image::GrayImage16;
use crate::io::read_ply;
use crate::mesh::TriangleMesh;
use crate::patterns::{BoardScaling, CalibBoardSpec};

/// Rigid placement, either as an explicit world-to-device matrix or as a
/// viewing direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoseConfig {
    Matrix { r: [f64; 9], t: [f64; 3] },
    LookAt { eye: [f64; 3], target: [f64; 3], up: [f64; 3] },
}

impl PoseConfig {
    /// World-to-device transform with translations in millimetres.
    pub fn device_pose(&self, unit: LengthUnit) -> Result<RigidPose, RenderError> {
        let mm = |v: [f64; 3]| Vector3::from(v.map(|c| unit.to_mm(c)));
        match self {
            PoseConfig::Matrix { r, t } => RigidPose::new(Matrix3::from_row_slice(r), mm(*t)),
            PoseConfig::LookAt { eye, target, up } => RigidPose::look_at(mm(*eye), mm(*target), Vector3::from(*up)),
        }
        .map_err(|e| RenderError::InvalidScene(format!("pose: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaterialConfig {
    Preset(MaterialPreset),
    Explicit(Material),
}

impl Default for MaterialConfig {
    fn default() -> Self {
        MaterialConfig::Preset(MaterialPreset::Baseline)
    }
}

impl MaterialConfig {
    pub fn material(&self) -> Material {
        match self {
            MaterialConfig::Preset(p) => p.material(),
            MaterialConfig::Explicit(m) => *m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureConfig {
    /// Generated circle-grid board; the plane rectangle is taken from the
    /// board's metric report and the plane pose places the board frame.
    Board { spec: CalibBoardSpec, #[serde(default)] scaling: BoardScaling },
    /// Image file (PGM or PNG), relative paths resolve against the scene file.
    File(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ObjectConfig {
    Sphere {
        center: [f64; 3],
        radius: f64,
        #[serde(default)]
        material: MaterialConfig,
    },
    /// Plane placed by `pose`, interpreted here as plane-to-world.
    Plane {
        pose: PoseConfig,
        #[serde(default)]
        min: Option<[f64; 2]>,
        #[serde(default)]
        size: Option<[f64; 2]>,
        #[serde(default)]
        texture: Option<TextureConfig>,
        #[serde(default)]
        material: MaterialConfig,
    },
    Mesh {
        ply: String,
        #[serde(default)]
        material: MaterialConfig,
    },
    Icosphere {
        center: [f64; 3],
        radius: f64,
        subdivisions: u32,
        #[serde(default)]
        material: MaterialConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AmbientConfig {
    UniformSky {
        intensity: f64,
        #[serde(default = "one")]
        color: f64,
    },
    RectPanel {
        center: [f64; 3],
        target: [f64; 3],
        width: f64,
        height: f64,
        #[serde(default = "four")]
        samples_per_side: u32,
        intensity: f64,
    },
    /// One of the stock lighting tiers.
    Tier { tier: LightingTier },
}

fn one() -> f64 {
    1.0
}

fn four() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub intrinsics: Intrinsics,
    pub pose: PoseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub intrinsics: Intrinsics,
    pub pose: PoseConfig,
    #[serde(default = "default_intensity")]
    pub intensity: f64,
    #[serde(default)]
    pub falloff: Falloff,
}

fn default_intensity() -> f64 {
    super::scenes::DEFAULT_PROJECTOR_INTENSITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    #[serde(default = "mm")]
    pub unit: LengthUnit,
    /// Defaults to the stock square camera at this width when `camera` is absent.
    #[serde(default)]
    pub camera_width: Option<u32>,
    #[serde(default)]
    pub camera: Option<CameraConfig>,
    #[serde(default)]
    pub projector: Option<ProjectorConfig>,
    #[serde(default)]
    pub ambients: Vec<AmbientConfig>,
    pub objects: Vec<ObjectConfig>,
    #[serde(default = "one_u32")]
    pub supersampling: u32,
}

fn mm() -> LengthUnit {
    LengthUnit::Mm
}

fn one_u32() -> u32 {
    1
}

impl SceneConfig {
    pub fn load(path: &Path) -> Result<Self, RenderError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| RenderError::InvalidScene(format!("{}: {e}", path.display())))
    }

    /// Builds the runtime scene; `base_dir` resolves relative file paths.
    pub fn build(&self, base_dir: &Path) -> Result<Scene, RenderError> {
        let u = self.unit;
        let mm3 = |v: [f64; 3]| Vector3::from(v.map(|c| u.to_mm(c)));
        let camera = match &self.camera {
            Some(c) => Camera { intrinsics: c.intrinsics, pose: c.pose.device_pose(u)? },
            None => default_camera(self.camera_width.unwrap_or(480)),
        };
        let projector = match &self.projector {
            Some(p) => ProjectorLight {
                intrinsics: p.intrinsics,
                pose: p.pose.device_pose(u)?,
                texture: None,
                intensity: p.intensity,
                falloff: p.falloff,
            },
            None => default_projector(),
        };
        let mut ambients = Vec::new();
        for a in &self.ambients {
            match a {
                AmbientConfig::UniformSky { intensity, color } => {
                    ambients.push(AmbientLight { kind: AmbientKind::UniformSky, intensity: *intensity, color: *color })
                }
                AmbientConfig::RectPanel { center, target, width, height, samples_per_side, intensity } => ambients.push(
                    AmbientLight::panel(mm3(*center), mm3(*target), u.to_mm(*width), u.to_mm(*height), *samples_per_side, *intensity)?,
                ),
                AmbientConfig::Tier { tier } => ambients.extend(tier.ambients()),
            }
        }
        let mut objects = Vec::new();
        for o in &self.objects {
            objects.push(match o {
                ObjectConfig::Sphere { center, radius, material } => SceneObject {
                    geometry: Geometry::Sphere { center: mm3(*center), radius: u.to_mm(*radius) },
                    material: material.material(),
                },
                ObjectConfig::Icosphere { center, radius, subdivisions, material } => SceneObject {
                    geometry: Geometry::mesh(TriangleMesh::icosphere(mm3(*center), u.to_mm(*radius), *subdivisions)),
                    material: material.material(),
                },
                ObjectConfig::Mesh { ply, material } => {
                    let data = read_ply(&base_dir.join(ply)).map_err(|e| RenderError::InvalidScene(e.to_string()))?;
                    let vertices = data.points.iter().map(|p| p.map(|c| u.to_mm(c))).collect();
                    let mesh = TriangleMesh::new(vertices, data.faces, 0.0)
                        .map_err(|e| RenderError::InvalidScene(format!("{ply}: {e}")))?;
                    SceneObject { geometry: Geometry::mesh(mesh), material: material.material() }
                }
                ObjectConfig::Plane { pose, min, size, texture, material } => {
                    let to_world = pose.device_pose(u)?;
                    let patch = match texture {
                        Some(TextureConfig::Board { spec, scaling }) => {
                            let board = BoardObject::new(spec, *scaling)?;
                            PlanePatch { to_world, ..board.patch }
                        }
                        Some(TextureConfig::File(f)) => {
                            let img = GrayImage16::read(base_dir.join(f))?;
                            plane_rect(to_world, *min, *size, Some(Arc::new(img)), u)?
                        }
                        None => plane_rect(to_world, *min, *size, None, u)?,
                    };
                    SceneObject { geometry: Geometry::Plane(patch), material: material.material() }
                }
            });
        }
        let scene = Scene { camera, projector, ambients, objects, supersampling: self.supersampling };
        scene.validate()?;
        Ok(scene)
    }
}

fn plane_rect(
    to_world: RigidPose,
    min: Option<[f64; 2]>,
    size: Option<[f64; 2]>,
    texture: Option<Arc<GrayImage16>>,
    u: LengthUnit,
) -> Result<PlanePatch, RenderError> {
    let size = size.ok_or_else(|| RenderError::InvalidScene("plane without a texture needs 'size'".into()))?;
    let size = Vector2::new(u.to_mm(size[0]), u.to_mm(size[1]));
    let min = min.map_or(-size / 2.0, |m| Vector2::new(u.to_mm(m[0]), u.to_mm(m[1])));
    Ok(PlanePatch { to_world, min, size, texture })
}
