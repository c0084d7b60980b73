//! Deterministic single-bounce ray caster.
//!
//! The camera is a pinhole; the projector is a pinhole light whose image is
//! looked up bilinearly at the projection of each shaded point, with a
//! shadow ray towards its optical centre. Ambient light comes from a
//! uniform sky term and from sampled rectangular panels.

pub mod capture;
pub mod config;
pub mod scenes;

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pixel_ray, Intrinsics, Ray, RigidPose};
use crate::image::{rescale, GrayImage16};
use crate::mesh::{Bvh, TriangleMesh};

/// Rays only count hits beyond this distance (mm).
pub const RAY_EPSILON: f64 = 1e-6;
/// Shadow rays start this far off the surface (mm).
const SHADOW_OFFSET: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: f64,
    pub roughness: f64,
    pub specular: f64,
    #[serde(default)]
    pub metallic: f64,
    #[serde(default)]
    pub ao_to_diffuse: f64,
}

impl Material {
    /// Rough plastic-like default surface.
    pub fn baseline() -> Self {
        Material { albedo: 0.8, roughness: 0.95, specular: 0.15, metallic: 0.0, ao_to_diffuse: 0.95 }
    }

    /// Baseline with the ambient-occlusion weighting switched off.
    pub fn ao_disabled() -> Self {
        Material { ao_to_diffuse: 0.0, ..Self::baseline() }
    }

    pub fn metallic() -> Self {
        Material { albedo: 0.8, roughness: 0.2, specular: 0.15, metallic: 1.0, ao_to_diffuse: 0.95 }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let fields = [self.albedo, self.roughness, self.specular, self.metallic, self.ao_to_diffuse];
        if fields.iter().all(|v| (0.0..=1.0).contains(v)) {
            Ok(())
        } else {
            Err(RenderError::InvalidScene(format!("material fields must lie in [0, 1]: {self:?}")))
        }
    }

    /// Blinn-Phong exponent derived from roughness.
    pub fn exponent(&self) -> f64 {
        2.0 / self.roughness.max(1e-3).powi(4) - 2.0
    }

    /// Weight applied to every ambient contribution.
    pub fn ambient_weight(&self) -> f64 {
        1.0 - 0.5 * self.ao_to_diffuse
    }

    /// Reflected fraction for light arriving along `l` and leaving along
    /// `v`, including the `n·l` foreshortening. `albedo` is the textured
    /// albedo at the shading point.
    pub fn brdf(&self, albedo: f64, n: &Vector3<f64>, l: &Vector3<f64>, v: &Vector3<f64>) -> f64 {
        let nl = n.dot(l);
        if nl <= 0.0 {
            return 0.0;
        }
        let nh = match (l + v).try_normalize(1e-12) {
            Some(h) => n.dot(&h).max(0.0),
            None => 0.0,
        };
        let e = self.exponent();
        let lobe = nh.powf(e);
        let m = self.metallic;
        let dielectric = (1.0 - m) * albedo * nl + self.specular * lobe;
        let metal = albedo * (e + 8.0) / 8.0 * lobe * nl;
        (1.0 - m) * dielectric + m * metal
    }
}

/// Plane patch: a rectangle in the local `z = 0` plane, placed in the world
/// by `to_world` (`X_world = R X_local + t`). An optional texture spans the
/// rectangle and scales the albedo.
#[derive(Debug, Clone)]
pub struct PlanePatch {
    pub to_world: RigidPose,
    pub min: Vector2<f64>,
    pub size: Vector2<f64>,
    pub texture: Option<Arc<GrayImage16>>,
}

#[derive(Debug, Clone)]
pub enum Geometry {
    Sphere { center: Vector3<f64>, radius: f64 },
    Plane(PlanePatch),
    Mesh { mesh: Arc<TriangleMesh>, bvh: Arc<Bvh> },
}

impl Geometry {
    pub fn mesh(mesh: TriangleMesh) -> Geometry {
        let bvh = Bvh::build(&mesh);
        Geometry::Mesh { mesh: Arc::new(mesh), bvh: Arc::new(bvh) }
    }
}

#[derive(Debug, Clone)]
pub struct SceneObject {
    pub geometry: Geometry,
    pub material: Material,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Falloff {
    #[default]
    None,
    /// `(reference_mm / d)^2` scaling with distance `d` from the projector centre.
    InverseSquare { reference_mm: f64 },
}

#[derive(Debug, Clone)]
pub struct ProjectorLight {
    pub intrinsics: Intrinsics,
    /// World-to-projector transform.
    pub pose: RigidPose,
    /// Image used when a frame is rendered without an explicit pattern.
    pub texture: Option<Arc<GrayImage16>>,
    pub intensity: f64,
    pub falloff: Falloff,
}

#[derive(Debug, Clone)]
pub enum AmbientKind {
    UniformSky,
    /// Rectangle centred on the local origin in the local `z = 0` plane,
    /// emitting towards local `+z`; sampled on a stratified grid of
    /// `samples_per_side²` points.
    RectPanel { to_world: RigidPose, width: f64, height: f64, samples_per_side: u32 },
}

#[derive(Debug, Clone)]
pub struct AmbientLight {
    pub kind: AmbientKind,
    pub intensity: f64,
    pub color: f64,
}

impl AmbientLight {
    pub fn sky(intensity: f64) -> Self {
        AmbientLight { kind: AmbientKind::UniformSky, intensity, color: 1.0 }
    }

    /// Panel centred at `center` emitting towards `target`.
    pub fn panel(center: Vector3<f64>, target: Vector3<f64>, width: f64, height: f64, samples_per_side: u32, intensity: f64) -> Result<Self, RenderError> {
        let up = if (target - center).normalize().y.abs() > 0.9 { Vector3::z() } else { -Vector3::y() };
        let device = RigidPose::look_at(center, target, up)
            .map_err(|e| RenderError::InvalidScene(format!("panel orientation: {e}")))?;
        Ok(AmbientLight {
            kind: AmbientKind::RectPanel { to_world: device.inverse(), width, height, samples_per_side },
            intensity,
            color: 1.0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// World-to-camera transform.
    pub pose: RigidPose,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub camera: Camera,
    pub projector: ProjectorLight,
    pub ambients: Vec<AmbientLight>,
    pub objects: Vec<SceneObject>,
    /// Camera rays per pixel along each axis.
    pub supersampling: u32,
}

impl Scene {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.objects.is_empty() {
            return Err(RenderError::InvalidScene("scene has no objects".into()));
        }
        if self.supersampling == 0 {
            return Err(RenderError::InvalidScene("supersampling must be >= 1".into()));
        }
        for o in &self.objects {
            o.material.validate()?;
            match &o.geometry {
                Geometry::Sphere { radius, .. } if !(*radius > 0.0) => {
                    return Err(RenderError::InvalidScene(format!("sphere radius {radius} must be positive")))
                }
                Geometry::Plane(p) if !(p.size.x > 0.0 && p.size.y > 0.0) => {
                    return Err(RenderError::InvalidScene("plane extents must be positive".into()))
                }
                _ => {}
            }
        }
        for a in &self.ambients {
            if !(a.intensity >= 0.0 && a.color >= 0.0) {
                return Err(RenderError::InvalidScene("ambient intensity must be non-negative".into()));
            }
            if let AmbientKind::RectPanel { samples_per_side: 0, .. } = a.kind {
                return Err(RenderError::InvalidScene("rect panel needs at least one sample".into()));
            }
        }
        if let Some(t) = &self.projector.texture {
            self.check_pattern(t)?;
        }
        if !(self.projector.intensity >= 0.0) {
            return Err(RenderError::InvalidScene("projector intensity must be non-negative".into()));
        }
        Ok(())
    }

    fn check_pattern(&self, pattern: &GrayImage16) -> Result<(), RenderError> {
        let k = &self.projector.intrinsics;
        if (pattern.width(), pattern.height()) != (k.width, k.height) {
            return Err(RenderError::DimensionMismatch(format!(
                "pattern is {}x{}, projector is {}x{}",
                pattern.width(),
                pattern.height(),
                k.width,
                k.height
            )));
        }
        Ok(())
    }
}

/// Nearest intersection along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    /// Unit normal on the side the ray came from.
    pub normal: Vector3<f64>,
    pub object: usize,
    /// Texture pixel coordinates for textured planes.
    pub uv: Option<Vector2<f64>>,
}

fn facing(n: Vector3<f64>, dir: &Vector3<f64>) -> Vector3<f64> {
    if n.dot(dir) > 0.0 {
        -n
    } else {
        n
    }
}

fn intersect_object(ray: &Ray, geometry: &Geometry, t_max: f64) -> Option<(f64, Vector3<f64>, Option<Vector2<f64>>)> {
    match geometry {
        Geometry::Sphere { center, radius } => {
            let oc = ray.origin - center;
            let b = oc.dot(&ray.direction);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            // Numerically stable pair of roots.
            let q = if b > 0.0 { -b - sq } else { -b + sq };
            let (mut t0, mut t1) = (q, if q != 0.0 { c / q } else { -b });
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            let t = if t0 > RAY_EPSILON { t0 } else { t1 };
            if t <= RAY_EPSILON || t > t_max {
                return None;
            }
            let n = (ray.at(t) - center) / *radius;
            Some((t, n, None))
        }
        Geometry::Plane(p) => {
            let r = p.to_world.rotation();
            let n = r.column(2).into_owned();
            let denom = n.dot(&ray.direction);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = n.dot(&(p.to_world.translation() - ray.origin)) / denom;
            if t <= RAY_EPSILON || t > t_max {
                return None;
            }
            let local = r.transpose() * (ray.at(t) - p.to_world.translation());
            let (sx, sy) = ((local.x - p.min.x) / p.size.x, (local.y - p.min.y) / p.size.y);
            if !((0.0..=1.0).contains(&sx) && (0.0..=1.0).contains(&sy)) {
                return None;
            }
            let uv = p
                .texture
                .as_ref()
                .map(|tex| Vector2::new(sx * tex.width() as f64 - 0.5, sy * tex.height() as f64 - 0.5));
            Some((t, n, uv))
        }
        Geometry::Mesh { mesh, bvh } => {
            let (t, face, _, _) = bvh.intersect(mesh, ray, RAY_EPSILON, t_max)?;
            Some((t, mesh.face_normal(face), None))
        }
    }
}

/// Nearest hit beyond [`RAY_EPSILON`]; ties go to the lower object index.
pub fn intersect_scene(ray: &Ray, scene: &Scene) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, o) in scene.objects.iter().enumerate() {
        let limit = best.map_or(f64::INFINITY, |b| b.t);
        if let Some((t, n, uv)) = intersect_object(ray, &o.geometry, limit) {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, point: ray.at(t), normal: facing(n, &ray.direction), object: i, uv });
            }
        }
    }
    best
}

/// True when something blocks the segment from `from` to `to`.
pub fn occluded(scene: &Scene, from: &Vector3<f64>, to: &Vector3<f64>) -> bool {
    let Some(ray) = Ray::new(*from, to - from) else { return false };
    let dist = (to - from).norm() - RAY_EPSILON;
    scene.objects.iter().any(|o| intersect_object(&ray, &o.geometry, dist).is_some())
}

/// Shading terms of one camera sample that do not depend on the projected
/// pattern. Radiance is `ambient + weight · pattern(up, vp) / 65535`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SampleShade {
    ambient: f64,
    weight: f64,
    up: f64,
    vp: f64,
}

const DARK: SampleShade = SampleShade { ambient: 0.0, weight: 0.0, up: 0.0, vp: 0.0 };

fn albedo_at(scene: &Scene, hit: &Hit) -> f64 {
    let obj = &scene.objects[hit.object];
    let tex = match (&obj.geometry, hit.uv) {
        (Geometry::Plane(PlanePatch { texture: Some(t), .. }), Some(uv)) => t.bilinear(uv.x, uv.y) / 65535.0,
        _ => 1.0,
    };
    obj.material.albedo * tex
}

fn ambient_radiance(scene: &Scene, hit: &Hit, albedo: f64, view: &Vector3<f64>) -> f64 {
    let mat = &scene.objects[hit.object].material;
    let origin = hit.point + hit.normal * SHADOW_OFFSET;
    let mut total = 0.0;
    for light in &scene.ambients {
        let scale = light.intensity * light.color;
        match &light.kind {
            AmbientKind::UniformSky => total += scale * albedo,
            AmbientKind::RectPanel { to_world, width, height, samples_per_side } => {
                let s = *samples_per_side;
                let r = to_world.rotation();
                let (ax, ay, emit) = (r.column(0).into_owned(), r.column(1).into_owned(), r.column(2).into_owned());
                let d_area = width * height / (s * s) as f64;
                for iy in 0..s {
                    for ix in 0..s {
                        let lx = ((ix as f64 + 0.5) / s as f64 - 0.5) * width;
                        let ly = ((iy as f64 + 0.5) / s as f64 - 0.5) * height;
                        let q = to_world.translation() + ax * lx + ay * ly;
                        let to_q = q - hit.point;
                        let d2 = to_q.norm_squared();
                        let l = to_q / d2.sqrt();
                        let cos_emit = -emit.dot(&l);
                        if cos_emit <= 0.0 || hit.normal.dot(&l) <= 0.0 {
                            continue;
                        }
                        if occluded(scene, &origin, &q) {
                            continue;
                        }
                        total += scale * mat.brdf(albedo, &hit.normal, &l, view) * cos_emit * d_area / (PI * d2);
                    }
                }
            }
        }
    }
    total * mat.ambient_weight()
}

fn shade_sample(scene: &Scene, ray: &Ray) -> SampleShade {
    let Some(hit) = intersect_scene(ray, scene) else { return DARK };
    let mat = &scene.objects[hit.object].material;
    let albedo = albedo_at(scene, &hit);
    let view = -ray.direction;
    let ambient = ambient_radiance(scene, &hit, albedo, &view);

    let proj = &scene.projector;
    let k = &proj.intrinsics;
    let xp = proj.pose.transform_point(&hit.point);
    if xp.z <= 0.0 {
        return SampleShade { ambient, ..DARK };
    }
    let up = k.fx * xp.x / xp.z + k.ox;
    let vp = k.fy * xp.y / xp.z + k.oy;
    let inside = (-0.5..=k.width as f64 - 0.5).contains(&up) && (-0.5..=k.height as f64 - 0.5).contains(&vp);
    if !inside {
        return SampleShade { ambient, ..DARK };
    }
    let center = proj.pose.center();
    let to_light = center - hit.point;
    let dist = to_light.norm();
    let l = to_light / dist;
    if hit.normal.dot(&l) <= 0.0 || occluded(scene, &(hit.point + hit.normal * SHADOW_OFFSET), &center) {
        return SampleShade { ambient, ..DARK };
    }
    let falloff = match proj.falloff {
        Falloff::None => 1.0,
        Falloff::InverseSquare { reference_mm } => (reference_mm / dist).powi(2),
    };
    let weight = proj.intensity * falloff * mat.brdf(albedo, &hit.normal, &l, &view);
    SampleShade { ambient, weight, up, vp }
}

/// Pattern-independent shading of every camera sample. Rendering many
/// patterns from one view only repeats the cheap texture lookups.
#[derive(Debug, Clone)]
pub struct PreparedView {
    width: u32,
    height: u32,
    ss: u32,
    samples: Vec<SampleShade>,
    projector_dims: (u32, u32),
    default_texture: Option<Arc<GrayImage16>>,
}

fn sample_offsets(ss: u32) -> Vec<f64> {
    (0..ss).map(|i| (i as f64 + 0.5) / ss as f64 - 0.5).collect()
}

pub fn prepare_view(scene: &Scene) -> Result<PreparedView, RenderError> {
    scene.validate()?;
    let k = &scene.camera.intrinsics;
    let ss = scene.supersampling;
    let offsets = sample_offsets(ss);
    let per_pixel = (ss * ss) as usize;
    let rows: Vec<Vec<SampleShade>> = (0..k.height)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(k.width as usize * per_pixel);
            for x in 0..k.width {
                for dy in &offsets {
                    for dx in &offsets {
                        let ray = pixel_ray(k, &scene.camera.pose, x as f64 + dx, y as f64 + dy);
                        row.push(shade_sample(scene, &ray));
                    }
                }
            }
            row
        })
        .collect();
    Ok(PreparedView {
        width: k.width,
        height: k.height,
        ss,
        samples: rows.concat(),
        projector_dims: (scene.projector.intrinsics.width, scene.projector.intrinsics.height),
        default_texture: scene.projector.texture.clone(),
    })
}

impl PreparedView {
    pub fn render(&self, pattern: Option<&GrayImage16>) -> Result<GrayImage16, RenderError> {
        let pattern = pattern.or(self.default_texture.as_deref());
        if let Some(p) = pattern {
            if (p.width(), p.height()) != self.projector_dims {
                return Err(RenderError::DimensionMismatch(format!(
                    "pattern is {}x{}, projector is {}x{}",
                    p.width(),
                    p.height(),
                    self.projector_dims.0,
                    self.projector_dims.1
                )));
            }
        }
        let per_pixel = (self.ss * self.ss) as usize;
        let data: Vec<u16> = self
            .samples
            .par_chunks(per_pixel)
            .map(|px| {
                let sum: f64 = px
                    .iter()
                    .map(|s| {
                        let tex = match pattern {
                            Some(p) if s.weight > 0.0 => p.bilinear(s.up, s.vp) / 65535.0,
                            _ => 0.0,
                        };
                        s.ambient + s.weight * tex
                    })
                    .sum();
                rescale(65535.0 * sum / per_pixel as f64)
            })
            .collect();
        Ok(GrayImage16::from_vec(self.width, self.height, data).expect("size matches"))
    }
}

/// Renders one camera frame with `pattern` on the projector (or the
/// projector's own texture when `None`; no texture means it is dark).
pub fn render_frame(scene: &Scene, pattern: Option<&GrayImage16>) -> Result<GrayImage16, RenderError> {
    if let Some(p) = pattern {
        scene.check_pattern(p)?;
    }
    prepare_view(scene)?.render(pattern)
}

/// Index of the object seen through each pixel centre.
pub fn render_object_ids(scene: &Scene) -> Vec<Option<usize>> {
    let k = &scene.camera.intrinsics;
    (0..k.height)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..k.width).map(move |x| {
                intersect_scene(&pixel_ray(k, &scene.camera.pose, x as f64, y as f64), scene).map(|h| h.object)
            })
        })
        .collect()
}
