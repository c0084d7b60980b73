//! Triangle meshes and a bounding-volume hierarchy for ray casting and
//! nearest-triangle queries.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Ray;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("face {face} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange { face: usize, index: u32, count: usize },
    #[error("face {0} is degenerate (zero area)")]
    DegenerateFace(usize),
    #[error("mesh has no faces")]
    Empty,
    #[error("vertex {0} is not finite")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    /// Validates indices and rejects faces whose area is below
    /// `area_tol` (mm²).
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[u32; 3]>, area_tol: f64) -> Result<Self, MeshError> {
        if faces.is_empty() {
            return Err(MeshError::Empty);
        }
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(MeshError::NonFinite(i));
        }
        for (fi, f) in faces.iter().enumerate() {
            for &index in f {
                if index as usize >= vertices.len() {
                    return Err(MeshError::IndexOutOfRange { face: fi, index, count: vertices.len() });
                }
            }
        }
        let mesh = TriangleMesh { vertices, faces };
        if let Some(fi) = (0..mesh.faces.len()).find(|&fi| mesh.face_area(fi) <= area_tol) {
            return Err(MeshError::DegenerateFace(fi));
        }
        Ok(mesh)
    }

    pub fn triangle(&self, face: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.triangle(face);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn face_normal(&self, face: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a)).normalize()
    }

    /// Geodesic sphere built by subdividing an icosahedron; faces wind
    /// counter-clockwise seen from outside.
    pub fn icosphere(center: Vector3<f64>, radius: f64, subdivisions: u32) -> TriangleMesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vector3<f64>> = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoints = std::collections::HashMap::new();
            let mut mid = |a: u32, b: u32, verts: &mut Vec<Vector3<f64>>| -> u32 {
                *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    verts.push(((verts[a as usize] + verts[b as usize]) / 2.0).normalize());
                    verts.len() as u32 - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut verts);
                let bc = mid(b, c, &mut verts);
                let ca = mid(c, a, &mut verts);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        TriangleMesh { vertices: verts.into_iter().map(|v| center + v * radius).collect(), faces }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb { min: Vector3::repeat(f64::INFINITY), max: Vector3::repeat(f64::NEG_INFINITY) }
    }

    pub fn grow(&mut self, p: &Vector3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&self, o: &Aabb) -> Aabb {
        Aabb { min: self.min.inf(&o.min), max: self.max.sup(&o.max) }
    }

    /// Slab test; returns the entry distance if the ray meets the box
    /// before `t_max`.
    pub fn hit(&self, origin: &Vector3<f64>, inv_dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let mut near = (self.min[a] - origin[a]) * inv_dir[a];
            let mut far = (self.max[a] - origin[a]) * inv_dir[a];
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            // NaN (0 * inf) leaves the bound untouched.
            if near > t0 {
                t0 = near;
            }
            if far < t1 {
                t1 = far;
            }
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }

    /// Squared distance from a point to the box (zero inside).
    pub fn distance_sq(&self, p: &Vector3<f64>) -> f64 {
        let d = (self.min - p).sup(&Vector3::zeros()).sup(&(p - self.max));
        d.norm_squared()
    }
}

/// Möller–Trumbore ray/triangle test. Returns `(t, b1, b2)`.
pub fn ray_triangle(ray: &Ray, tri: &[Vector3<f64>; 3]) -> Option<(f64, f64, f64)> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = ray.direction.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 * e1.norm() * e2.norm() {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - tri[0];
    let b1 = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&b1) {
        return None;
    }
    let q = s.cross(&e1);
    let b2 = ray.direction.dot(&q) * inv;
    if b2 < 0.0 || b1 + b2 > 1.0 {
        return None;
    }
    Some((e2.dot(&q) * inv, b1, b2))
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bounds: Aabb, start: usize, len: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Median-split BVH over the faces of a mesh. Queries return the same
/// results as an exhaustive scan over all faces.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    /// Face indices, permuted so every leaf owns a contiguous range.
    order: Vec<usize>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Bvh {
        let boxes: Vec<Aabb> = (0..mesh.faces.len())
            .map(|f| {
                let mut b = Aabb::empty();
                for v in mesh.triangle(f) {
                    b.grow(&v);
                }
                b
            })
            .collect();
        let centroids: Vec<Vector3<f64>> = boxes.iter().map(|b| (b.min + b.max) / 2.0).collect();
        let mut bvh = Bvh { nodes: Vec::new(), order: (0..mesh.faces.len()).collect() };
        if !bvh.order.is_empty() {
            bvh.build_node(&boxes, &centroids, 0, mesh.faces.len());
        }
        bvh
    }

    fn build_node(&mut self, boxes: &[Aabb], centroids: &[Vector3<f64>], start: usize, end: usize) -> usize {
        let bounds = self.order[start..end].iter().fold(Aabb::empty(), |acc, &f| acc.merge(&boxes[f]));
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { bounds, start, len: end - start });
            return id;
        }
        let mut cb = Aabb::empty();
        for &f in &self.order[start..end] {
            cb.grow(&centroids[f]);
        }
        let extent = cb.max - cb.min;
        let axis = extent.imax();
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
        });
        self.nodes.push(Node::Leaf { bounds, start: 0, len: 0 });
        let left = self.build_node(boxes, centroids, start, mid);
        let right = self.build_node(boxes, centroids, mid, end);
        self.nodes[id] = Node::Inner { bounds, left, right };
        id
    }

    /// Nearest ray hit with `t > t_min`; returns `(t, face, b1, b2)`.
    /// Ties are broken towards the lower face index, as in a linear scan.
    pub fn intersect(&self, mesh: &TriangleMesh, ray: &Ray, t_min: f64, t_max: f64) -> Option<(f64, usize, f64, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = ray.direction.map(|d| 1.0 / d);
        let mut best: Option<(f64, usize, f64, f64)> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let limit = best.map_or(t_max, |b| b.0);
            if self.nodes[n].bounds().hit(&ray.origin, &inv, limit).is_none() {
                continue;
            }
            match self.nodes[n] {
                Node::Leaf { start, len, .. } => {
                    for &f in &self.order[start..start + len] {
                        if let Some((t, b1, b2)) = ray_triangle(ray, &mesh.triangle(f)) {
                            if t > t_min && t <= t_max && better(t, f, best) {
                                best = Some((t, f, b1, b2));
                            }
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        best
    }

    /// Smallest `dist(face)` over all faces, pruned with box distance lower
    /// bounds. `dist` must return the squared distance from the query point
    /// `p` to a face. Ties go to the lower face index.
    pub fn nearest(&self, p: &Vector3<f64>, mut dist: impl FnMut(usize) -> f64) -> Option<(f64, usize)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<(f64, usize)> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let bound = self.nodes[n].bounds().distance_sq(p);
            if best.is_some_and(|b| bound > b.0) {
                continue;
            }
            match self.nodes[n] {
                Node::Leaf { start, len, .. } => {
                    for &f in &self.order[start..start + len] {
                        let d = dist(f);
                        if best.is_none_or(|b| d < b.0 || (d == b.0 && f < b.1)) {
                            best = Some((d, f));
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[left].bounds().distance_sq(p);
                    let dr = self.nodes[right].bounds().distance_sq(p);
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best
    }
}

fn better(t: f64, f: usize, best: Option<(f64, usize, f64, f64)>) -> bool {
    best.is_none_or(|b| t < b.0 || (t == b.0 && f < b.1))
}

/// Exhaustive nearest ray hit, the reference for [`Bvh::intersect`].
pub fn intersect_brute_force(mesh: &TriangleMesh, ray: &Ray, t_min: f64, t_max: f64) -> Option<(f64, usize, f64, f64)> {
    let mut best = None;
    for f in 0..mesh.faces.len() {
        if let Some((t, b1, b2)) = ray_triangle(ray, &mesh.triangle(f)) {
            if t > t_min && t <= t_max && better(t, f, best) {
                best = Some((t, f, b1, b2));
            }
        }
    }
    best
}
