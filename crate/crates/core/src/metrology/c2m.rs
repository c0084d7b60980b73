//! Unsigned cloud-to-mesh distances.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Histogram, MetrologyError};
use crate::mesh::{Bvh, TriangleMesh};
use crate::recon::PointCloud;

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

pub fn point_triangle_distance_sq(p: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> f64 {
    (closest_point_on_triangle(p, &tri[0], &tri[1], &tri[2]) - p).norm_squared()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C2MReport {
    pub distances: Vec<f64>,
    pub mean: f64,
    pub rms: f64,
    pub max: f64,
    pub histogram: Histogram,
}

impl C2MReport {
    pub fn from_distances(distances: Vec<f64>, bins: usize) -> C2MReport {
        let n = distances.len().max(1) as f64;
        let mean = distances.iter().sum::<f64>() / n;
        let rms = (distances.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
        let max = distances.iter().copied().fold(0.0, f64::max);
        let histogram = Histogram::build(&distances, 0.0, max, bins);
        C2MReport { distances, mean, rms, max, histogram }
    }
}

/// Exact minimum distance from every point to the mesh, found through a
/// bounding-volume hierarchy.
pub fn cloud_to_mesh(cloud: &PointCloud, mesh: &TriangleMesh, bins: usize) -> Result<C2MReport, MetrologyError> {
    if cloud.is_empty() {
        return Err(MetrologyError::EmptyInput("cloud"));
    }
    if mesh.faces.is_empty() {
        return Err(MetrologyError::EmptyInput("mesh"));
    }
    let bvh = Bvh::build(mesh);
    let distances = cloud
        .points
        .par_iter()
        .map(|p| {
            let (d2, _) = bvh.nearest(p, |f| point_triangle_distance_sq(p, &mesh.triangle(f))).expect("mesh has faces");
            d2.sqrt()
        })
        .collect();
    Ok(C2MReport::from_distances(distances, bins.max(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(p: &Vector3<f64>, mesh: &TriangleMesh) -> f64 {
        (0..mesh.faces.len()).map(|f| point_triangle_distance_sq(p, &mesh.triangle(f))).fold(f64::INFINITY, f64::min).sqrt()
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vector3::zeros(), Vector3::x(), Vector3::y());
        let cases = [
            (Vector3::new(0.2, 0.2, 1.0), Vector3::new(0.2, 0.2, 0.0)),
            (Vector3::new(-1.0, -1.0, 0.0), a),
            (Vector3::new(2.0, -0.1, 0.0), b),
            (Vector3::new(-0.1, 3.0, 0.0), c),
            (Vector3::new(0.5, -1.0, 0.5), Vector3::new(0.5, 0.0, 0.0)),
            (Vector3::new(-1.0, 0.5, 0.0), Vector3::new(0.0, 0.5, 0.0)),
            (Vector3::new(1.0, 1.0, 0.0), Vector3::new(0.5, 0.5, 0.0)),
        ];
        for (p, want) in cases {
            assert!((closest_point_on_triangle(&p, &a, &b, &c) - want).norm() < 1e-15, "{p:?}");
        }
    }

    #[test]
    fn on_mesh_and_offset_points() {
        let mesh = TriangleMesh::icosphere(Vector3::zeros(), 50.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut on = Vec::new();
        let mut off = Vec::new();
        for _ in 0..500 {
            let f = rng.random_range(0..mesh.faces.len());
            // Interior barycentric coordinates keep the offset point closest to its own face.
            let (u, v) = (rng.random_range(0.2..0.4), rng.random_range(0.2..0.4));
            let t = mesh.triangle(f);
            let p = t[0] + (t[1] - t[0]) * u + (t[2] - t[0]) * v;
            on.push(p);
            off.push(p + mesh.face_normal(f) * 0.25);
        }
        let r = cloud_to_mesh(&PointCloud::new(on), &mesh, 10).unwrap();
        assert!(r.max < 1e-9);
        let r = cloud_to_mesh(&PointCloud::new(off), &mesh, 10).unwrap();
        assert!((r.mean - 0.25).abs() < 1e-9, "mean {}", r.mean);
        assert_eq!(r.histogram.counts.iter().sum::<usize>(), 500);
    }

    #[test]
    fn equals_brute_force() {
        let mesh = TriangleMesh::icosphere(Vector3::new(1.0, 2.0, 3.0), 40.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<_> = (0..300).map(|_| Vector3::new(rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0))).collect();
        let r = cloud_to_mesh(&PointCloud::new(pts.clone()), &mesh, 5).unwrap();
        for (p, d) in pts.iter().zip(&r.distances) {
            assert_eq!(*d, brute(p, &mesh));
        }
    }
}
