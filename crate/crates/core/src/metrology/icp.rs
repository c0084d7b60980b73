//! Point-to-point rigid registration.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kdtree::KdTree;
use super::MetrologyError;
use crate::geometry::RigidPose;
use crate::mesh::TriangleMesh;
use crate::recon::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop when the RMS changes by less than this between iterations (mm).
    pub tolerance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig { max_iterations: 100, tolerance: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source coordinates into the target frame.
    pub pose: RigidPose,
    pub transformed: PointCloud,
    pub rms: f64,
    /// RMS of the nearest-neighbour residuals at the start of every iteration
    /// and after the final update.
    pub rms_history: Vec<f64>,
    pub iterations: usize,
}

/// Best rigid transform (no scale) taking `src[i]` onto `dst[i]`.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<RigidPose, MetrologyError> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(MetrologyError::DegenerateCorrespondences("empty or unequal point sets".into()));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let h: Matrix3<f64> = src.iter().zip(dst).map(|(s, d)| (s - cs) * (d - cd).transpose()).sum();
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(MetrologyError::DegenerateCorrespondences("SVD failed".into())),
    };
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    // A planar configuration (rank 2) still fixes the rotation; collinear
    // or coincident points do not.
    if !(s[0] > 0.0) || s[1] <= 1e-12 * s[0] {
        return Err(MetrologyError::DegenerateCorrespondences(format!("cross-covariance singular values {s:?}")));
    }
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    RigidPose::from_approximate_rotation(r, cd - r * cs).map(|(p, _)| p).map_err(|e| MetrologyError::DegenerateCorrespondences(e.to_string()))
}

fn check_spread(points: &[Vector3<f64>], what: &str) -> Result<(), MetrologyError> {
    if points.len() < 3 {
        return Err(MetrologyError::DegenerateCorrespondences(format!("{what} has fewer than 3 points")));
    }
    let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let cov: Matrix3<f64> = points.iter().map(|p| (p - c) * (p - c).transpose()).sum();
    let mut s: Vec<f64> = cov.symmetric_eigenvalues().iter().map(|x| x.abs()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if !(s[0] > 0.0) || s[1] <= 1e-12 * s[0] {
        return Err(MetrologyError::DegenerateCorrespondences(format!("{what} points are collinear")));
    }
    Ok(())
}

/// Registration target; meshes are reduced to their vertices.
pub enum IcpTarget<'a> {
    Cloud(&'a PointCloud),
    Mesh(&'a TriangleMesh),
}

impl IcpTarget<'_> {
    fn points(&self) -> &[Vector3<f64>] {
        match self {
            IcpTarget::Cloud(c) => &c.points,
            IcpTarget::Mesh(m) => &m.vertices,
        }
    }
}

/// Iterative closest point starting from `initial`.
pub fn icp_register(source: &PointCloud, target: IcpTarget, initial: RigidPose, cfg: &IcpConfig) -> Result<IcpResult, MetrologyError> {
    if source.is_empty() {
        return Err(MetrologyError::EmptyInput("source cloud"));
    }
    let target_pts = target.points();
    check_spread(target_pts, "target")?;
    let tree = KdTree::build(target_pts);
    let match_all = |pose: &RigidPose| -> (Vec<Vector3<f64>>, f64) {
        let pairs: Vec<(Vector3<f64>, f64)> = source
            .points
            .par_iter()
            .map(|p| {
                let (i, d) = tree.nearest(&pose.transform_point(p)).expect("non-empty target");
                (*tree.point(i), d)
            })
            .collect();
        let rms = (pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64).sqrt();
        (pairs.into_iter().map(|p| p.0).collect(), rms)
    };
    let mut pose = initial;
    let (mut matched, mut rms) = match_all(&pose);
    let mut history = vec![rms];
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let candidate = kabsch(&source.points, &matched)?;
        let (m, r) = match_all(&candidate);
        // The update cannot increase the residual to the old matches, and
        // re-matching can only lower it further; guard against round-off.
        if r > rms {
            break;
        }
        let change = rms - r;
        pose = candidate;
        matched = m;
        rms = r;
        history.push(rms);
        if change < cfg.tolerance {
            break;
        }
    }
    Ok(IcpResult { pose, transformed: source.transformed(&pose), rms, rms_history: history, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bumpy_cloud(n: usize, seed: u64) -> PointCloud {
        // Asymmetric blob so the registration has a unique optimum.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    let (a, b): (f64, f64) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(-1.0..1.0));
                    let r = 50.0 + 8.0 * (3.0 * a).sin() * b + 5.0 * b * b;
                    let s = (1.0 - b * b).sqrt();
                    Vector3::new(1.3 * r * s * a.cos(), r * s * a.sin(), 0.8 * r * b)
                })
                .collect(),
        )
    }

    #[test]
    fn identical_clouds_register_to_identity() {
        let c = bumpy_cloud(500, 1);
        let res = icp_register(&c, IcpTarget::Cloud(&c), RigidPose::identity(), &IcpConfig::default()).unwrap();
        assert_eq!(res.rms, 0.0);
        assert_eq!(res.pose.rotation_angle_to(&RigidPose::identity()), 0.0);
    }

    #[test]
    fn recovers_known_transform() {
        let target = bumpy_cloud(3000, 2);
        let truth = RigidPose::new(exp_so3(&(Vector3::new(0.3, -0.5, 0.8).normalize() * 10f64.to_radians())), Vector3::new(12.0, -10.0, 12.0)).unwrap();
        let source = target.transformed(&truth.inverse());
        let res = icp_register(&source, IcpTarget::Cloud(&target), RigidPose::identity(), &IcpConfig::default()).unwrap();
        assert!(res.pose.rotation_angle_to(&truth).to_degrees() < 0.1);
        assert!((res.pose.translation() - truth.translation()).norm() < 0.1);
        assert!(res.rms_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn collinear_target_is_degenerate() {
        let line = PointCloud::new(vec![Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0), Vector3::new(2.0, 2.0, 2.0)]);
        assert!(matches!(
            icp_register(&line, IcpTarget::Cloud(&line), RigidPose::identity(), &IcpConfig::default()),
            Err(MetrologyError::DegenerateCorrespondences(_))
        ));
    }

    #[test]
    fn kabsch_accepts_planar_sets() {
        let src = vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::new(1.0, 1.0, 0.0)];
        let pose = RigidPose::from_axis_angle(Vector3::new(0.0, 0.0, 0.4), Vector3::new(1.0, 2.0, 3.0));
        let dst: Vec<_> = src.iter().map(|p| pose.transform_point(p)).collect();
        let est = kabsch(&src, &dst).unwrap();
        assert!(est.rotation_angle_to(&pose) < 1e-12);
    }
}
