//! Robust sphere fitting with M-estimator sample consensus.

use nalgebra::{Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MetrologyError;
use crate::recon::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsacConfig {
    /// Inlier band half-width τ in millimetres.
    pub inlier_threshold: f64,
    pub max_trials: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for MsacConfig {
    fn default() -> Self {
        MsacConfig { inlier_threshold: 1.0, max_trials: 2000, confidence: 0.99, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereFit {
    pub center: [f64; 3],
    pub radius: f64,
    pub inliers: usize,
    pub total: usize,
    pub inlier_threshold: f64,
    pub trials: usize,
}

impl SphereFit {
    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    pub fn inlier_fraction(&self) -> f64 {
        self.inliers as f64 / self.total as f64
    }
}

/// Largest acceptable condition number of the 4-point system.
const MAX_CONDITION: f64 = 1e8;
const BATCH: usize = 64;

/// Sphere through four points from `x²+y²+z² + Dx + Ey + Fz + G = 0`, or
/// `None` for near-coplanar samples.
pub fn sphere_from_four(p: [&Vector3<f64>; 4]) -> Option<(Vector3<f64>, f64)> {
    // Centre the sample so the condition number reflects its shape only.
    let c = (p[0] + p[1] + p[2] + p[3]) / 4.0;
    let scale = p.iter().map(|q| (*q - c).norm()).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    let q: Vec<Vector3<f64>> = p.iter().map(|x| (*x - c) / scale).collect();
    let a = Matrix4::from_fn(|i, j| if j < 3 { q[i][j] } else { 1.0 });
    let b = Vector4::from_fn(|i, _| -q[i].norm_squared());
    let sv = a.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0) || smax / smin > MAX_CONDITION {
        return None;
    }
    let x = a.lu().solve(&b)?;
    let center = -Vector3::new(x[0], x[1], x[2]) / 2.0;
    let r2 = center.norm_squared() - x[3];
    (r2 > 0.0).then(|| (center * scale + c, r2.sqrt() * scale))
}

fn msac_cost(points: &[Vector3<f64>], center: &Vector3<f64>, radius: f64, tau2: f64) -> f64 {
    points.iter().map(|p| ((p - center).norm() - radius).powi(2).min(tau2)).sum()
}

/// Least-squares sphere by Gauss–Newton on geometric distances.
pub fn refine_sphere(points: &[Vector3<f64>], mut center: Vector3<f64>, mut radius: f64) -> (Vector3<f64>, f64) {
    for _ in 0..100 {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for p in points {
            let d = p - center;
            let n = d.norm();
            if n == 0.0 {
                continue;
            }
            let j = Vector4::new(-d.x / n, -d.y / n, -d.z / n, -1.0);
            let r = n - radius;
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else { break };
        center += Vector3::new(step[0], step[1], step[2]);
        radius += step[3];
        if step.norm() < 1e-13 * (1.0 + radius.abs()) {
            break;
        }
    }
    (center, radius)
}

/// Robust sphere fit. Trials run in fixed-size parallel batches, each
/// drawing from its own ChaCha stream, so the result depends only on the
/// seed; the trial budget adapts to the best inlier fraction so far.
pub fn fit_sphere_msac(cloud: &PointCloud, cfg: &MsacConfig) -> Result<SphereFit, MetrologyError> {
    let pts = &cloud.points;
    let n = pts.len();
    if n < 4 {
        return Err(MetrologyError::TooFewPoints { needed: 4, got: n });
    }
    if !(cfg.inlier_threshold > 0.0) || cfg.max_trials == 0 || !(cfg.confidence > 0.0 && cfg.confidence < 1.0) {
        return Err(MetrologyError::InvalidConfig(format!("{cfg:?}")));
    }
    let tau = cfg.inlier_threshold;
    let tau2 = tau * tau;
    let mut best: Option<(f64, usize, Vector3<f64>, f64)> = None;
    let mut required = cfg.max_trials;
    let mut done = 0;
    while done < required.min(cfg.max_trials) {
        let end = (done + BATCH).min(cfg.max_trials);
        let results: Vec<Option<(f64, usize, Vector3<f64>, f64)>> = (done..end)
            .into_par_iter()
            .map(|trial| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(trial as u64);
                let mut idx = [0usize; 4];
                for k in 0..4 {
                    loop {
                        let i = rng.random_range(0..n);
                        if !idx[..k].contains(&i) {
                            idx[k] = i;
                            break;
                        }
                    }
                }
                let (c, r) = sphere_from_four([&pts[idx[0]], &pts[idx[1]], &pts[idx[2]], &pts[idx[3]]])?;
                Some((msac_cost(pts, &c, r, tau2), trial, c, r))
            })
            .collect();
        for r in results.into_iter().flatten() {
            if best.is_none_or(|b| r.0 < b.0) {
                best = Some(r);
            }
        }
        done = end;
        if let Some((_, _, c, r)) = best {
            let inliers = pts.iter().filter(|p| ((*p - c).norm() - r).abs() < tau).count();
            let w = inliers as f64 / n as f64;
            required = if w >= 1.0 {
                done
            } else {
                let denom = (1.0 - w.powi(4)).ln();
                if denom < 0.0 {
                    ((1.0 - cfg.confidence).ln() / denom).ceil() as usize
                } else {
                    cfg.max_trials
                }
            };
        }
    }
    let (_, _, mut center, mut radius) = best.ok_or(MetrologyError::NoValidModel)?;
    let mut inlier_set: Vec<usize> = Vec::new();
    for _ in 0..10 {
        let next: Vec<usize> = (0..n).filter(|&i| ((pts[i] - center).norm() - radius).abs() < tau).collect();
        if next.len() < 4 {
            return Err(MetrologyError::NoValidModel);
        }
        if next == inlier_set {
            break;
        }
        let inl: Vec<Vector3<f64>> = next.iter().map(|&i| pts[i]).collect();
        (center, radius) = refine_sphere(&inl, center, radius);
        inlier_set = next;
    }
    let inliers = pts.iter().filter(|p| ((*p - center).norm() - radius).abs() < tau).count();
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(MetrologyError::NoValidModel);
    }
    Ok(SphereFit { center: center.into(), radius, inliers, total: n, inlier_threshold: tau, trials: done })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn sphere_points(n: usize, c: Vector3<f64>, r: f64, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        let g = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| {
                let d = Vector3::new(g.sample(rng), g.sample(rng), g.sample(rng)).normalize();
                c + d * r
            })
            .collect()
    }

    #[test]
    fn exact_sphere_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Vector3::new(3.0, -4.0, 500.0);
        let cloud = PointCloud::new(sphere_points(2000, c, 50.0, &mut rng));
        let fit = fit_sphere_msac(&cloud, &MsacConfig::default()).unwrap();
        assert!((fit.radius - 50.0).abs() < 1e-9);
        assert!((fit.center() - c).norm() < 1e-9);
        assert_eq!(fit.inliers, 2000);
    }

    #[test]
    fn coplanar_points_have_no_model() {
        let cloud = PointCloud::new((0..50).map(|i| Vector3::new(i as f64, (i * i % 7) as f64, 0.0)).collect());
        assert_eq!(fit_sphere_msac(&cloud, &MsacConfig::default()), Err(MetrologyError::NoValidModel));
    }

    #[test]
    fn same_seed_same_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = sphere_points(1000, Vector3::zeros(), 50.0, &mut rng);
        pts.extend((0..100).map(|_| Vector3::new(rng.random_range(-70.0..70.0), rng.random_range(-70.0..70.0), rng.random_range(-70.0..70.0))));
        let cloud = PointCloud::new(pts);
        let cfg = MsacConfig { seed: 4, ..MsacConfig::default() };
        assert_eq!(fit_sphere_msac(&cloud, &cfg).unwrap(), fit_sphere_msac(&cloud, &cfg).unwrap());
    }

    #[test]
    fn shuffled_clean_cloud_gives_same_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pts = sphere_points(800, Vector3::new(1.0, 2.0, 3.0), 50.0, &mut rng);
        let mut shuffled = pts.clone();
        shuffled.reverse();
        let a = fit_sphere_msac(&PointCloud::new(pts), &MsacConfig::default()).unwrap();
        let b = fit_sphere_msac(&PointCloud::new(shuffled), &MsacConfig::default()).unwrap();
        assert!((a.radius - b.radius).abs() < 1e-9);
    }
}
