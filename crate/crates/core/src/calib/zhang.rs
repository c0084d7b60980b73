//! Plane-to-image homographies and the closed-form intrinsic and pose
//! initialisation from them (zero-skew B-matrix system).

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3, Vector6};

use super::CalibError;
use crate::geometry::{nearest_rotation, RigidPose};

/// Similarity that moves points to zero mean and `√2` mean distance.
fn hartley_normalization(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let spread = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if spread > 0.0 { std::f64::consts::SQRT_2 / spread } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

fn apply(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Normalised DLT homography mapping `src` onto `dst`, scaled so `H[2,2] = 1`
/// when possible.
pub fn homography_dlt(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Result<Matrix3<f64>, CalibError> {
    if src.len() != dst.len() || src.len() < 4 {
        return Err(CalibError::DegenerateConfiguration(format!("homography needs ≥4 matched points, got {}", src.len().min(dst.len()))));
    }
    let (ts, td) = (hartley_normalization(src), hartley_normalization(dst));
    let mut a = DMatrix::zeros(2 * src.len(), 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let (s, d) = (apply(&ts, s), apply(&td, d));
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        a.row_mut(2 * i).copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(2 * i + 1).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let h = smallest_right_singular_vector(a, 8)?;
    let hn = Matrix3::from_row_slice(h.as_slice());
    let td_inv = td.try_inverse().expect("similarity is invertible");
    let mut hm = td_inv * hn * ts;
    let scale = if hm[(2, 2)].abs() > 1e-12 { hm[(2, 2)] } else { hm.norm() };
    hm /= scale;
    Ok(hm)
}

/// Right singular vector of the smallest singular value; fails when the
/// null space has more than one dimension (the second smallest singular
/// value is negligible) and `rank_needed` columns are not independent.
fn smallest_right_singular_vector(a: DMatrix<f64>, rank_needed: usize) -> Result<nalgebra::DVector<f64>, CalibError> {
    let cols = a.ncols();
    // Pad to at least as many rows as columns so the full V is available.
    let a = if a.nrows() < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (a.nrows(), cols)).copy_from(&a);
        p
    } else {
        a
    };
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| CalibError::DegenerateConfiguration("SVD failed".into()))?;
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let s_max = s[order[0]];
    if !(s_max > 0.0) || s[order[rank_needed - 1]] < 1e-10 * s_max {
        return Err(CalibError::DegenerateConfiguration("linear system is rank deficient".into()));
    }
    Ok(v_t.row(order[cols - 1]).transpose())
}

fn v_ij(h: &Matrix3<f64>, i: usize, j: usize) -> Vector6<f64> {
    let (hi, hj) = (h.column(i), h.column(j));
    Vector6::new(
        hi[0] * hj[0],
        hi[0] * hj[1] + hi[1] * hj[0],
        hi[1] * hj[1],
        hi[2] * hj[0] + hi[0] * hj[2],
        hi[2] * hj[1] + hi[1] * hj[2],
        hi[2] * hj[2],
    )
}

/// Closed-form `(fx, fy, ox, oy)` from at least three homographies,
/// with the skew constrained to zero.
pub fn intrinsics_from_homographies(hs: &[Matrix3<f64>]) -> Result<[f64; 4], CalibError> {
    if hs.len() < 3 {
        return Err(CalibError::DegenerateConfiguration(format!("need at least 3 poses, got {}", hs.len())));
    }
    let mut v = DMatrix::zeros(2 * hs.len() + 1, 6);
    for (k, h) in hs.iter().enumerate() {
        // Condition each homography so the two constraint rows are comparable.
        let h = h / h.column(0).norm().max(h.column(1).norm());
        v.row_mut(2 * k).copy_from(&v_ij(&h, 0, 1).transpose());
        v.row_mut(2 * k + 1).copy_from(&(v_ij(&h, 0, 0) - v_ij(&h, 1, 1)).transpose());
    }
    let last = 2 * hs.len();
    let row_scale = v.rows(0, last).abs().max();
    v[(last, 1)] = row_scale;
    let b = smallest_right_singular_vector(v, 5)?;
    let (mut b11, mut b12, mut b22, mut b13, mut b23, mut b33) = (b[0], b[1], b[2], b[3], b[4], b[5]);
    if b11 < 0.0 {
        (b11, b12, b22, b13, b23, b33) = (-b11, -b12, -b22, -b13, -b23, -b33);
    }
    let denom = b11 * b22 - b12 * b12;
    let degenerate = || CalibError::DegenerateConfiguration("intrinsic system has no positive-definite solution".into());
    if !(denom > 0.0) {
        return Err(degenerate());
    }
    let oy = (b12 * b13 - b11 * b23) / denom;
    let lambda = b33 - (b13 * b13 + oy * (b12 * b13 - b11 * b23)) / b11;
    let fx2 = lambda / b11;
    let fy2 = lambda * b11 / denom;
    if !(fx2 > 0.0 && fy2 > 0.0) {
        return Err(degenerate());
    }
    let (fx, fy) = (fx2.sqrt(), fy2.sqrt());
    let skew = -b12 * fx * fx * fy / lambda;
    let ox = skew * oy / fy - b13 * fx * fx / lambda;
    let k = [fx, fy, ox, oy];
    if k.iter().all(|x| x.is_finite()) {
        Ok(k)
    } else {
        Err(degenerate())
    }
}

/// Board-to-device pose from a homography and the intrinsic matrix,
/// with the board in front of the device.
pub fn pose_from_homography(h: &Matrix3<f64>, k: &Matrix3<f64>) -> Result<RigidPose, CalibError> {
    let k_inv = k.try_inverse().ok_or_else(|| CalibError::DegenerateConfiguration("singular intrinsic matrix".into()))?;
    let m = k_inv * h;
    let mut lambda = 1.0 / m.column(0).norm();
    if m[(2, 2)] * lambda < 0.0 {
        lambda = -lambda;
    }
    let r1 = m.column(0) * lambda;
    let r2 = m.column(1) * lambda;
    let r3 = r1.cross(&r2);
    let t = m.column(2) * lambda;
    let approx = Matrix3::from_columns(&[r1, r2, r3]);
    let r = nearest_rotation(&approx).ok_or_else(|| CalibError::DegenerateConfiguration("pose SVD failed".into()))?;
    RigidPose::new(r, t).map_err(|e| CalibError::DegenerateConfiguration(e.to_string()))
}
