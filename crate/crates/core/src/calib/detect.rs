//! Circle-grid detection on a white-illuminated board capture.

use std::collections::{HashMap, VecDeque};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::CalibError;
use crate::image::GrayImage16;
use crate::patterns::CalibBoardSpec;

/// Ordered circle centres of one capture, in the order of
/// [`crate::patterns::board_object_points`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDetection {
    pub pose_index: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub centers: Vec<Vector2<f64>>,
}

/// Pixels at or below this fraction of the image maximum count as background.
const BACKGROUND_FRACTION: f64 = 0.05;
const MIN_COMPONENT_AREA: usize = 6;
const AREA_BAND: (f64, f64) = (0.3, 3.0);
const FILL_BAND: (f64, f64) = (0.75, 1.25);
const CENTROID_MARGIN: i64 = 2;

#[derive(Debug, Clone)]
struct Component {
    pixels: Vec<(u32, u32)>,
    touches_border: bool,
}

impl Component {
    fn moments(&self) -> (Vector2<f64>, f64) {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().fold(Vector2::zeros(), |a, &(x, y)| a + Vector2::new(x as f64, y as f64)) / n;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for &(x, y) in &self.pixels {
            let (dx, dy) = (x as f64 - mean.x, y as f64 - mean.y);
            sxx += dx * dx;
            syy += dy * dy;
            sxy += dx * dy;
        }
        // Ratio of pixel area to the area of the ellipse with the same
        // second moments; 1 for a filled ellipse. The 1/12 terms account
        // for the extent of each pixel.
        let (sxx, syy, sxy) = (sxx / n + 1.0 / 12.0, syy / n + 1.0 / 12.0, sxy / n);
        let det = (sxx * syy - sxy * sxy).max(1e-12);
        (mean, n / (4.0 * std::f64::consts::PI * det.sqrt()))
    }
}

/// Otsu threshold over the values above `floor`.
fn otsu_threshold(values: impl Iterator<Item = u16>, max: u16) -> f64 {
    const BINS: usize = 256;
    let mut hist = [0u64; BINS];
    let scale = (BINS - 1) as f64 / max.max(1) as f64;
    let mut total = 0u64;
    for v in values {
        hist[(v as f64 * scale) as usize] += 1;
        total += 1;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, h)| i as f64 * *h as f64).sum();
    let (mut w0, mut sum0, mut best, mut best_t) = (0.0, 0.0, -1.0, 0usize);
    for (t, h) in hist.iter().enumerate() {
        w0 += *h as f64;
        sum0 += t as f64 * *h as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f64 + 1.0) / scale
}

/// 8-connected components of `mask`.
fn components(mask: &[bool], w: u32, h: u32) -> Vec<Component> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = Component { pixels: Vec::new(), touches_border: false };
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w as usize) as u32, (i / w as usize) as u32);
            comp.pixels.push((x, y));
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                comp.touches_border = true;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w as usize + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Coverage-weighted centroid: each pixel in a small window around the
/// blob weighs `(W − I)/(W − D)` clamped to `[0, 1]`, where `W` and `D` are
/// the local paper and ink levels, so anti-aliased edge pixels contribute
/// their partial coverage.
fn weighted_centroid(img: &GrayImage16, comp: &Component, labels: &[u32], label: u32, threshold: f64) -> Option<Vector2<f64>> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for &(x, y) in &comp.pixels {
        x0 = x0.min(x as i64);
        y0 = y0.min(y as i64);
        x1 = x1.max(x as i64);
        y1 = y1.max(y as i64);
    }
    let (x0, y0) = ((x0 - CENTROID_MARGIN).max(0), (y0 - CENTROID_MARGIN).max(0));
    let (x1, y1) = ((x1 + CENTROID_MARGIN).min(w - 1), (y1 + CENTROID_MARGIN).min(h - 1));
    let idx = |x: i64, y: i64| y as usize * w as usize + x as usize;

    let mut paper: Vec<f64> = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let v = img.get(x as u32, y as u32) as f64;
            if labels[idx(x, y)] == 0 && v >= threshold {
                paper.push(v);
            }
        }
    }
    let interior: Vec<f64> = comp
        .pixels
        .iter()
        .filter(|&&(x, y)| {
            let (x, y) = (x as i64, y as i64);
            x > 0 && y > 0 && x + 1 < w && y + 1 < h
                && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().all(|(dx, dy)| labels[idx(x + dx, y + dy)] == label)
        })
        .map(|&(x, y)| img.get(x, y) as f64)
        .collect();
    let mut ink = if interior.is_empty() { comp.pixels.iter().map(|&(x, y)| img.get(x, y) as f64).collect() } else { interior };
    if paper.is_empty() {
        return None;
    }
    let (wl, dl) = (median(&mut paper), median(&mut ink));
    if wl <= dl {
        return None;
    }
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let l = labels[idx(x, y)];
            if l != 0 && l != label {
                continue;
            }
            let v = img.get(x as u32, y as u32) as f64;
            let wgt = ((wl - v) / (wl - dl)).clamp(0.0, 1.0);
            sw += wgt;
            sx += wgt * x as f64;
            sy += wgt * y as f64;
        }
    }
    (sw > 0.0).then(|| Vector2::new(sx / sw, sy / sw))
}

/// Dark blob centres that pass the area and fill-ratio filters.
pub fn find_blobs(img: &GrayImage16) -> Vec<Vector2<f64>> {
    let (w, h) = (img.width(), img.height());
    let max = img.data().iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Vec::new();
    }
    let floor = BACKGROUND_FRACTION * max as f64;
    let threshold = otsu_threshold(img.data().iter().copied().filter(|v| *v as f64 > floor), max);
    let dark: Vec<bool> = img.data().iter().map(|&v| (v as f64) > floor && (v as f64) < threshold).collect();
    let comps: Vec<Component> = components(&dark, w, h)
        .into_iter()
        .filter(|c| !c.touches_border && c.pixels.len() >= MIN_COMPONENT_AREA)
        .collect();
    if comps.is_empty() {
        return Vec::new();
    }
    let mut areas: Vec<f64> = comps.iter().map(|c| c.pixels.len() as f64).collect();
    let med = median(&mut areas);
    let kept: Vec<&Component> = comps
        .iter()
        .filter(|c| {
            let a = c.pixels.len() as f64;
            let fill = c.moments().1;
            a >= AREA_BAND.0 * med && a <= AREA_BAND.1 * med && fill >= FILL_BAND.0 && fill <= FILL_BAND.1
        })
        .collect();
    let mut labels = vec![0u32; dark.len()];
    for (i, c) in kept.iter().enumerate() {
        for &(x, y) in &c.pixels {
            labels[y as usize * w as usize + x as usize] = i as u32 + 1;
        }
    }
    kept.iter()
        .enumerate()
        .map(|(i, c)| weighted_centroid(img, c, &labels, i as u32 + 1, threshold).unwrap_or_else(|| c.moments().0))
        .collect()
}

fn cross(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Assigns lattice coordinates `(c, r)` to blob centres by growing the grid
/// from the most central blob. `h` is the image step for `Δc = 2` (same
/// row) and `v` the step for `Δr = 1`, chosen so that `(h, v)` has the
/// board's handedness in the image (`cross(h, v) > 0`, y pointing down).
fn grow_lattice(points: &[Vector2<f64>]) -> Option<(Vec<(i32, i32)>, Vector2<f64>)> {
    let n = points.len();
    if n < 3 {
        return None;
    }
    let centroid = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n as f64;
    let seed = (0..n).min_by(|&a, &b| (points[a] - centroid).norm().total_cmp(&(points[b] - centroid).norm()))?;
    let mut near: Vec<usize> = (0..n).filter(|&i| i != seed).collect();
    near.sort_by(|&a, &b| (points[a] - points[seed]).norm().total_cmp(&(points[b] - points[seed]).norm()));
    let h = points[near[0]] - points[seed];
    let hn = h.norm();
    // Diagonal neighbour (Δc, Δr) = (1, ±1): roughly h/2 plus a vertical step.
    let diag = near
        .iter()
        .take(8)
        .map(|&i| points[i] - points[seed])
        .filter(|d| d.norm() < 1.6 * hn && d.dot(&h) > 0.2 * hn * d.norm() && cross(&h, d).abs() > 0.3 * hn * d.norm())
        .find(|d| cross(&h, d) > 0.0)?;
    let v = diag - h / 2.0;

    let offsets = [(2, 0), (-2, 0), (1, 1), (-1, 1), (1, -1), (-1, -1)];
    let mut coord: Vec<Option<(i32, i32)>> = vec![None; n];
    let mut basis = vec![(h, v); n];
    let mut taken: HashMap<(i32, i32), usize> = HashMap::new();
    coord[seed] = Some((0, 0));
    taken.insert((0, 0), seed);
    let mut queue = VecDeque::from([seed]);
    while let Some(p) = queue.pop_front() {
        let (c, r) = coord[p].expect("queued points are assigned");
        let (hp, vp) = basis[p];
        for (dc, dr) in offsets {
            let key = (c + dc, r + dr);
            if taken.contains_key(&key) {
                continue;
            }
            let predicted = points[p] + hp * dc as f64 / 2.0 + vp * dr as f64;
            let tol = 0.3 * hp.norm().min(vp.norm());
            let best = (0..n)
                .filter(|&i| coord[i].is_none())
                .map(|i| (i, (points[i] - predicted).norm()))
                .filter(|(_, d)| *d < tol)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((q, _)) = best {
                let step = points[q] - points[p];
                basis[q] = if dr == 0 {
                    (step * (dc / 2) as f64, vp)
                } else {
                    (hp, (step - hp * dc as f64 / 2.0) / dr as f64)
                };
                coord[q] = Some(key);
                taken.insert(key, q);
                queue.push_back(q);
            }
        }
    }
    let coords: Option<Vec<(i32, i32)>> = coord.into_iter().collect();
    coords.map(|c| (c, h))
}

/// Finds the circle grid of `spec` in a capture taken under full-white
/// projection and returns the centres ordered like the board object points.
pub fn detect_circle_grid(image: &GrayImage16, spec: &CalibBoardSpec, pose_index: usize) -> Result<GridDetection, CalibError> {
    let expected = spec.circle_count();
    let blobs = find_blobs(image);
    if blobs.len() != expected {
        return Err(CalibError::GridNotFound { found: blobs.len(), expected });
    }
    let (coords, h) = grow_lattice(&blobs).ok_or(CalibError::GridNotFound { found: blobs.len(), expected })?;

    let sites = spec.lattice_sites();
    let (cols, rows) = (spec.cols as i32, spec.rows as i32);
    let mut candidates = Vec::new();
    for s in [1, -1] {
        let flipped: Vec<(i32, i32)> = coords.iter().map(|&(c, r)| (s * c, s * r)).collect();
        let c0 = flipped.iter().map(|p| p.0).min().unwrap_or(0);
        let r0 = flipped.iter().map(|p| p.1).min().unwrap_or(0);
        let shifted: Vec<(i32, i32)> = flipped.iter().map(|&(c, r)| (c - c0, r - r0)).collect();
        let fits = shifted.iter().all(|&(c, r)| c < cols && r < rows && (c + r) % 2 == 0);
        if fits {
            candidates.push((s, shifted));
        }
    }
    let chosen = match candidates.len() {
        0 => return Err(CalibError::GridNotFound { found: blobs.len(), expected }),
        1 => candidates.pop().expect("one candidate").1,
        _ => {
            // Point-symmetric layout: keep the board's +x pointing right in the image.
            if h.x.abs() < 0.2 * h.norm() {
                return Err(CalibError::AmbiguousOrientation);
            }
            let want = if h.x > 0.0 { 1 } else { -1 };
            candidates.into_iter().find(|(s, _)| *s == want).expect("both signs are candidates").1
        }
    };
    let index: HashMap<(i32, i32), usize> = chosen.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let mut centers = Vec::with_capacity(expected);
    for (c, r) in sites {
        let i = index.get(&(c as i32, r as i32)).ok_or(CalibError::GridNotFound { found: blobs.len(), expected })?;
        centers.push(blobs[*i]);
    }
    let (image_width, image_height) = (image.width(), image.height());
    Ok(GridDetection { pose_index, image_width, image_height, centers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ProjectionMatrix;
    use crate::patterns::{board_object_points, BoardScaling};
    use crate::render::scenes::{board_scene, BoardObject};
    use crate::render::{capture::place_plane, render_frame};
    use nalgebra::{Rotation3, Vector3};

    fn white() -> GrayImage16 {
        GrayImage16::filled(912, 1140, 65535)
    }

    fn check_against_oracle(pose: crate::geometry::RigidPose, tol: f64) {
        let board = BoardObject::new(&CalibBoardSpec::default(), BoardScaling::FitToPlane).unwrap();
        let mut scene = board_scene(480, &board);
        place_plane(&mut scene, 0, pose).unwrap();
        let img = render_frame(&scene, Some(&white())).unwrap();
        let det = detect_circle_grid(&img, &board.spec, 3).unwrap();
        assert_eq!(det.pose_index, 3);
        let m = ProjectionMatrix::camera(&scene.camera.intrinsics, &scene.camera.pose);
        let obj = board_object_points(&board.spec, BoardScaling::FitToPlane).unwrap();
        let worst = obj
            .iter()
            .zip(&det.centers)
            .map(|(x, c)| (m.project(&pose.transform_point(x)).unwrap() - c).norm())
            .fold(0.0, f64::max);
        assert!(worst < tol, "worst centre error {worst} px");
    }

    #[test]
    fn fronto_parallel_board_matches_projection() {
        let board = BoardObject::new(&CalibBoardSpec::default(), BoardScaling::FitToPlane).unwrap();
        check_against_oracle(board.base_pose(), 0.1);
    }

    #[test]
    fn tilted_board_matches_projection() {
        let board = BoardObject::new(&CalibBoardSpec::default(), BoardScaling::FitToPlane).unwrap();
        let base = board.base_pose();
        let c = board.plane_center();
        let rot = Rotation3::from_axis_angle(&Vector3::x_axis(), 15f64.to_radians()).into_inner() * base.rotation();
        let t = base.transform_point(&c) - rot * c;
        check_against_oracle(crate::geometry::RigidPose::new(rot, t).unwrap(), 0.2);
    }

    #[test]
    fn blank_image_has_no_grid() {
        let img = GrayImage16::filled(64, 64, 40000);
        assert!(matches!(
            detect_circle_grid(&img, &CalibBoardSpec::default(), 0),
            Err(CalibError::GridNotFound { found: 0, .. })
        ));
    }

    #[test]
    fn upside_down_board_is_reordered() {
        let board = BoardObject::new(&CalibBoardSpec::default(), BoardScaling::FitToPlane).unwrap();
        let base = board.base_pose();
        let c = board.plane_center();
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI).into_inner();
        let t = base.transform_point(&c) - rot * c;
        check_against_oracle(crate::geometry::RigidPose::new(rot, t).unwrap(), 0.1);
    }
}
