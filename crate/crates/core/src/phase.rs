//! Phase analysis: N-step wrapped phase, Gray-code fringe orders, temporal
//! unwrapping and modulation masking.
//!
//! Sign convention: patterns carry phase `+2πu/T`, and the wrapped phase
//! `φ = −atan2(Σ Iₙ sin δₙ, Σ Iₙ cos δₙ)` then recovers `+2πu/T` modulo
//! 2π, so unwrapped phase grows with the projector coordinate.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Raster;
use crate::patterns::{gray_decode, phase_shift};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhaseError {
    #[error("expected {expected} fringe frames, got {got}")]
    FrameCountMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Wrapped phase with the per-pixel background and modulation estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct WrappedPhase {
    pub width: u32,
    pub height: u32,
    pub wrapped: Vec<f64>,
    pub avg: Vec<f64>,
    pub modulation: Vec<f64>,
}

/// Gray-decoded fringe orders.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderMap {
    pub width: u32,
    pub height: u32,
    /// Period index `⌊u/T⌋` from the main code.
    pub period: Vec<i32>,
    /// Half-period index `⌊2u/T⌋` when a complementary frame was captured.
    pub half: Option<Vec<i32>>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMaps {
    pub width: u32,
    pub height: u32,
    pub wrapped: Vec<f64>,
    pub order: Vec<i32>,
    pub unwrapped: Vec<f64>,
    pub avg: Vec<f64>,
    pub modulation: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Folds an angle into `(−π, π]`.
pub fn wrap_to_pi(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

fn check_dims<R: Raster>(reference: (u32, u32), frames: &[&R], what: &str) -> Result<(), PhaseError> {
    for (i, f) in frames.iter().enumerate() {
        if f.dims() != reference {
            return Err(PhaseError::DimensionMismatch(format!(
                "{what} {i} is {}x{}, expected {}x{}",
                f.width(),
                f.height(),
                reference.0,
                reference.1
            )));
        }
    }
    Ok(())
}

pub fn compute_wrapped_phase<R: Raster>(frames: &[R], n_steps: usize) -> Result<WrappedPhase, PhaseError> {
    if frames.len() != n_steps || n_steps < 3 {
        return Err(PhaseError::FrameCountMismatch { expected: n_steps.max(3), got: frames.len() });
    }
    let dims = frames[0].dims();
    check_dims(dims, &frames.iter().collect::<Vec<_>>(), "fringe frame")?;
    let (sin_d, cos_d): (Vec<f64>, Vec<f64>) =
        (1..=n_steps).map(|n| phase_shift(n, n_steps)).map(|d| (d.sin(), d.cos())).unzip();
    let len = frames[0].len();
    let n = n_steps as f64;
    let per_pixel: Vec<(f64, f64, f64)> = (0..len)
        .into_par_iter()
        .map(|i| {
            let mean = frames.iter().map(|f| f.sample(i)).sum::<f64>() / n;
            // Removing the mean first makes constant stacks give exactly
            // zero sums instead of rounding residue.
            let (mut s, mut c) = (0.0, 0.0);
            for (k, f) in frames.iter().enumerate() {
                let v = f.sample(i) - mean;
                s += v * sin_d[k];
                c += v * cos_d[k];
            }
            let phi = wrap_to_pi(-s.atan2(c));
            (phi, mean, 2.0 / n * s.hypot(c))
        })
        .collect();
    let mut out = WrappedPhase {
        width: dims.0,
        height: dims.1,
        wrapped: Vec::with_capacity(len),
        avg: Vec::with_capacity(len),
        modulation: Vec::with_capacity(len),
    };
    for (phi, a, m) in per_pixel {
        out.wrapped.push(phi);
        out.avg.push(a);
        out.modulation.push(m);
    }
    Ok(out)
}

/// Binarizes each Gray frame against the per-pixel midpoint of the white
/// and black references and decodes the codeword (most significant frame
/// first). Pixels where white does not exceed black are invalid.
pub fn decode_fringe_order<R: Raster>(
    gray: &[R],
    complement: Option<&R>,
    white: &R,
    black: &R,
) -> Result<OrderMap, PhaseError> {
    if gray.is_empty() || gray.len() > 31 {
        return Err(PhaseError::FrameCountMismatch { expected: 1, got: gray.len() });
    }
    let dims = white.dims();
    check_dims(dims, &gray.iter().collect::<Vec<_>>(), "gray frame")?;
    check_dims(dims, &[black], "black frame")?;
    if let Some(c) = complement {
        check_dims(dims, &[c], "complement frame")?;
    }
    let len = white.len();
    let decoded: Vec<(i32, i32, bool)> = (0..len)
        .into_par_iter()
        .map(|i| {
            let (w, b) = (white.sample(i), black.sample(i));
            let thresh = 0.5 * (w + b);
            let code = gray.iter().fold(0u32, |acc, f| (acc << 1) | (f.sample(i) > thresh) as u32);
            let period = gray_decode(code) as i32;
            let half = complement
                .map(|c| gray_decode((code << 1) | (c.sample(i) > thresh) as u32) as i32)
                .unwrap_or(-1);
            (period, half, w > b)
        })
        .collect();
    Ok(OrderMap {
        width: dims.0,
        height: dims.1,
        period: decoded.iter().map(|d| d.0).collect(),
        half: complement.map(|_| decoded.iter().map(|d| d.1).collect()),
        valid: decoded.iter().map(|d| d.2).collect(),
    })
}

/// Resolves the fringe order of one pixel.
///
/// Without a half-period index the order is used as given. With one, the
/// main code decides near the middle of a period (`|φ| > π/2`) and the
/// half-period code decides near period edges, where the main code's
/// stripe transitions make it unreliable.
pub fn resolve_order(phi: f64, period: i32, half: Option<i32>) -> i32 {
    match half {
        None => period,
        Some(_) if phi > PI / 2.0 => period,
        Some(_) if phi < -PI / 2.0 => period + 1,
        Some(h) => (h + 1).div_euclid(2),
    }
}

pub fn unwrap_phase(wrapped: &WrappedPhase, order: &OrderMap) -> Result<PhaseMaps, PhaseError> {
    if (wrapped.width, wrapped.height) != (order.width, order.height) {
        return Err(PhaseError::DimensionMismatch(format!(
            "wrapped phase {}x{} vs order map {}x{}",
            wrapped.width, wrapped.height, order.width, order.height
        )));
    }
    let k: Vec<i32> = (0..wrapped.wrapped.len())
        .map(|i| resolve_order(wrapped.wrapped[i], order.period[i], order.half.as_ref().map(|h| h[i])))
        .collect();
    let unwrapped = wrapped.wrapped.iter().zip(&k).map(|(p, k)| p + 2.0 * PI * *k as f64).collect();
    Ok(PhaseMaps {
        width: wrapped.width,
        height: wrapped.height,
        wrapped: wrapped.wrapped.clone(),
        order: k,
        unwrapped,
        avg: wrapped.avg.clone(),
        modulation: wrapped.modulation.clone(),
        mask: order.valid.clone(),
    })
}

/// Clears the mask where the modulation falls below `threshold`.
pub fn mask_by_modulation(mut maps: PhaseMaps, threshold: f64) -> PhaseMaps {
    for (m, &md) in maps.mask.iter_mut().zip(&maps.modulation) {
        if md < threshold {
            *m = false;
        }
    }
    maps
}

/// Default modulation threshold: 2% of the 16-bit full scale.
pub const DEFAULT_MODULATION_THRESHOLD: f64 = 0.02 * 65535.0;

/// One-call phase pipeline for a single fringe direction.
pub fn analyze<R: Raster>(
    fringes: &[R],
    gray: &[R],
    complement: Option<&R>,
    white: &R,
    black: &R,
    modulation_threshold: f64,
) -> Result<PhaseMaps, PhaseError> {
    let wrapped = compute_wrapped_phase(fringes, fringes.len())?;
    let order = decode_fringe_order(gray, complement, white, black)?;
    Ok(mask_by_modulation(unwrap_phase(&wrapped, &order)?, modulation_threshold))
}

impl PhaseMaps {
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Bilinear sample of the unwrapped phase at sub-pixel `(u, v)`; `None`
    /// if any of the four supporting pixels is masked or out of bounds.
    pub fn sample_unwrapped(&self, u: f64, v: f64) -> Option<f64> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let (x0, y0) = (u.floor() as u32, v.floor() as u32);
        if x0 + 1 >= self.width || y0 + 1 >= self.height {
            return None;
        }
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let mut acc = 0.0;
        for (dx, dy, w) in [(0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)), (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)] {
            let i = self.index(x0 + dx, y0 + dy);
            if !self.mask[i] {
                return None;
            }
            acc += w * self.unwrapped[i];
        }
        Some(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{FloatImage, GrayImage16};
    use crate::patterns::{gen_fringe_patterns, gen_gray_code_patterns, FringeDirection, FringeSetSpec, GraySetSpec};
    use proptest::prelude::*;

    fn stack(n: usize, phi: f64, a: f64, b: f64) -> Vec<FloatImage> {
        (1..=n)
            .map(|k| FloatImage::from_fn(2, 1, |_, _| a + b * (phi + phase_shift(k, n)).cos()))
            .collect()
    }

    #[test]
    fn recovers_pi_over_three() {
        let w = compute_wrapped_phase(&stack(18, PI / 3.0, 100.0, 50.0), 18).unwrap();
        assert!((w.wrapped[0] - PI / 3.0).abs() < 1e-9);
        assert!((w.avg[0] - 100.0).abs() < 1e-9);
        assert!((w.modulation[0] - 50.0).abs() < 1e-9);
    }

    #[test]
    fn trig_identity_brute_force() {
        for n in 3..40 {
            for j in 0..20 {
                let phi = -3.0 + 0.3 * j as f64;
                let s: f64 = (1..=n).map(|k| (phi + phase_shift(k, n)).cos() * phase_shift(k, n).sin()).sum();
                assert!((s + n as f64 / 2.0 * phi.sin()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_frames_have_zero_modulation() {
        let frames: Vec<FloatImage> = (0..18).map(|_| FloatImage::from_fn(1, 1, |_, _| 700.0)).collect();
        let w = compute_wrapped_phase(&frames, 18).unwrap();
        assert_eq!(w.modulation[0], 0.0);
        let order = OrderMap { width: 1, height: 1, period: vec![0], half: None, valid: vec![true] };
        let maps = mask_by_modulation(unwrap_phase(&w, &order).unwrap(), 1e-6);
        assert!(!maps.mask[0]);
    }

    #[test]
    fn frame_errors() {
        let s = stack(18, 0.0, 1.0, 1.0);
        assert!(matches!(compute_wrapped_phase(&s[..17], 18), Err(PhaseError::FrameCountMismatch { .. })));
        let mut s = s;
        s[3] = FloatImage::from_fn(3, 1, |_, _| 0.0);
        assert!(matches!(compute_wrapped_phase(&s, 18), Err(PhaseError::DimensionMismatch(_))));
    }

    #[test]
    fn wrap_range_is_half_open() {
        assert_eq!(wrap_to_pi(-PI), PI);
        assert_eq!(wrap_to_pi(PI), PI);
        assert!((wrap_to_pi(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn unwrap_direct_examples() {
        assert_eq!(resolve_order(0.5, 0, None), 0);
        let w = WrappedPhase {
            width: 2,
            height: 1,
            wrapped: vec![0.5, -PI / 2.0],
            avg: vec![0.0; 2],
            modulation: vec![1.0; 2],
        };
        let o = OrderMap { width: 2, height: 1, period: vec![0, 2], half: None, valid: vec![true; 2] };
        let m = unwrap_phase(&w, &o).unwrap();
        assert_eq!(m.unwrapped[0], 0.5);
        assert_eq!(m.unwrapped[1], -PI / 2.0 + 4.0 * PI);
    }

    #[test]
    fn gray_codeword_decoding() {
        let frame = |bits: [u16; 3]| bits.map(|b| FloatImage::from_fn(1, 1, |_, _| b as f64));
        let white = FloatImage::from_fn(1, 1, |_, _| 1.0);
        let black = FloatImage::from_fn(1, 1, |_, _| 0.0);
        for (bits, k) in [([0, 0, 0], 0), ([0, 0, 1], 1), ([0, 1, 1], 2), ([0, 1, 0], 3)] {
            let o = decode_fringe_order(&frame(bits), None, &white, &black).unwrap();
            assert_eq!(o.period[0], k);
        }
        let o = decode_fringe_order(&frame([1, 1, 1]), None, &white, &white).unwrap();
        assert!(!o.valid[0]);
    }

    fn synthetic(t: u32, w: u32) -> (Vec<GrayImage16>, GrayImage16, GrayImage16, Vec<GrayImage16>, GrayImage16) {
        let fs = FringeSetSpec {
            n_steps: 18,
            period_px: t,
            direction: FringeDirection::Vertical,
            proj_width: w,
            proj_height: 2,
            min_level: 0,
            max_level: 65535,
        };
        let g = gen_gray_code_patterns(&GraySetSpec::for_fringes(&fs, true)).unwrap();
        (gen_fringe_patterns(&fs).unwrap(), g.white, g.black, g.frames, g.complement.unwrap())
    }

    #[test]
    fn gray_round_trip_matches_period_index() {
        let (_, white, black, frames, _) = synthetic(19, 912);
        let o = decode_fringe_order(&frames, None, &white, &black).unwrap();
        for x in 0..912 {
            assert_eq!(o.period[x as usize], x / 19);
        }
    }

    #[test]
    fn full_synthetic_pipeline_recovers_linear_phase() {
        for t in [19u32, 36, 24] {
            let width = t * 12;
            let (fringes, white, black, gray, comp) = synthetic(t, width);
            let maps = analyze(&fringes, &gray, Some(&comp), &white, &black, DEFAULT_MODULATION_THRESHOLD).unwrap();
            let mut se = 0.0;
            for x in 0..width {
                let want = 2.0 * PI * x as f64 / t as f64;
                let got = maps.unwrapped[x as usize];
                assert!((got - want).abs() < 1e-2, "T={t} x={x}: {got} vs {want}");
                se += (got - want).powi(2);
                let k = (got - maps.wrapped[x as usize]) / (2.0 * PI);
                assert!((k - maps.order[x as usize] as f64).abs() < 1e-12);
            }
            assert!((se / width as f64).sqrt() < 2e-4);
            for x in 1..width as usize {
                assert!(maps.unwrapped[x] > maps.unwrapped[x - 1], "T={t} x={x} {:?}", &maps.unwrapped[x - 1..=x]);
            }
        }
    }

    #[test]
    fn quantized_t36_round_trip() {
        let (fringes, ..) = synthetic(36, 72);
        let w = compute_wrapped_phase(&fringes, 18).unwrap();
        let mut se = 0.0;
        for x in 0..72 {
            let err = wrap_to_pi(w.wrapped[x] - 2.0 * PI * x as f64 / 36.0);
            se += err * err;
        }
        assert!((se / 72.0).sqrt() < 2e-4);
    }

    #[test]
    fn boundary_correction_recovers_order_near_edges() {
        // A one-pixel shift of the Gray code emulates decoding errors right
        // at the period edges; the half-period code must absorb them.
        let t = 20.0;
        for i in 0..2000 {
            let u = i as f64 * 0.12;
            let phi = wrap_to_pi(2.0 * PI * u / t);
            for shift in [-1.0, 0.0, 1.0] {
                let k1 = ((u + shift) / t).floor().max(0.0) as i32;
                let k2 = (2.0 * u / t).floor() as i32;
                let k = resolve_order(phi, k1, Some(k2));
                assert!((phi + 2.0 * PI * k as f64 - 2.0 * PI * u / t).abs() < 1e-9, "u={u} shift={shift}");
            }
        }
    }

    proptest! {
        #[test]
        fn exposure_and_offset_invariance(phi in -3.1f64..3.1, a in 10.0f64..1000.0, b in 1.0f64..9.0, c in 0.1f64..10.0, d in -500.0f64..500.0) {
            let base = compute_wrapped_phase(&stack(18, phi, a, b), 18).unwrap().wrapped[0];
            let scaled = compute_wrapped_phase(&stack(18, phi, a * c, b * c), 18).unwrap().wrapped[0];
            let offset = compute_wrapped_phase(&stack(18, phi, a + d, b), 18).unwrap().wrapped[0];
            prop_assert!((base - phi).abs() < 1e-9);
            prop_assert!((scaled - base).abs() < 1e-12);
            prop_assert!((offset - base).abs() < 1e-9);
        }

        #[test]
        fn amplitude_invariance(phi in -3.1f64..3.1) {
            let a = compute_wrapped_phase(&stack(18, phi, 100.0, 50.0), 18).unwrap().wrapped[0];
            let b = compute_wrapped_phase(&stack(18, phi, 100.0, 150.0), 18).unwrap().wrapped[0];
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn zero_threshold_keeps_mask(mods in proptest::collection::vec(0.0f64..10.0, 1..20)) {
            let n = mods.len();
            let maps = PhaseMaps {
                width: n as u32, height: 1, wrapped: vec![0.0; n], order: vec![0; n], unwrapped: vec![0.0; n],
                avg: vec![0.0; n], modulation: mods, mask: vec![true; n],
            };
            prop_assert_eq!(mask_by_modulation(maps.clone(), 0.0), maps);
        }
    }
}
