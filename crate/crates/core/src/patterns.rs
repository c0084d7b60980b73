//! Projector pattern generation: N-step phase-shifted fringes, Gray-code
//! stripe sets, and asymmetric circle-grid calibration boards.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{rescale, GrayImage16};

/// Millimetres per metre, the reciprocal of the board formulas' `k_mm2m`.
const MM_PER_M: f64 = 1000.0;
const K_MM2M: f64 = 0.001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatternError {
    #[error("invalid pattern spec: {0}")]
    InvalidSpec(String),
    #[error("board pattern ({pattern_w_m:.4} x {pattern_h_m:.4} m) exceeds the plane; scale {scale:.4} < 1 required")]
    PatternExceedsPlane { pattern_w_m: f64, pattern_h_m: f64, scale: f64 },
}

/// Which projector axis the fringe phase varies along. Vertical stripes
/// encode the projector column, horizontal stripes the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FringeDirection {
    Vertical,
    Horizontal,
}

impl FringeDirection {
    pub fn name(self) -> &'static str {
        match self {
            FringeDirection::Vertical => "vertical",
            FringeDirection::Horizontal => "horizontal",
        }
    }

    /// Length of the swept projector axis.
    pub fn swept_len(self, width: u32, height: u32) -> u32 {
        match self {
            FringeDirection::Vertical => width,
            FringeDirection::Horizontal => height,
        }
    }

    /// Picks the swept coordinate out of a pixel position.
    pub fn coordinate(self, u: f64, v: f64) -> f64 {
        match self {
            FringeDirection::Vertical => u,
            FringeDirection::Horizontal => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeSetSpec {
    pub n_steps: usize,
    pub period_px: u32,
    pub direction: FringeDirection,
    pub proj_width: u32,
    pub proj_height: u32,
    #[serde(default)]
    pub min_level: u16,
    #[serde(default = "default_max_level")]
    pub max_level: u16,
}

fn default_max_level() -> u16 {
    u16::MAX
}

impl FringeSetSpec {
    pub fn validate(&self) -> Result<(), PatternError> {
        let bad = |m: String| Err(PatternError::InvalidSpec(m));
        if self.n_steps < 3 {
            return bad(format!("n_steps = {} (need >= 3)", self.n_steps));
        }
        if self.period_px < 4 {
            return bad(format!("period {} px (need >= 4)", self.period_px));
        }
        if self.max_level <= self.min_level {
            return bad(format!("max_level {} <= min_level {}", self.max_level, self.min_level));
        }
        if self.proj_width == 0 || self.proj_height == 0 {
            return bad("projector resolution must be non-zero".into());
        }
        let swept = self.direction.swept_len(self.proj_width, self.proj_height);
        if !swept.is_multiple_of(self.period_px) {
            return bad(format!(
                "period {} px does not divide the {} px swept dimension",
                self.period_px, swept
            ));
        }
        Ok(())
    }

    /// Background level `I'` of the generated patterns.
    pub fn average_level(&self) -> f64 {
        (self.max_level as f64 + self.min_level as f64) / 2.0
    }

    /// Modulation `I''` of the generated patterns.
    pub fn modulation_level(&self) -> f64 {
        (self.max_level as f64 - self.min_level as f64) / 2.0
    }

    pub fn period_count(&self) -> u32 {
        self.direction.swept_len(self.proj_width, self.proj_height) / self.period_px
    }
}

/// Phase shift of step `n` (1-based) out of `n_steps`.
pub fn phase_shift(n: usize, n_steps: usize) -> f64 {
    2.0 * PI * n as f64 / n_steps as f64
}

/// Returns the N fringe images; image `n-1` carries shift `2πn/N`.
pub fn gen_fringe_patterns(spec: &FringeSetSpec) -> Result<Vec<GrayImage16>, PatternError> {
    spec.validate()?;
    let avg = spec.average_level();
    let amp = spec.modulation_level();
    let period = spec.period_px as f64;
    let (lo, hi) = (spec.min_level as f64, spec.max_level as f64);
    let frames = (1..=spec.n_steps)
        .map(|n| {
            let delta = phase_shift(n, spec.n_steps);
            let swept = spec.direction.swept_len(spec.proj_width, spec.proj_height);
            let profile: Vec<u16> = (0..swept)
                .map(|c| rescale((avg + amp * (2.0 * PI * c as f64 / period + delta).cos()).clamp(lo, hi)))
                .collect();
            match spec.direction {
                FringeDirection::Vertical => {
                    GrayImage16::from_fn(spec.proj_width, spec.proj_height, |x, _| profile[x as usize])
                }
                FringeDirection::Horizontal => {
                    GrayImage16::from_fn(spec.proj_width, spec.proj_height, |_, y| profile[y as usize])
                }
            }
        })
        .collect();
    Ok(frames)
}

pub fn gray_encode(i: u32) -> u32 {
    i ^ (i >> 1)
}

pub fn gray_decode(mut g: u32) -> u32 {
    let mut i = 0;
    while g != 0 {
        i ^= g;
        g >>= 1;
    }
    i
}

/// Gray-code stripe set for one fringe direction.
///
/// With `complementary` set, one extra frame carries the least
/// significant bit of the Gray code of `⌊2c/T⌋`, whose stripe edges sit
/// half a period away from the main code's edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraySetSpec {
    pub n_bits: u32,
    pub period_px: u32,
    pub direction: FringeDirection,
    pub proj_width: u32,
    pub proj_height: u32,
    #[serde(default)]
    pub min_level: u16,
    #[serde(default = "default_max_level")]
    pub max_level: u16,
    #[serde(default = "default_true")]
    pub complementary: bool,
}

fn default_true() -> bool {
    true
}

/// Bits needed to label `periods` stripes, at least one.
pub fn bits_for_periods(periods: u32) -> u32 {
    let mut bits = 0;
    while (1u64 << bits) < periods as u64 {
        bits += 1;
    }
    bits.max(1)
}

impl GraySetSpec {
    pub fn for_fringes(fringes: &FringeSetSpec, complementary: bool) -> Self {
        GraySetSpec {
            n_bits: bits_for_periods(fringes.period_count()),
            period_px: fringes.period_px,
            direction: fringes.direction,
            proj_width: fringes.proj_width,
            proj_height: fringes.proj_height,
            min_level: fringes.min_level,
            max_level: fringes.max_level,
            complementary,
        }
    }

    pub fn validate(&self) -> Result<(), PatternError> {
        let swept = self.direction.swept_len(self.proj_width, self.proj_height);
        if self.period_px == 0 || !swept.is_multiple_of(self.period_px) {
            return Err(PatternError::InvalidSpec(format!(
                "period {} px does not divide the {} px swept dimension",
                self.period_px, swept
            )));
        }
        if self.max_level <= self.min_level {
            return Err(PatternError::InvalidSpec("max_level must exceed min_level".into()));
        }
        let periods = swept / self.period_px;
        if self.n_bits == 0 || self.n_bits > 31 || (1u64 << self.n_bits) < periods as u64 {
            return Err(PatternError::InvalidSpec(format!(
                "{} bits cannot label {} periods",
                self.n_bits, periods
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrayCodeSet {
    /// Most significant bit first.
    pub frames: Vec<GrayImage16>,
    pub complement: Option<GrayImage16>,
    pub white: GrayImage16,
    pub black: GrayImage16,
}

pub fn gen_gray_code_patterns(spec: &GraySetSpec) -> Result<GrayCodeSet, PatternError> {
    spec.validate()?;
    let (w, h) = (spec.proj_width, spec.proj_height);
    let swept = spec.direction.swept_len(w, h);
    let stripe = |bit_of: &dyn Fn(u32) -> bool| -> GrayImage16 {
        let profile: Vec<u16> =
            (0..swept).map(|c| if bit_of(c) { spec.max_level } else { spec.min_level }).collect();
        match spec.direction {
            FringeDirection::Vertical => GrayImage16::from_fn(w, h, |x, _| profile[x as usize]),
            FringeDirection::Horizontal => GrayImage16::from_fn(w, h, |_, y| profile[y as usize]),
        }
    };
    let frames = (0..spec.n_bits)
        .map(|b| {
            let shift = spec.n_bits - 1 - b;
            stripe(&|c| (gray_encode(c / spec.period_px) >> shift) & 1 == 1)
        })
        .collect();
    let complement = spec
        .complementary
        .then(|| stripe(&|c| gray_encode(2 * c / spec.period_px) & 1 == 1));
    Ok(GrayCodeSet {
        frames,
        complement,
        white: GrayImage16::filled(w, h, spec.max_level),
        black: GrayImage16::filled(w, h, spec.min_level),
    })
}

/// A projector frame with a stable identifier used for file names and manifests.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedPattern {
    pub id: String,
    pub image: GrayImage16,
}

/// Parameters of the default per-pose pattern sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSetSpec {
    pub proj_width: u32,
    pub proj_height: u32,
    pub n_steps: usize,
    pub period_px: u32,
    #[serde(default)]
    pub min_level: u16,
    #[serde(default = "default_max_level")]
    pub max_level: u16,
    #[serde(default = "default_true")]
    pub complementary: bool,
    #[serde(default = "default_directions")]
    pub directions: Vec<FringeDirection>,
}

fn default_directions() -> Vec<FringeDirection> {
    vec![FringeDirection::Vertical, FringeDirection::Horizontal]
}

impl Default for PatternSetSpec {
    /// 18-step fringes with a 19 px period on a 912x1140 projector, both
    /// directions: 2 x (18 fringes + 7 Gray frames) + white + black = 52.
    fn default() -> Self {
        PatternSetSpec {
            proj_width: 912,
            proj_height: 1140,
            n_steps: 18,
            period_px: 19,
            min_level: 0,
            max_level: u16::MAX,
            complementary: true,
            directions: default_directions(),
        }
    }
}

impl PatternSetSpec {
    pub fn fringe_spec(&self, direction: FringeDirection) -> FringeSetSpec {
        FringeSetSpec {
            n_steps: self.n_steps,
            period_px: self.period_px,
            direction,
            proj_width: self.proj_width,
            proj_height: self.proj_height,
            min_level: self.min_level,
            max_level: self.max_level,
        }
    }

    pub fn gray_spec(&self, direction: FringeDirection) -> GraySetSpec {
        GraySetSpec::for_fringes(&self.fringe_spec(direction), self.complementary)
    }

    pub fn fringe_id(&self, direction: FringeDirection, n: usize) -> String {
        format!("fringe_{}_{}px_{:02}", direction.name(), self.period_px, n)
    }

    pub fn gray_id(direction: FringeDirection, b: usize) -> String {
        format!("gray_{}_{:02}", direction.name(), b)
    }

    /// Gray frame ids of one direction, complement last.
    pub fn gray_ids(&self, direction: FringeDirection) -> Vec<String> {
        let n_bits = self.gray_spec(direction).n_bits as usize;
        let count = if self.complementary { n_bits + 1 } else { n_bits };
        (0..count).map(|b| Self::gray_id(direction, b)).collect()
    }

    pub fn fringe_ids(&self, direction: FringeDirection) -> Vec<String> {
        (1..=self.n_steps).map(|n| self.fringe_id(direction, n)).collect()
    }

    /// Pattern ids in the order produced by [`PatternSetSpec::build`].
    pub fn ids(&self) -> Vec<String> {
        let mut out: Vec<String> = self.directions.iter().flat_map(|&d| self.fringe_ids(d).into_iter().chain(self.gray_ids(d))).collect();
        out.push("white".into());
        out.push("black".into());
        out
    }

    /// Ordered pattern sequence: per direction the fringes then the Gray
    /// frames (complement last), followed by the shared white and black frames.
    pub fn build(&self) -> Result<Vec<NamedPattern>, PatternError> {
        if self.directions.is_empty() {
            return Err(PatternError::InvalidSpec("no fringe directions requested".into()));
        }
        let mut out = Vec::new();
        let mut white_black = None;
        for &dir in &self.directions {
            for (i, image) in gen_fringe_patterns(&self.fringe_spec(dir))?.into_iter().enumerate() {
                out.push(NamedPattern { id: self.fringe_id(dir, i + 1), image });
            }
            let gray = gen_gray_code_patterns(&self.gray_spec(dir))?;
            let n_bits = gray.frames.len();
            for (b, image) in gray.frames.into_iter().enumerate() {
                out.push(NamedPattern { id: Self::gray_id(dir, b), image });
            }
            if let Some(image) = gray.complement {
                out.push(NamedPattern { id: Self::gray_id(dir, n_bits), image });
            }
            white_black.get_or_insert((gray.white, gray.black));
        }
        let (white, black) = white_black.expect("at least one direction");
        out.push(NamedPattern { id: "white".into(), image: white });
        out.push(NamedPattern { id: "black".into(), image: black });
        Ok(out)
    }
}

/// Asymmetric circle-grid board drawn on a lattice of `rows` x `cols`
/// sites. Lattice columns are `d_centers/2` apart, rows `d_centers`
/// apart, and a site `(c, r)` carries a circle when `c + r` is even, so
/// neighbouring rows are offset by half the centre distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibBoardSpec {
    pub rows: u32,
    pub cols: u32,
    pub circle_diameter_mm: f64,
    pub center_distance_mm: f64,
    pub border_mm: f64,
    pub plane_width_m: f64,
    pub plane_height_m: f64,
    /// Texture raster density in pixels per simulated millimetre.
    pub px_per_mm: f64,
    /// Circle level (fraction of full scale); non-zero so phase can still be measured inside circles.
    #[serde(default = "default_ink")]
    pub ink_level: f64,
    #[serde(default = "default_paper")]
    pub paper_level: f64,
}

fn default_ink() -> f64 {
    0.2
}

fn default_paper() -> f64 {
    1.0
}

impl Default for CalibBoardSpec {
    fn default() -> Self {
        CalibBoardSpec {
            rows: 6,
            cols: 11,
            circle_diameter_mm: 10.0,
            center_distance_mm: 20.0,
            border_mm: 10.0,
            plane_width_m: 0.13,
            plane_height_m: 0.13,
            px_per_mm: 8.0,
            ink_level: default_ink(),
            paper_level: default_paper(),
        }
    }
}

/// Metric report of a generated board. Lengths suffixed `_m` are metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardMetrics {
    pub pattern_width_m: f64,
    pub pattern_height_m: f64,
    pub scale: f64,
    pub circle_diameter_sim_m: f64,
    pub center_distance_sim_m: f64,
    /// Position of the first circle centre measured from the plane's
    /// top-left corner, in millimetres.
    pub first_center_mm: [f64; 2],
    pub plane_width_mm: f64,
    pub plane_height_mm: f64,
    pub circle_count: usize,
}

impl BoardMetrics {
    /// Plane rectangle in the board frame (origin at the first circle
    /// centre): `(min corner, size)` in millimetres.
    pub fn plane_rect(&self) -> (Vector2<f64>, Vector2<f64>) {
        (
            Vector2::new(-self.first_center_mm[0], -self.first_center_mm[1]),
            Vector2::new(self.plane_width_mm, self.plane_height_mm),
        )
    }
}

/// Whether the board pattern may be rescaled to fit its plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoardScaling {
    #[default]
    FitToPlane,
    /// Keep the pattern at its nominal size; fails if it does not fit.
    Unscaled,
}

impl CalibBoardSpec {
    pub fn validate(&self) -> Result<(), PatternError> {
        let bad = |m: String| Err(PatternError::InvalidSpec(m));
        if self.rows < 3 || self.cols < 3 {
            return bad(format!("board {}x{} needs at least 3 rows and columns", self.rows, self.cols));
        }
        if self.cols.is_multiple_of(2) {
            return bad(format!("asymmetric grid needs an odd column count, got {}", self.cols));
        }
        let positive = [
            self.circle_diameter_mm,
            self.center_distance_mm,
            self.plane_width_m,
            self.plane_height_m,
            self.px_per_mm,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.border_mm >= 0.0) {
            return bad("board dimensions must be positive".into());
        }
        if self.circle_diameter_mm >= self.center_distance_mm {
            return bad(format!(
                "circle diameter {} mm must be below the centre distance {} mm",
                self.circle_diameter_mm, self.center_distance_mm
            ));
        }
        if !(0.0..=1.0).contains(&self.ink_level) || !(0.0..=1.0).contains(&self.paper_level) {
            return bad("ink and paper levels must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Nominal pattern width in metres.
    pub fn pattern_width_m(&self) -> f64 {
        (2.0 * self.border_mm + (self.cols - 1) as f64 * self.center_distance_mm / 2.0 + self.circle_diameter_mm)
            * K_MM2M
    }

    /// Nominal pattern height in metres.
    pub fn pattern_height_m(&self) -> f64 {
        (2.0 * self.border_mm + (self.rows - 1) as f64 * self.center_distance_mm + self.circle_diameter_mm) * K_MM2M
    }

    pub fn fit_scale(&self) -> f64 {
        (self.plane_width_m / self.pattern_width_m()).min(self.plane_height_m / self.pattern_height_m())
    }

    /// Lattice sites `(col, row)` carrying circles, row-major.
    pub fn lattice_sites(&self) -> Vec<(u32, u32)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).filter(move |c| (c + r) % 2 == 0).map(move |c| (c, r)))
            .collect()
    }

    pub fn circle_count(&self) -> usize {
        self.lattice_sites().len()
    }

    /// True when a 180° rotation maps the circle layout onto itself.
    pub fn is_point_symmetric(&self) -> bool {
        (self.rows + self.cols).is_multiple_of(2)
    }

    pub fn metrics(&self, scaling: BoardScaling) -> Result<BoardMetrics, PatternError> {
        self.validate()?;
        let pattern_w = self.pattern_width_m();
        let pattern_h = self.pattern_height_m();
        let fit = self.fit_scale();
        let scale = match scaling {
            BoardScaling::FitToPlane => fit,
            BoardScaling::Unscaled if fit < 1.0 => {
                return Err(PatternError::PatternExceedsPlane { pattern_w_m: pattern_w, pattern_h_m: pattern_h, scale: fit })
            }
            BoardScaling::Unscaled => 1.0,
        };
        let plane_w_mm = self.plane_width_m * MM_PER_M;
        let plane_h_mm = self.plane_height_m * MM_PER_M;
        let offset_x = (plane_w_mm - pattern_w * MM_PER_M * scale) / 2.0;
        let offset_y = (plane_h_mm - pattern_h * MM_PER_M * scale) / 2.0;
        let first = scale * (self.border_mm + self.circle_diameter_mm / 2.0);
        Ok(BoardMetrics {
            pattern_width_m: pattern_w,
            pattern_height_m: pattern_h,
            scale,
            circle_diameter_sim_m: self.circle_diameter_mm * K_MM2M * scale,
            center_distance_sim_m: self.center_distance_mm * K_MM2M * scale,
            first_center_mm: [offset_x + first, offset_y + first],
            plane_width_mm: plane_w_mm,
            plane_height_mm: plane_h_mm,
            circle_count: self.circle_count(),
        })
    }
}

/// Circle centres in the board frame (mm, `z = 0`), row-major in the same
/// order the grid detector reports them.
pub fn board_object_points(spec: &CalibBoardSpec, scaling: BoardScaling) -> Result<Vec<Vector3<f64>>, PatternError> {
    let metrics = spec.metrics(scaling)?;
    let pitch = metrics.center_distance_sim_m * MM_PER_M;
    Ok(spec
        .lattice_sites()
        .into_iter()
        .map(|(c, r)| Vector3::new(c as f64 * pitch / 2.0, r as f64 * pitch, 0.0))
        .collect())
}

/// Renders the board texture covering the whole plane, together with its
/// metric report.
pub fn gen_calibration_board(
    spec: &CalibBoardSpec,
    scaling: BoardScaling,
) -> Result<(GrayImage16, BoardMetrics), PatternError> {
    let metrics = spec.metrics(scaling)?;
    let tex_w = (metrics.plane_width_mm * spec.px_per_mm).round().max(1.0) as u32;
    let tex_h = (metrics.plane_height_mm * spec.px_per_mm).round().max(1.0) as u32;
    // Exact texel pitch so that the texture spans the plane edge to edge.
    let mm_per_px_x = metrics.plane_width_mm / tex_w as f64;
    let mm_per_px_y = metrics.plane_height_mm / tex_h as f64;

    let paper = spec.paper_level * 65535.0;
    let ink = spec.ink_level * 65535.0;
    let mut coverage = vec![0.0f64; tex_w as usize * tex_h as usize];
    let radius = metrics.circle_diameter_sim_m * MM_PER_M / 2.0;
    let pitch = metrics.center_distance_sim_m * MM_PER_M;
    const SUB: usize = 8;
    let texel_diag = 0.75 * mm_per_px_x.hypot(mm_per_px_y);
    for (c, r) in spec.lattice_sites() {
        let cx = metrics.first_center_mm[0] + c as f64 * pitch / 2.0;
        let cy = metrics.first_center_mm[1] + r as f64 * pitch;
        let x0 = (((cx - radius) / mm_per_px_x).floor() as i64 - 1).max(0) as u32;
        let x1 = (((cx + radius) / mm_per_px_x).ceil() as i64 + 1).min(tex_w as i64 - 1).max(0) as u32;
        let y0 = (((cy - radius) / mm_per_px_y).floor() as i64 - 1).max(0) as u32;
        let y1 = (((cy + radius) / mm_per_px_y).ceil() as i64 + 1).min(tex_h as i64 - 1).max(0) as u32;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let mx = (px as f64 + 0.5) * mm_per_px_x;
                let my = (py as f64 + 0.5) * mm_per_px_y;
                let d = (mx - cx).hypot(my - cy);
                let cov = if d <= radius - texel_diag {
                    1.0
                } else if d >= radius + texel_diag {
                    0.0
                } else {
                    let mut inside = 0;
                    for sy in 0..SUB {
                        for sx in 0..SUB {
                            let sxm = (px as f64 + (sx as f64 + 0.5) / SUB as f64) * mm_per_px_x - cx;
                            let sym = (py as f64 + (sy as f64 + 0.5) / SUB as f64) * mm_per_px_y - cy;
                            if sxm * sxm + sym * sym <= radius * radius {
                                inside += 1;
                            }
                        }
                    }
                    inside as f64 / (SUB * SUB) as f64
                };
                let slot = &mut coverage[py as usize * tex_w as usize + px as usize];
                *slot = slot.max(cov);
            }
        }
    }
    let data = coverage.into_iter().map(|cov| rescale(paper + (ink - paper) * cov)).collect();
    let texture = GrayImage16::from_vec(tex_w, tex_h, data).expect("size matches");
    Ok((texture, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fringe(n: usize, t: u32, w: u32) -> FringeSetSpec {
        FringeSetSpec {
            n_steps: n,
            period_px: t,
            direction: FringeDirection::Vertical,
            proj_width: w,
            proj_height: 4,
            min_level: 0,
            max_level: 65535,
        }
    }

    #[test]
    fn three_step_peak_value() {
        let frames = gen_fringe_patterns(&fringe(3, 4, 8)).unwrap();
        // n = 3 gives delta = 2π, so u = 0 sits on the cosine peak.
        assert_eq!(frames[2].get(0, 0), 65535);
        assert_eq!(frames.len(), 3);
    }

    #[test]
    fn stack_mean_is_background_level() {
        let spec = fringe(18, 36, 72);
        let frames = gen_fringe_patterns(&spec).unwrap();
        for x in 0..72 {
            let mean: f64 = frames.iter().map(|f| f.get(x, 1) as f64).sum::<f64>() / 18.0;
            assert!((mean - spec.average_level()).abs() <= 0.5, "x={x} mean={mean}");
        }
    }

    #[test]
    fn phase_shift_sums_vanish() {
        for n in 3..200 {
            let s: f64 = (1..=n).map(|k| phase_shift(k, n).sin()).sum();
            let c: f64 = (1..=n).map(|k| phase_shift(k, n).cos()).sum();
            assert!(s.abs() < 1e-9 && c.abs() < 1e-9, "N={n}");
        }
    }

    #[test]
    fn period_must_divide_swept_dimension() {
        assert!(gen_fringe_patterns(&fringe(18, 36, 100)).is_err());
        assert!(gen_fringe_patterns(&fringe(2, 36, 72)).is_err());
        assert!(gen_fringe_patterns(&fringe(3, 3, 72)).is_err());
    }

    #[test]
    fn horizontal_fringes_vary_along_rows() {
        let mut spec = fringe(4, 4, 8);
        spec.direction = FringeDirection::Horizontal;
        spec.proj_height = 8;
        let f = &gen_fringe_patterns(&spec).unwrap()[0];
        assert_eq!(f.get(0, 3), f.get(7, 3));
        assert_ne!(f.get(0, 0), f.get(0, 1));
    }

    #[test]
    fn gray_codes_two_bits() {
        let codes: Vec<u32> = (0..4).map(gray_encode).collect();
        assert_eq!(codes, vec![0b00, 0b01, 0b11, 0b10]);
        for i in 0..1024 {
            assert_eq!(gray_decode(gray_encode(i)), i);
            assert_eq!((gray_encode(i) ^ gray_encode(i + 1)).count_ones(), 1);
        }
    }

    #[test]
    fn gray_frames_encode_period_index() {
        let fr = fringe(18, 4, 16);
        let spec = GraySetSpec::for_fringes(&fr, true);
        assert_eq!(spec.n_bits, 2);
        let set = gen_gray_code_patterns(&spec).unwrap();
        assert_eq!(set.frames.len(), 2);
        for x in 0..16 {
            let code = set.frames.iter().fold(0, |acc, f| (acc << 1) | (f.get(x, 0) == 65535) as u32);
            assert_eq!(gray_decode(code), x / 4);
        }
        assert!(set.white.data().iter().all(|v| *v == 65535));
        assert!(set.black.data().iter().all(|v| *v == 0));
        let comp = set.complement.unwrap();
        for x in 0..16 {
            assert_eq!(comp.get(x, 0) == 65535, gray_encode(2 * x / 4) & 1 == 1);
        }
    }

    #[test]
    fn default_pattern_set_has_52_frames() {
        let set = PatternSetSpec::default().build().unwrap();
        assert_eq!(set.len(), 52);
        assert_eq!(set[0].id, "fringe_vertical_19px_01");
        assert_eq!(set[18].id, "gray_vertical_00");
        assert_eq!(set[24].id, "gray_vertical_06");
        assert_eq!(set[50].id, "white");
        let mut ids: Vec<_> = set.iter().map(|p| p.id.clone()).collect();
        assert_eq!(ids, PatternSetSpec::default().ids());
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 52);
    }

    fn example_board() -> CalibBoardSpec {
        CalibBoardSpec {
            rows: 5,
            cols: 9,
            circle_diameter_mm: 20.0,
            center_distance_mm: 40.0,
            border_mm: 10.0,
            plane_width_m: 0.4,
            plane_height_m: 0.4,
            px_per_mm: 1.0,
            ..CalibBoardSpec::default()
        }
    }

    #[test]
    fn board_metric_formulas() {
        let spec = example_board();
        assert!((spec.pattern_width_m() - 0.200).abs() < 1e-12);
        assert!((spec.pattern_height_m() - 0.200).abs() < 1e-12);
        let m = spec.metrics(BoardScaling::FitToPlane).unwrap();
        assert!((m.scale - 2.0).abs() < 1e-12);
        assert!((m.circle_diameter_sim_m - 0.040).abs() < 1e-12);
        assert!((m.center_distance_sim_m - 0.080).abs() < 1e-12);
    }

    #[test]
    fn unscaled_board_must_fit() {
        let mut spec = example_board();
        assert!(spec.metrics(BoardScaling::Unscaled).is_ok());
        spec.plane_width_m = 0.1;
        assert!(matches!(spec.metrics(BoardScaling::Unscaled), Err(PatternError::PatternExceedsPlane { .. })));
        assert!(spec.metrics(BoardScaling::FitToPlane).is_ok());
    }

    #[test]
    fn board_validation() {
        let mut spec = example_board();
        spec.cols = 8;
        assert!(spec.validate().is_err());
        let mut spec = example_board();
        spec.circle_diameter_mm = 40.0;
        assert!(spec.validate().is_err());
        let mut spec = example_board();
        spec.rows = 2;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn object_points_layout() {
        let spec = example_board();
        let pts = board_object_points(&spec, BoardScaling::FitToPlane).unwrap();
        assert_eq!(pts[0], Vector3::zeros());
        assert_eq!(pts.len(), spec.circle_count());
        // Row 0 has circles on the 5 even lattice columns, row 1 starts offset by half a pitch.
        assert_eq!(pts[5], Vector3::new(40.0, 80.0, 0.0));
        assert_eq!(pts[1], Vector3::new(80.0, 0.0, 0.0));
    }

    #[test]
    fn texture_centres_match_object_points() {
        // Intensity-weighted centroids of the drawn circles, mapped back
        // through the texture-to-plane scale, must land on the object points.
        let spec = CalibBoardSpec::default();
        let (tex, m) = gen_calibration_board(&spec, BoardScaling::FitToPlane).unwrap();
        let pts = board_object_points(&spec, BoardScaling::FitToPlane).unwrap();
        let mm_per_px = m.plane_width_mm / tex.width() as f64;
        let r_px = m.circle_diameter_sim_m * 1000.0 / 2.0 / mm_per_px;
        for p in &pts {
            let cx = (p.x + m.first_center_mm[0]) / mm_per_px - 0.5;
            let cy = (p.y + m.first_center_mm[1]) / mm_per_px - 0.5;
            let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
            let reach = r_px as i64 + 3;
            for y in (cy as i64 - reach)..=(cy as i64 + reach) {
                for x in (cx as i64 - reach)..=(cx as i64 + reach) {
                    let w = 65535.0 - tex.get(x as u32, y as u32) as f64;
                    sw += w;
                    sx += w * x as f64;
                    sy += w * y as f64;
                }
            }
            assert!((sx / sw - cx).abs() < 0.01 && (sy / sw - cy).abs() < 0.01);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn metrics_do_not_depend_on_raster_density(ppm in 0.5f64..20.0) {
            let mut spec = example_board();
            let base = spec.metrics(BoardScaling::FitToPlane).unwrap();
            spec.px_per_mm = ppm;
            prop_assert_eq!(spec.metrics(BoardScaling::FitToPlane).unwrap(), base);
        }
    }
}
