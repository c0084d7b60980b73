//! Accuracy metrics for reconstructed clouds: rigid registration, sphere
//! fitting, radial error and cloud-to-mesh distances.

pub mod c2m;
pub mod icp;
pub mod kdtree;
pub mod sphere;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use c2m::{cloud_to_mesh, C2MReport};
pub use icp::{icp_register, IcpConfig, IcpResult, IcpTarget};
pub use sphere::{fit_sphere_msac, MsacConfig, SphereFit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetrologyError {
    #[error("degenerate correspondences: {0}")]
    DegenerateCorrespondences(String),
    #[error("no valid sphere model")]
    NoValidModel,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("{0} is empty")]
    EmptyInput(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialError {
    pub estimated_mm: f64,
    pub actual_mm: f64,
    pub absolute_mm: f64,
    /// `absolute / actual`.
    pub relative: f64,
}

/// `|R_est − R_act|` and its ratio to the actual radius.
pub fn radial_error(fit: &SphereFit, r_actual: f64) -> RadialError {
    let absolute = (fit.radius - r_actual).abs();
    RadialError { estimated_mm: fit.radius, actual_mm: r_actual, absolute_mm: absolute, relative: absolute / r_actual }
}

/// Equal-width histogram over `[lo, hi]`; values equal to `hi` land in the
/// last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let i = if width > 0.0 { ((v - lo) / width).floor() as isize } else { 0 };
            counts[i.clamp(0, bins as isize - 1) as usize] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo_mm,bin_hi_mm,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit(r: f64) -> SphereFit {
        SphereFit { center: [0.0; 3], radius: r, inliers: 1, total: 1, inlier_threshold: 1.0, trials: 1 }
    }

    #[test]
    fn radial_error_examples() {
        let e = radial_error(&fit(50.512), 50.0);
        assert!((e.absolute_mm - 0.512).abs() < 1e-12);
        assert!((e.relative * 100.0 - 1.024).abs() < 1e-9);
        assert_eq!(radial_error(&fit(50.0), 50.0).absolute_mm, 0.0);
        assert_eq!(radial_error(&fit(49.0), 50.0).absolute_mm, 1.0);
    }

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::build(&[0.0, 0.5, 1.0, 2.0], 0.0, 2.0, 2);
        assert_eq!(h.counts, vec![2, 2]);
        assert_eq!(h.edges, vec![0.0, 1.0, 2.0]);
        assert!(h.to_csv().starts_with("bin_lo_mm,bin_hi_mm,count\n0,1,2\n"));
    }
}
