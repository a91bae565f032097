//! Evaluation: angle detection, angular metrics, latent-space analysis,
//! action-conditioned prediction, transplantation and servoing studies.

pub mod detector;
pub mod pca;
pub mod plots;
pub mod report;
pub mod studies;

use serde::{Deserialize, Serialize};

pub use detector::{detect_angle, AngleEstimate};

/// Distance on the circle, in [0, 180].
pub fn angular_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Signed difference `a - b` wrapped to [-180, 180).
pub fn signed_angle_diff(a: f64, b: f64) -> f64 {
    (a - b + 180.0).rem_euclid(360.0) - 180.0
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }
}

impl std::fmt::Display for Stats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angular_error_examples() {
        assert_eq!(angular_error(350.0, 10.0), 20.0);
        assert_eq!(angular_error(42.0, 42.0), 0.0);
        assert_eq!(angular_error(0.0, 180.0), 180.0);
        assert_eq!(signed_angle_diff(10.0, 350.0), 20.0);
        assert_eq!(signed_angle_diff(350.0, 10.0), -20.0);
    }

    #[test]
    fn stats_of_values() {
        let s = Stats::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std, s.n), (2.0, 1.0, 2));
        assert!(Stats::of(&[]).mean.is_nan());
    }
}
