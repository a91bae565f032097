//! Hand-engineered arm-angle detector used as surrogate ground truth.
//!
//! Grayscale, Sobel gradient magnitude, Otsu threshold, then 3x3 morphology:
//! a closing joins the two edge lines of the thin arm into one band, and an
//! opening removes isolated noise. The tip is the edge pixel whose distance
//! to the image centre is closest to the known arm length; pixels tied with
//! the best distance (within half a pixel) are averaged on the circle to
//! reduce quantisation error.

use serde::{Deserialize, Serialize};

use crate::env::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleEstimate {
    /// Degrees in [0, 360).
    pub angle: f64,
    /// Number of tip-candidate pixels.
    pub confidence: usize,
}

const TIE_TOLERANCE: f64 = 0.5;

/// Returns `None` when no edge pixel survives the morphology.
pub fn detect_angle(frame: &Frame, arm_length_px: f64) -> Option<AngleEstimate> {
    let n = frame.size;
    let edges = opening(&closing(&threshold(&gradient_magnitude(&frame.luminance(), n)), n), n);
    let centre = n as f64 / 2.0;
    let coords = |i: usize| ((i % n) as f64 + 0.5 - centre, centre - ((i / n) as f64 + 0.5));
    let best = edges
        .iter()
        .enumerate()
        .filter(|(_, &e)| e)
        .map(|(i, _)| {
            let (x, y) = coords(i);
            (x.hypot(y) - arm_length_px).abs()
        })
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0);
    for (i, _) in edges.iter().enumerate().filter(|(_, &e)| e) {
        let (x, y) = coords(i);
        let r = x.hypot(y);
        if (r - arm_length_px).abs() <= best + TIE_TOLERANCE && r > 0.0 {
            sx += x / r;
            sy += y / r;
            count += 1;
        }
    }
    let angle = crate::env::wrap_degrees(sy.atan2(sx).to_degrees());
    Some(AngleEstimate { angle, confidence: count })
}

fn gradient_magnitude(lum: &[f64], n: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, n as isize - 1) as usize;
        let c = c.clamp(0, n as isize - 1) as usize;
        lum[r * n + c]
    };
    let mut out = vec![0.0; n * n];
    for r in 0..n as isize {
        for c in 0..n as isize {
            let gx = at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1) - at(r - 1, c - 1) - 2.0 * at(r, c - 1) - at(r + 1, c - 1);
            let gy = at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1) - at(r - 1, c - 1) - 2.0 * at(r - 1, c) - at(r - 1, c + 1);
            out[r as usize * n + c as usize] = gx.hypot(gy);
        }
    }
    out
}

/// Otsu's threshold over a 256-bin histogram of `values`.
pub fn otsu_level(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return f64::INFINITY;
    }
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[((v / max * (BINS - 1) as f64).round() as usize).min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_between) = (0, -1.0);
    for (i, &h) in hist.iter().enumerate() {
        w0 += h as f64;
        sum0 += i as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best_between {
            best_between = between;
            best = i;
        }
    }
    (best as f64 + 0.5) / (BINS - 1) as f64 * max
}

fn threshold(mag: &[f64]) -> Vec<bool> {
    // rounding in the luminance weights leaves tiny gradients on flat frames
    let level = otsu_level(mag).max(1e-6);
    mag.iter().map(|&m| m > level).collect()
}

fn morph(mask: &[bool], n: usize, erode: bool) -> Vec<bool> {
    let mut out = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            let mut all = true;
            let mut any = false;
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    // outside the image counts as background
                    let v = rr >= 0 && cc >= 0 && rr < n as isize && cc < n as isize && mask[rr as usize * n + cc as usize];
                    all &= v;
                    any |= v;
                }
            }
            out[r * n + c] = if erode { all } else { any };
        }
    }
    out
}

fn opening(mask: &[bool], n: usize) -> Vec<bool> {
    morph(&morph(mask, n, true), n, false)
}

/// Fills the gap between the two edge lines of a thin arm.
fn closing(mask: &[bool], n: usize) -> Vec<bool> {
    morph(&morph(mask, n, false), n, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn otsu_splits_bimodal_data() {
        let mut v = vec![1.0; 100];
        v.extend(vec![9.0; 50]);
        let t = otsu_level(&v);
        assert!(t > 1.0 && t < 9.0);
    }

    #[test]
    fn opening_removes_isolated_pixels_and_keeps_blocks() {
        let n = 8;
        let mut m = vec![false; n * n];
        m[2 * n + 2] = true;
        for r in 4..7 {
            for c in 4..7 {
                m[r * n + c] = true;
            }
        }
        let o = opening(&m, n);
        assert!(!o[2 * n + 2]);
        assert!(o[5 * n + 5] && o[4 * n + 4]);
    }

    #[test]
    fn blank_frame_fails() {
        let f = Frame::filled(32, [30, 60, 150]);
        assert!(detect_angle(&f, 12.8).is_none());
    }
}
