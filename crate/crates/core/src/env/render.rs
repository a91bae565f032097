//! Procedural rasteriser for the 1-DOF reacher.
//!
//! The arm is a filled rectangle anchored at the image centre, rendered with
//! 4x4 supersampling. Angle 0 points along +x, angles grow counter-clockwise
//! (image rows grow downwards, so +y on screen is -row).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::stream_rng;
use crate::{Error, Result};

pub const PLAIN_BACKGROUND: [u8; 3] = [30, 60, 150];
pub const ARM_COLOR: [u8; 3] = [245, 215, 60];

const SUPERSAMPLE: usize = 4;

/// Square RGB image, row-major `[H, W, 3]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn filled(size: usize, color: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            pixels.extend_from_slice(&color);
        }
        Self { size, pixels }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.size + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Rec. 601 luma in [0, 255].
    pub fn luminance(&self) -> Vec<f64> {
        self.pixels.chunks_exact(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
    }

    pub fn to_unit_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    /// Inverse of [`Frame::to_unit_f32`] for `[H, W, 3]` data in [0, 1].
    pub fn from_unit(size: usize, data: &[f32]) -> Self {
        Self { size, pixels: data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Arm length as a fraction of half the image width.
    pub arm_length: f64,
    /// Arm width in pixels.
    pub arm_width: f64,
    pub arm_color: [u8; 3],
    pub image_size: usize,
}

impl AgentConfig {
    /// The reference agent: length 0.8, width 3 px at 32x32 (scaled with size).
    pub fn reference(image_size: usize) -> Self {
        Self { arm_length: 0.8, arm_width: 3.0 * image_size as f64 / 32.0, arm_color: ARM_COLOR, image_size }
    }

    pub fn length_px(&self) -> f64 {
        self.arm_length * self.image_size as f64 / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let half = self.image_size as f64 / 2.0;
        if !(self.arm_length > 0.0 && self.arm_length <= 1.0) {
            return Err(Error::Config(format!("arm_length {} outside (0, 1]", self.arm_length)));
        }
        if self.length_px() < 4.0 {
            return Err(Error::Config(format!("arm of {:.1} px is too short to detect", self.length_px())));
        }
        if self.arm_width <= 0.0 || self.length_px().hypot(self.arm_width / 2.0) > half {
            return Err(Error::Config("arm does not fit inside the image at every angle".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundSpec {
    Uniform { color: [u8; 3] },
    /// Low-frequency value noise, seeded.
    ProceduralTexture { seed: u64 },
    /// An image file, resized to the frame size.
    ExternalImage { path: String, seed: u64 },
}

impl BackgroundSpec {
    pub fn plain() -> Self {
        Self::Uniform { color: PLAIN_BACKGROUND }
    }

    pub fn raster(&self, size: usize) -> Result<Frame> {
        match self {
            Self::Uniform { color } => Ok(Frame::filled(size, *color)),
            Self::ProceduralTexture { seed } => Ok(value_noise(*seed, size)),
            Self::ExternalImage { path, .. } => load_background(Path::new(path), size),
        }
    }
}

fn value_noise(seed: u64, size: usize) -> Frame {
    let mut rng = stream_rng(seed, "texture", 0);
    let mut acc = vec![0.0f64; size * size * 3];
    for (grid, amp) in [(3usize, 1.0f64), (6, 0.35)] {
        let nodes: Vec<[f64; 3]> = (0..(grid + 1) * (grid + 1))
            .map(|_| [rng.gen_range(10.0..120.0), rng.gen_range(20.0..140.0), rng.gen_range(60.0..200.0)])
            .collect();
        for r in 0..size {
            let gy = (r as f64 + 0.5) / size as f64 * grid as f64;
            let y0 = (gy.floor() as usize).min(grid - 1);
            let fy = gy - y0 as f64;
            for c in 0..size {
                let gx = (c as f64 + 0.5) / size as f64 * grid as f64;
                let x0 = (gx.floor() as usize).min(grid - 1);
                let fx = gx - x0 as f64;
                let at = |y: usize, x: usize| nodes[y * (grid + 1) + x];
                for ch in 0..3 {
                    let top = at(y0, x0)[ch] * (1.0 - fx) + at(y0, x0 + 1)[ch] * fx;
                    let bot = at(y0 + 1, x0)[ch] * (1.0 - fx) + at(y0 + 1, x0 + 1)[ch] * fx;
                    acc[(r * size + c) * 3 + ch] += amp * (top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    let pixels = acc.iter().map(|v| (v / 1.35).round().clamp(0.0, 255.0) as u8).collect();
    Frame { size, pixels }
}

fn load_background(path: &Path, size: usize) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::MissingArtifact(format!("background {}: {e}", path.display())))?;
    let rgb = image::imageops::resize(&img.to_rgb8(), size as u32, size as u32, image::imageops::FilterType::Triangle);
    Ok(Frame { size, pixels: rgb.into_raw() })
}

/// Draws the arm at `angle_deg` over a copy of `background`.
pub fn draw_arm(background: &Frame, angle_deg: f64, agent: &AgentConfig) -> Frame {
    let size = background.size;
    let mut out = background.clone();
    let centre = size as f64 / 2.0;
    let (s, c) = angle_deg.to_radians().sin_cos();
    // Direction in (x, y-down) pixel coordinates.
    let (dx, dy) = (c, -s);
    let (nx, ny) = (-dy, dx);
    let len = agent.length_px();
    let half_w = agent.arm_width / 2.0;
    let reach = len.hypot(half_w) + 1.0;
    let lo = ((centre - reach).floor().max(0.0)) as usize;
    let hi = ((centre + reach).ceil() as usize).min(size);
    let n_sub = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for r in lo..hi {
        for col in lo..hi {
            let mut hits = 0usize;
            for si in 0..SUPERSAMPLE {
                let py = r as f64 + (si as f64 + 0.5) / SUPERSAMPLE as f64 - centre;
                for sj in 0..SUPERSAMPLE {
                    let px = col as f64 + (sj as f64 + 0.5) / SUPERSAMPLE as f64 - centre;
                    let along = px * dx + py * dy;
                    let across = px * nx + py * ny;
                    if (0.0..=len).contains(&along) && across.abs() <= half_w {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let cov = hits as f64 / n_sub;
            let i = (r * size + col) * 3;
            for ch in 0..3 {
                let bg = out.pixels[i + ch] as f64;
                out.pixels[i + ch] = (bg * (1.0 - cov) + agent.arm_color[ch] as f64 * cov).round() as u8;
            }
        }
    }
    out
}

/// Renders the reacher at `angle_deg`.
pub fn render(angle_deg: f64, agent: &AgentConfig, background: &BackgroundSpec) -> Result<Frame> {
    agent.validate()?;
    let bg = background.raster(agent.image_size)?;
    Ok(draw_arm(&bg, angle_deg, agent))
}
