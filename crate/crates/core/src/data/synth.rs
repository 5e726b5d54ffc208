//! Procedural rain streaks and clean backgrounds.
//!
//! Streaks are thresholded white noise convolved with a one-pixel-wide line
//! kernel of the requested length and orientation, then scaled by the
//! intensity. Seeds are drawn on a grid extended by the kernel radius so the
//! border is covered with the same probability as the interior.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{Image, RainField, CHANNELS};
use crate::error::{invalid, Result};

pub const MIN_STREAK_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreakParams {
    /// Degrees from vertical, in `[-45, 45]`.
    pub angle: f64,
    /// Streak length in pixels, `>= 1`.
    pub length: f64,
    /// Target fraction of covered pixels, in `[0, 1]`.
    pub density: f64,
    /// Streak brightness, in `(0, 1]`.
    pub intensity: f64,
    pub seed: u64,
}

impl Default for StreakParams {
    fn default() -> Self {
        StreakParams {
            angle: 10.0,
            length: 8.0,
            density: 0.05,
            intensity: 0.6,
            seed: 0,
        }
    }
}

impl StreakParams {
    pub fn validate(&self) -> Result<()> {
        if !(-45.0..=45.0).contains(&self.angle) {
            return Err(invalid(format!("streak angle {} outside [-45, 45]", self.angle)));
        }
        if !(self.length >= 1.0 && self.length.is_finite()) {
            return Err(invalid(format!("streak length {} must be >= 1", self.length)));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(invalid(format!("density {} outside [0, 1]", self.density)));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return Err(invalid(format!("intensity {} outside (0, 1]", self.intensity)));
        }
        Ok(())
    }
}

/// Pixel offsets of a centered line of the given length and angle.
fn line_kernel(length: f64, angle_deg: f64) -> Vec<(isize, isize)> {
    let theta = angle_deg.to_radians();
    let (dx, dy) = (theta.sin(), theta.cos());
    let half = (length - 1.0) / 2.0;
    let steps = (2.0 * length).ceil() as usize + 1;
    let mut set = BTreeSet::new();
    for i in 0..=steps {
        let t = -half + (2.0 * half) * i as f64 / steps as f64;
        set.insert(((t * dy).round() as isize, (t * dx).round() as isize));
    }
    set.into_iter().collect()
}

pub fn synthesize_streaks(height: usize, width: usize, params: &StreakParams) -> Result<RainField> {
    if height < MIN_STREAK_SIZE || width < MIN_STREAK_SIZE {
        return Err(invalid(format!(
            "streak field {}x{} below minimum {}x{}",
            height, width, MIN_STREAK_SIZE, MIN_STREAK_SIZE
        )));
    }
    params.validate()?;
    let kernel = line_kernel(params.length, params.angle);
    // P(pixel covered) = 1 - (1 - p)^K for K kernel taps and independent seeds.
    let k = kernel.len() as f64;
    let seed_prob = 1.0 - (1.0 - params.density).powf(1.0 / k);
    let radius = kernel
        .iter()
        .map(|&(y, x)| y.unsigned_abs().max(x.unsigned_abs()))
        .max()
        .unwrap_or(0) as isize;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut cover = vec![0.0f64; height * width];
    for sy in -radius..height as isize + radius {
        for sx in -radius..width as isize + radius {
            if rng.random::<f64>() >= seed_prob {
                continue;
            }
            for &(oy, ox) in &kernel {
                let (y, x) = (sy + oy, sx + ox);
                if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width {
                    cover[y as usize * width + x as usize] += 1.0;
                }
            }
        }
    }
    let plane: Vec<f64> = cover
        .iter()
        .map(|&c| params.intensity * c.min(1.0))
        .collect();
    let mut data = Vec::with_capacity(plane.len() * CHANNELS);
    for _ in 0..CHANNELS {
        data.extend_from_slice(&plane);
    }
    RainField::new(height, width, data)
}

/// Smooth, textured background: two color gradients, a few flat-colored
/// rectangles and discs, and a low-amplitude sinusoidal texture. Values stay
/// inside `[0.02, 0.85]` so composited rain remains visible.
pub fn synthesize_background(height: usize, width: usize, seed: u64) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(invalid("background must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let grad_y: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let grad_x: [f64; 3] = [rng.random(), rng.random(), rng.random()];

    struct Shape {
        disc: bool,
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        color: [f64; 3],
    }
    let n_shapes = rng.random_range(3..7);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| Shape {
            disc: rng.random_bool(0.5),
            cy: rng.random::<f64>() * height as f64,
            cx: rng.random::<f64>() * width as f64,
            ry: (0.08 + 0.25 * rng.random::<f64>()) * height as f64,
            rx: (0.08 + 0.25 * rng.random::<f64>()) * width as f64,
            color: [rng.random(), rng.random(), rng.random()],
        })
        .collect();
    let freq_y = 0.05 + 0.3 * rng.random::<f64>();
    let freq_x = 0.05 + 0.3 * rng.random::<f64>();
    let phase = rng.random::<f64>() * std::f64::consts::TAU;

    Image::from_fn(height, width, |c, y, x| {
        let (fy, fx) = (y as f64 / height as f64, x as f64 / width as f64);
        let mut v = 0.5 * base[c] + 0.25 * grad_y[c] * fy + 0.25 * grad_x[c] * fx;
        for s in &shapes {
            let (ny, nx) = ((y as f64 - s.cy) / s.ry, (x as f64 - s.cx) / s.rx);
            let inside = if s.disc {
                ny * ny + nx * nx <= 1.0
            } else {
                ny.abs() <= 1.0 && nx.abs() <= 1.0
            };
            if inside {
                v = 0.3 * v + 0.7 * s.color[c];
            }
        }
        v += 0.05 * (freq_y * y as f64 + freq_x * x as f64 + phase).sin();
        0.02 + 0.83 * v.clamp(0.0, 1.0)
    })
}
