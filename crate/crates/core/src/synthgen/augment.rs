//! Training-time augmentation: flips, quarter-turn rotations,
//! brightness/contrast jitter and Gaussian blur.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One concrete augmentation. Applied in field order, then clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, `0..=3`.
    pub quarter_turns: u8,
    pub brightness_delta: f64,
    /// Scale about mid-grey 0.5.
    pub contrast_scale: f64,
    pub blur_sigma: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            quarter_turns: 0,
            brightness_delta: 0.0,
            contrast_scale: 1.0,
            blur_sigma: 0.0,
        }
    }
}

/// Sampling ranges for [`AugmentParams`]. The defaults are mild; they are
/// not calibrated against any reference pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub flip_prob: f64,
    pub rotate: bool,
    pub max_brightness: f64,
    pub max_contrast: f64,
    pub max_blur_sigma: f64,
    pub blur_prob: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotate: true,
            max_brightness: 0.05,
            max_contrast: 0.1,
            max_blur_sigma: 0.8,
            blur_prob: 0.3,
        }
    }
}

impl AugmentRanges {
    pub fn validate(&self) -> Result<(), String> {
        let ok = (0.0..=1.0).contains(&self.flip_prob)
            && (0.0..=1.0).contains(&self.blur_prob)
            && self.max_brightness >= 0.0
            && (0.0..1.0).contains(&self.max_contrast)
            && self.max_blur_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(format!("invalid augmentation ranges {self:?}"))
        }
    }

    pub fn sample(&self, seed: u64) -> AugmentParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hflip = rng.random::<f64>() < self.flip_prob;
        let vflip = rng.random::<f64>() < self.flip_prob;
        let quarter_turns = if self.rotate { rng.random_range(0..4u8) } else { 0 };
        let brightness_delta = if self.max_brightness > 0.0 {
            rng.random_range(-self.max_brightness..=self.max_brightness)
        } else {
            0.0
        };
        let contrast_scale = if self.max_contrast > 0.0 {
            rng.random_range(1.0 - self.max_contrast..=1.0 + self.max_contrast)
        } else {
            1.0
        };
        let blur_sigma = if self.max_blur_sigma > 0.0 && rng.random::<f64>() < self.blur_prob {
            rng.random_range(0.0..=self.max_blur_sigma)
        } else {
            0.0
        };
        AugmentParams {
            hflip,
            vflip,
            quarter_turns,
            brightness_delta,
            contrast_scale,
            blur_sigma,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.into_iter().map(|v| v / z).collect()
}

fn blur_plane(plane: &mut [f64], h: usize, w: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let xi = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    k * plane[y * w + xi]
                })
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let yi = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    k * tmp[yi * w + x]
                })
                .sum();
        }
    }
}

/// Apply `params` to a `[channels, size, size]` image.
///
/// Quarter turns require a square image. Blur uses a separable Gaussian
/// with radius `ceil(3 sigma)` and clamped borders.
pub fn augment(image: &[f32], channels: usize, size: usize, params: &AugmentParams) -> Vec<f32> {
    assert_eq!(image.len(), channels * size * size, "image is not [c, s, s]");
    let n = size;
    let mut out = vec![0f64; image.len()];
    for c in 0..channels {
        for y in 0..n {
            for x in 0..n {
                // Source coordinate for output (y, x): undo rotation, then flips.
                let (mut sy, mut sx) = (y, x);
                for _ in 0..params.quarter_turns % 4 {
                    // Counter-clockwise turn: out(y, x) = in(x, n-1-y).
                    let (ty, tx) = (sx, n - 1 - sy);
                    sy = ty;
                    sx = tx;
                }
                if params.vflip {
                    sy = n - 1 - sy;
                }
                if params.hflip {
                    sx = n - 1 - sx;
                }
                out[c * n * n + y * n + x] = image[c * n * n + sy * n + sx] as f64;
            }
        }
    }
    if params.contrast_scale != 1.0 || params.brightness_delta != 0.0 {
        for v in out.iter_mut() {
            *v = 0.5 + (*v - 0.5) * params.contrast_scale + params.brightness_delta;
        }
    }
    if params.blur_sigma > 0.0 {
        let kernel = gaussian_kernel(params.blur_sigma);
        for plane in out.chunks_mut(n * n) {
            blur_plane(plane, n, n, &kernel);
        }
    }
    out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()
}
