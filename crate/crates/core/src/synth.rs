//! Deterministic synthetic image generation: smooth, photo-like RGB scenes
//! built from gradients, Gaussian blobs and low-frequency waves. Stands in
//! for camera captures in fixtures and demos.

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::image::{mosaic, BayerPattern, RawImage, RgbImage};
use crate::Result;

/// Smooth RGB scene with per-channel structure, values in `[0.05, 0.95]`.
pub fn photo_like_rgb(height: usize, width: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_blobs = 4 + (rng.gen::<u64>() % 4) as usize;
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let cy = rng.gen::<f64>() * height as f64;
        let cx = rng.gen::<f64>() * width as f64;
        let sigma = (0.08 + 0.2 * rng.gen::<f64>()) * height.min(width) as f64;
        let amp: [f64; 3] = [
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        ];
        blobs.push((cy, cx, sigma, amp));
    }
    let grad: [f64; 3] = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
    let wave_freq = 1.0 + 2.0 * rng.gen::<f64>();
    let wave_phase = rng.gen::<f64>() * std::f64::consts::TAU;
    let base: [f64; 3] = [
        0.35 + 0.3 * rng.gen::<f64>(),
        0.35 + 0.3 * rng.gen::<f64>(),
        0.35 + 0.3 * rng.gen::<f64>(),
    ];

    let mut data = Array3::zeros((height, width, 3));
    for i in 0..height {
        for j in 0..width {
            let y = i as f64 / height as f64;
            let x = j as f64 / width as f64;
            let wave = 0.08 * (std::f64::consts::TAU * wave_freq * (x + y) + wave_phase).sin();
            for c in 0..3 {
                let mut v = base[c] + 0.25 * grad[c] * (x + y - 1.0) + wave;
                for &(cy, cx, sigma, amp) in &blobs {
                    let dy = i as f64 - cy;
                    let dx = j as f64 - cx;
                    v += 0.6 * amp[c] * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                }
                data[[i, j, c]] = v.clamp(0.05, 0.95);
            }
        }
    }
    RgbImage::new(data).unwrap()
}

/// Synthetic RAW via inverse mosaicking of a photo-like scene.
pub fn photo_like_raw(height: usize, width: usize, pattern: BayerPattern, seed: u64) -> Result<RawImage> {
    mosaic(&photo_like_rgb(height, width, seed), pattern)
}
