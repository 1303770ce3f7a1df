//! Reference black-box ISP: black-level subtraction, white-balance gains,
//! gradient-corrected 5x5 demosaic, 3x3 color-correction matrix and gamma.
//!
//! Only the forward [`BlackBoxIsp::query`] interface is exposed; attack code
//! never sees parameters or gradients. The demosaic deliberately differs from
//! the bilinear one in [`crate::isp`], so a trained proxy approximates a
//! genuinely unseen transformation.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{CfaColor, RawImage, RgbImage};
use crate::isp::reflect;

/// Stage parameters, sealed into a [`BlackBoxIsp`] at construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetIspConfig {
    #[serde(default = "default_wb")]
    pub white_balance: [f64; 3],
    #[serde(default = "default_ccm")]
    pub ccm: [[f64; 3]; 3],
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_wb() -> [f64; 3] {
    [1.6, 1.0, 1.4]
}

// mild saturation boost; every row sums to 1
fn default_ccm() -> [[f64; 3]; 3] {
    [[1.30, -0.20, -0.10], [-0.15, 1.35, -0.20], [-0.10, -0.25, 1.35]]
}

fn default_gamma() -> f64 {
    1.0 / 2.2
}

impl Default for TargetIspConfig {
    fn default() -> Self {
        TargetIspConfig { white_balance: default_wb(), ccm: default_ccm(), gamma: default_gamma() }
    }
}

/// Fixed pipeline reachable only through [`query`](Self::query).
#[derive(Debug, Clone)]
pub struct BlackBoxIsp {
    cfg: TargetIspConfig,
}

// Gradient-corrected interpolation kernels, all scaled by 1/8.
const K_G_AT_CHROMA: [[f64; 5]; 5] = [
    [0.0, 0.0, -1.0, 0.0, 0.0],
    [0.0, 0.0, 2.0, 0.0, 0.0],
    [-1.0, 2.0, 4.0, 2.0, -1.0],
    [0.0, 0.0, 2.0, 0.0, 0.0],
    [0.0, 0.0, -1.0, 0.0, 0.0],
];
const K_OPPOSITE: [[f64; 5]; 5] = [
    [0.0, 0.0, -1.5, 0.0, 0.0],
    [0.0, 2.0, 0.0, 2.0, 0.0],
    [-1.5, 0.0, 6.0, 0.0, -1.5],
    [0.0, 2.0, 0.0, 2.0, 0.0],
    [0.0, 0.0, -1.5, 0.0, 0.0],
];
const K_SAME_ROW: [[f64; 5]; 5] = [
    [0.0, 0.0, 0.5, 0.0, 0.0],
    [0.0, -1.0, 0.0, -1.0, 0.0],
    [-1.0, 4.0, 5.0, 4.0, -1.0],
    [0.0, -1.0, 0.0, -1.0, 0.0],
    [0.0, 0.0, 0.5, 0.0, 0.0],
];
const K_SAME_COL: [[f64; 5]; 5] = [
    [0.0, 0.0, -1.0, 0.0, 0.0],
    [0.0, -1.0, 4.0, -1.0, 0.0],
    [0.5, 0.0, 5.0, 0.0, 0.5],
    [0.0, -1.0, 4.0, -1.0, 0.0],
    [0.0, 0.0, -1.0, 0.0, 0.0],
];

fn convolve_at(plane: &Array2<f64>, i: usize, j: usize, kernel: &[[f64; 5]; 5]) -> f64 {
    let (h, w) = plane.dim();
    let mut acc = 0.0;
    for (di, krow) in kernel.iter().enumerate() {
        let si = reflect(i as isize + di as isize - 2, h);
        for (dj, &k) in krow.iter().enumerate() {
            if k == 0.0 {
                continue;
            }
            let sj = reflect(j as isize + dj as isize - 2, w);
            acc += k * plane[[si, sj]];
        }
    }
    acc / 8.0
}

fn demosaic_gradient_corrected(raw: &RawImage, plane: &Array2<f64>) -> Array3<f64> {
    let (h, w) = plane.dim();
    let mut out = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let site = raw.pattern.color_at(i, j);
            out[[i, j, site.channel()]] = plane[[i, j]];
            match site {
                CfaColor::R | CfaColor::B => {
                    let opposite = if site == CfaColor::R { CfaColor::B } else { CfaColor::R };
                    out[[i, j, 1]] = convolve_at(plane, i, j, &K_G_AT_CHROMA);
                    out[[i, j, opposite.channel()]] = convolve_at(plane, i, j, &K_OPPOSITE);
                }
                CfaColor::G => {
                    // rows alternate G with one chroma color; the horizontal
                    // neighbor of a G site carries it
                    let row_color = raw.pattern.color_at(i, j + 1);
                    let (row_ch, col_ch) = match row_color {
                        CfaColor::R => (0, 2),
                        CfaColor::B => (2, 0),
                        CfaColor::G => unreachable!("Bayer rows alternate G with a chroma color"),
                    };
                    out[[i, j, row_ch]] = convolve_at(plane, i, j, &K_SAME_ROW);
                    out[[i, j, col_ch]] = convolve_at(plane, i, j, &K_SAME_COL);
                }
            }
        }
    }
    out
}

impl BlackBoxIsp {
    pub fn new(cfg: TargetIspConfig) -> Result<Self> {
        if cfg.white_balance.iter().any(|&g| g <= 0.0) {
            return Err(Error::Config("white balance gains must be positive".into()));
        }
        if cfg.gamma <= 0.0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        Ok(BlackBoxIsp { cfg })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::new(serde_json::from_str(json)?)
    }

    /// Deterministic RAW -> RGB transformation. No gradient access.
    pub fn query(&self, raw: &RawImage) -> Result<RgbImage> {
        let (h, w) = raw.data.dim();
        if h % 2 != 0 || w % 2 != 0 || h < 4 || w < 4 {
            return Err(Error::OddDimensions { height: h, width: w });
        }
        // black level
        let scale = 1.0 / (raw.white_level - raw.black_level);
        let mut plane = raw.data.mapv(|v| (v - raw.black_level) * scale);
        // white balance per site color
        for ((i, j), v) in plane.indexed_iter_mut() {
            *v *= self.cfg.white_balance[raw.pattern.color_at(i, j).channel()];
        }
        // demosaic, then CCM, clamp, gamma
        let demosaiced = demosaic_gradient_corrected(raw, &plane);
        let mut out = Array3::zeros((h, w, 3));
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    let mut v = 0.0;
                    for k in 0..3 {
                        v += self.cfg.ccm[c][k] * demosaiced[[i, j, k]];
                    }
                    out[[i, j, c]] = v.clamp(0.0, 1.0).powf(self.cfg.gamma);
                }
            }
        }
        RgbImage::new(out)
    }
}

/// Query the target on each RAW, optionally tiling into fixed-size patches at
/// even offsets so the Bayer phase of every patch matches the parent image.
pub fn generate_pairs(
    isp: &BlackBoxIsp,
    raws: &[RawImage],
    patch_size: Option<usize>,
) -> Result<Vec<(RawImage, RgbImage)>> {
    if raws.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut pairs = Vec::new();
    match patch_size {
        None => {
            for raw in raws {
                let rgb = isp.query(raw)?;
                pairs.push((raw.clone(), rgb));
            }
        }
        Some(p) => {
            if p % 2 != 0 {
                return Err(Error::Config(format!("patch size must be even, got {p}")));
            }
            for raw in raws {
                let (h, w) = raw.data.dim();
                if p > h || p > w {
                    return Err(Error::Config(format!(
                        "patch size {p} exceeds image {h}x{w}"
                    )));
                }
                let mut oy = 0;
                while oy + p <= h {
                    let mut ox = 0;
                    while ox + p <= w {
                        let sub = raw
                            .data
                            .slice(ndarray::s![oy..oy + p, ox..ox + p])
                            .to_owned();
                        let patch = RawImage::with_levels(
                            sub,
                            raw.pattern,
                            raw.black_level,
                            raw.white_level,
                        )?;
                        let rgb = isp.query(&patch)?;
                        pairs.push((patch, rgb));
                        ox += p;
                    }
                    oy += p;
                }
            }
        }
    }
    Ok(pairs)
}
