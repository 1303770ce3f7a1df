//! Exact matrix operators for nearest/bilinear/bicubic downscaling.
//!
//! A separable scaler is the linear map `O = L . A . R`; the operator stores
//! both factors sparsely (per-output tap lists) together with its adjoint.
//! Conventions: nearest uses `src = floor(dst * scale)`; bilinear and bicubic
//! use half-pixel centers `src = (dst + 0.5) * scale - 0.5` with edge clamping;
//! bicubic is the 4-tap kernel with a = -0.75.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{RawImage, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingAlgorithm {
    Nearest,
    Bilinear,
    Bicubic,
}

impl ScalingAlgorithm {
    pub fn max_taps(self) -> usize {
        match self {
            ScalingAlgorithm::Nearest => 1,
            ScalingAlgorithm::Bilinear => 2,
            ScalingAlgorithm::Bicubic => 4,
        }
    }
}

impl std::str::FromStr for ScalingAlgorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(ScalingAlgorithm::Nearest),
            "bilinear" => Ok(ScalingAlgorithm::Bilinear),
            "bicubic" => Ok(ScalingAlgorithm::Bicubic),
            other => Err(Error::Config(format!("unknown scaling algorithm: {other}"))),
        }
    }
}

/// One sparse row: taps into the source axis with their weights.
pub type TapRow = Vec<(usize, f64)>;

/// Pair of interpolation matrices realizing one (algorithm, size pair).
#[derive(Debug, Clone)]
pub struct ScalingOperator {
    pub algorithm: ScalingAlgorithm,
    pub src_size: (usize, usize),
    pub dst_size: (usize, usize),
    /// Row operator L: one tap row per destination row (m' rows into m).
    pub row_taps: Vec<TapRow>,
    /// Column operator R (stored transposed): one tap row per destination column (n' rows into n).
    pub col_taps: Vec<TapRow>,
}

fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        A * (x * x * x - 5.0 * x * x + 8.0 * x - 4.0)
    } else {
        0.0
    }
}

/// Merges clamped duplicate indices and drops exact zeros.
fn merge_taps(mut taps: Vec<(usize, f64)>) -> TapRow {
    taps.sort_by_key(|&(i, _)| i);
    let mut out: TapRow = Vec::with_capacity(taps.len());
    for (i, w) in taps {
        if let Some(last) = out.last_mut() {
            if last.0 == i {
                last.1 += w;
                continue;
            }
        }
        out.push((i, w));
    }
    out.retain(|&(_, w)| w != 0.0);
    out
}

fn build_axis(alg: ScalingAlgorithm, src: usize, dst: usize) -> Result<Vec<TapRow>> {
    if src == 0 || dst == 0 {
        return Err(Error::ZeroDimension);
    }
    if dst > src {
        return Err(Error::Upscaling { src, dst });
    }
    let scale = src as f64 / dst as f64;
    let clamp = |i: i64| -> usize { i.clamp(0, src as i64 - 1) as usize };
    let mut rows = Vec::with_capacity(dst);
    for j in 0..dst {
        let row = match alg {
            ScalingAlgorithm::Nearest => {
                let i = ((j as f64 * scale).floor() as i64).min(src as i64 - 1);
                vec![(clamp(i), 1.0)]
            }
            ScalingAlgorithm::Bilinear => {
                let x = (j as f64 + 0.5) * scale - 0.5;
                let i0 = x.floor();
                let t = x - i0;
                let i0 = i0 as i64;
                merge_taps(vec![(clamp(i0), 1.0 - t), (clamp(i0 + 1), t)])
            }
            ScalingAlgorithm::Bicubic => {
                let x = (j as f64 + 0.5) * scale - 0.5;
                let i0 = x.floor();
                let t = x - i0;
                let i0 = i0 as i64;
                let taps = vec![
                    (clamp(i0 - 1), cubic_weight(1.0 + t)),
                    (clamp(i0), cubic_weight(t)),
                    (clamp(i0 + 1), cubic_weight(1.0 - t)),
                    (clamp(i0 + 2), cubic_weight(2.0 - t)),
                ];
                merge_taps(taps)
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Builds the `(L, R)` pair for one algorithm and size pair. Sizes are `(height, width)`.
pub fn build_operator(
    alg: ScalingAlgorithm,
    src: (usize, usize),
    dst: (usize, usize),
) -> Result<ScalingOperator> {
    let row_taps = build_axis(alg, src.0, dst.0)?;
    let col_taps = build_axis(alg, src.1, dst.1)?;
    Ok(ScalingOperator { algorithm: alg, src_size: src, dst_size: dst, row_taps, col_taps })
}

impl ScalingOperator {
    fn check_src(&self, dim: (usize, usize)) -> Result<()> {
        if dim != self.src_size {
            return Err(Error::shape(format!("{:?}", self.src_size), format!("{dim:?}")));
        }
        Ok(())
    }

    fn check_dst(&self, dim: (usize, usize)) -> Result<()> {
        if dim != self.dst_size {
            return Err(Error::shape(format!("{:?}", self.dst_size), format!("{dim:?}")));
        }
        Ok(())
    }

    /// Applies `L . plane . R` without clamping.
    pub fn apply_plane(&self, plane: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_src(plane.dim())?;
        let (mh, mw) = self.dst_size;
        // rows first: tmp = L . plane
        let mut tmp: Array2<f64> = Array2::zeros((mh, self.src_size.1));
        for (i, taps) in self.row_taps.iter().enumerate() {
            for &(si, w) in taps {
                for j in 0..self.src_size.1 {
                    tmp[[i, j]] += w * plane[[si, j]];
                }
            }
        }
        let mut out = Array2::zeros((mh, mw));
        for (j, taps) in self.col_taps.iter().enumerate() {
            for &(sj, w) in taps {
                for i in 0..mh {
                    out[[i, j]] += w * tmp[[i, sj]];
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`apply_plane`](Self::apply_plane): `L^T . g . R^T`.
    pub fn apply_plane_adjoint(&self, grad_out: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_dst(grad_out.dim())?;
        let (mh, _) = self.dst_size;
        let mut tmp: Array2<f64> = Array2::zeros((mh, self.src_size.1));
        for (j, taps) in self.col_taps.iter().enumerate() {
            for &(sj, w) in taps {
                for i in 0..mh {
                    tmp[[i, sj]] += w * grad_out[[i, j]];
                }
            }
        }
        let mut out = Array2::zeros(self.src_size);
        for (i, taps) in self.row_taps.iter().enumerate() {
            for &(si, w) in taps {
                for j in 0..self.src_size.1 {
                    out[[si, j]] += w * tmp[[i, j]];
                }
            }
        }
        Ok(out)
    }

    /// Per-channel `L . A . R` on an HxWxC tensor, without clamping.
    pub fn apply_tensor(&self, t: &Array3<f64>) -> Result<Array3<f64>> {
        let (h, w, c) = t.dim();
        self.check_src((h, w))?;
        let mut out = Array3::zeros((self.dst_size.0, self.dst_size.1, c));
        for ch in 0..c {
            let plane = t.index_axis(ndarray::Axis(2), ch).to_owned();
            let scaled = self.apply_plane(&plane)?;
            out.index_axis_mut(ndarray::Axis(2), ch).assign(&scaled);
        }
        Ok(out)
    }

    /// Per-channel adjoint on an HxWxC cotangent.
    pub fn apply_tensor_adjoint(&self, g: &Array3<f64>) -> Result<Array3<f64>> {
        let (h, w, c) = g.dim();
        self.check_dst((h, w))?;
        let mut out = Array3::zeros((self.src_size.0, self.src_size.1, c));
        for ch in 0..c {
            let plane = g.index_axis(ndarray::Axis(2), ch).to_owned();
            let scaled = self.apply_plane_adjoint(&plane)?;
            out.index_axis_mut(ndarray::Axis(2), ch).assign(&scaled);
        }
        Ok(out)
    }

    /// Dense `L` (dst_h x src_h), for tests and inspection.
    pub fn dense_l(&self) -> Array2<f64> {
        let mut l = Array2::zeros((self.dst_size.0, self.src_size.0));
        for (i, taps) in self.row_taps.iter().enumerate() {
            for &(si, w) in taps {
                l[[i, si]] += w;
            }
        }
        l
    }

    /// Dense `R` (src_w x dst_w), for tests and inspection.
    pub fn dense_r(&self) -> Array2<f64> {
        let mut r = Array2::zeros((self.src_size.1, self.dst_size.1));
        for (j, taps) in self.col_taps.iter().enumerate() {
            for &(sj, w) in taps {
                r[[sj, j]] += w;
            }
        }
        r
    }
}

/// Downscales an RGB image, clamping the result to `[0, 1]`.
pub fn scale_rgb(op: &ScalingOperator, img: &RgbImage) -> Result<RgbImage> {
    let out = op.apply_tensor(&img.data)?;
    Ok(RgbImage::new(out)?.clamped())
}

/// Downscales a RAW plane, clamping the result to `[0, 1]`.
pub fn scale_raw(op: &ScalingOperator, img: &RawImage) -> Result<RawImage> {
    let out = op.apply_plane(&img.data)?;
    RawImage::with_levels(
        out.mapv(|v| v.clamp(0.0, 1.0)),
        img.pattern,
        img.black_level,
        img.white_level,
    )
}
