//! Gradient-available ISP: a configurable chain of differentiable stages
//! mapping a RAW mosaic to RGB, each with a forward pass and a hand-derived
//! vector-Jacobian product.
//!
//! Stage ordering is type-checked at construction: RAW-domain stages
//! (black level, white-balance gains) strictly precede the single bilinear
//! demosaic; RGB-domain stages (bilateral filter, gamma) strictly follow.
//! Clamping to `[0, 1]` happens only on emitted images, never inside the
//! differentiated chain. All convolutional stages use mirror padding about
//! pixel centers, which preserves Bayer phase across borders.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BayerPattern, RawImage, RgbImage};

/// One differentiable pipeline stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IspStage {
    /// `(x - black) / (white - black)` using the image's stored levels.
    BlackLevel,
    /// Per-site gain keyed by the Bayer color of the site.
    WhiteBalanceGain { r: f64, g: f64, b: f64 },
    /// Bilinear interpolation of the mosaic into three channels.
    DemosaicBilinear,
    /// Edge-preserving Gaussian-weighted smoothing, per channel.
    BilateralFilter { radius: usize, sigma_spatial: f64, sigma_range: f64 },
    /// Pointwise power `sign(x) * |x|^exponent`.
    Gamma { exponent: f64 },
}

impl IspStage {
    fn is_raw_domain(&self) -> bool {
        matches!(self, IspStage::BlackLevel | IspStage::WhiteBalanceGain { .. })
    }

    fn validate(&self) -> Result<()> {
        match *self {
            IspStage::WhiteBalanceGain { r, g, b } => {
                if r <= 0.0 || g <= 0.0 || b <= 0.0 {
                    return Err(Error::Config(format!("gains must be positive: {r}, {g}, {b}")));
                }
            }
            IspStage::BilateralFilter { radius, sigma_spatial, sigma_range } => {
                if !(1..=3).contains(&radius) {
                    return Err(Error::Config(format!("bilateral radius must be 1..=3, got {radius}")));
                }
                if sigma_spatial <= 0.0 || sigma_range <= 0.0 {
                    return Err(Error::Config("bilateral sigmas must be positive".into()));
                }
            }
            IspStage::Gamma { exponent } => {
                if exponent <= 0.0 {
                    return Err(Error::Config(format!("gamma exponent must be positive, got {exponent}")));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Serializable pipeline description (the JSON config schema).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IspConfig {
    pub stages: Vec<IspStage>,
}

/// Ordered, type-checked stage list with forward evaluation and VJPs.
#[derive(Debug, Clone)]
pub struct DifferentiableIsp {
    stages: Vec<IspStage>,
}

impl DifferentiableIsp {
    pub fn new(stages: Vec<IspStage>) -> Result<Self> {
        let demosaic_count = stages
            .iter()
            .filter(|s| matches!(s, IspStage::DemosaicBilinear))
            .count();
        if demosaic_count != 1 {
            return Err(Error::Config(format!(
                "pipeline must contain exactly one demosaic stage, found {demosaic_count}"
            )));
        }
        let demosaic_pos = stages
            .iter()
            .position(|s| matches!(s, IspStage::DemosaicBilinear))
            .unwrap();
        for (i, stage) in stages.iter().enumerate() {
            stage.validate()?;
            if i < demosaic_pos && !stage.is_raw_domain() {
                return Err(Error::Config(format!("RGB-domain stage {stage:?} before demosaic")));
            }
            if i > demosaic_pos && stage.is_raw_domain() {
                return Err(Error::Config(format!("RAW-domain stage {stage:?} after demosaic")));
            }
        }
        Ok(DifferentiableIsp { stages })
    }

    pub fn from_config(cfg: &IspConfig) -> Result<Self> {
        Self::new(cfg.stages.clone())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: IspConfig = serde_json::from_str(json)?;
        Self::from_config(&cfg)
    }

    /// Demosaic-only pipeline.
    pub fn demosaic_only() -> Self {
        Self::new(vec![IspStage::DemosaicBilinear]).unwrap()
    }

    /// Bilateral filtering behind bilinear demosaicing, with default parameters.
    pub fn bilateral_default() -> Self {
        Self::new(vec![
            IspStage::DemosaicBilinear,
            IspStage::BilateralFilter { radius: 2, sigma_spatial: 1.7, sigma_range: 0.1 },
        ])
        .unwrap()
    }

    pub fn stages(&self) -> &[IspStage] {
        &self.stages
    }

    /// Full forward pass without the final clamp.
    pub fn forward_unclamped(&self, raw: &RawImage) -> Result<Array3<f64>> {
        let (acts, out) = self.forward_with_activations(raw)?;
        drop(acts);
        Ok(out)
    }

    /// Forward pass with the final `[0, 1]` clamp applied.
    pub fn forward(&self, raw: &RawImage) -> Result<RgbImage> {
        Ok(RgbImage::new(self.forward_unclamped(raw)?)?.clamped())
    }

    /// `J^T . grad_rgb` of the unclamped forward at `raw`.
    pub fn vjp(&self, raw: &RawImage, grad_rgb: &Array3<f64>) -> Result<Array2<f64>> {
        let (acts, out) = self.forward_with_activations(raw)?;
        if grad_rgb.dim() != out.dim() {
            return Err(Error::shape(format!("{:?}", out.dim()), format!("{:?}", grad_rgb.dim())));
        }
        let mut grad = Value::Rgb(grad_rgb.clone());
        for (stage, input) in self.stages.iter().zip(acts.iter()).rev() {
            grad = stage_vjp(stage, raw, input, &grad)?;
        }
        match grad {
            Value::Raw(g) => Ok(g),
            Value::Rgb(_) => unreachable!("pipeline ends in RAW domain going backwards"),
        }
    }

    /// Runs forward, returning the input of every stage plus the final output.
    fn forward_with_activations(&self, raw: &RawImage) -> Result<(Vec<Value>, Array3<f64>)> {
        let (h, w) = raw.data.dim();
        if h % 2 != 0 || w % 2 != 0 || h < 4 || w < 4 {
            return Err(Error::OddDimensions { height: h, width: w });
        }
        let mut acts = Vec::with_capacity(self.stages.len());
        let mut cur = Value::Raw(raw.data.clone());
        for stage in &self.stages {
            let next = stage_forward(stage, raw, &cur)?;
            acts.push(cur);
            cur = next;
        }
        match cur {
            Value::Rgb(out) => Ok((acts, out)),
            Value::Raw(_) => Err(Error::Config("pipeline did not produce RGB output".into())),
        }
    }
}

/// Intermediate activation: mosaic plane before demosaic, RGB tensor after.
#[derive(Debug, Clone)]
enum Value {
    Raw(Array2<f64>),
    Rgb(Array3<f64>),
}

/// Mirror about pixel centers (no edge repeat): -1 -> 1, n -> n-2.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

const G_KERNEL: [[f64; 3]; 3] = [[0.0, 0.25, 0.0], [0.25, 1.0, 0.25], [0.0, 0.25, 0.0]];
const RB_KERNEL: [[f64; 3]; 3] = [[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]];

fn demosaic_forward(plane: &Array2<f64>, pattern: BayerPattern) -> Array3<f64> {
    let (h, w) = plane.dim();
    // masked planes, one per channel
    let mut z = [Array2::zeros((h, w)), Array2::zeros((h, w)), Array2::zeros((h, w))];
    for i in 0..h {
        for j in 0..w {
            z[pattern.color_at(i, j).channel()][[i, j]] = plane[[i, j]];
        }
    }
    let mut out = Array3::zeros((h, w, 3));
    for c in 0..3 {
        let kernel = if c == 1 { &G_KERNEL } else { &RB_KERNEL };
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (di, krow) in kernel.iter().enumerate() {
                    let si = reflect(i as isize + di as isize - 1, h);
                    for (dj, &k) in krow.iter().enumerate() {
                        if k == 0.0 {
                            continue;
                        }
                        let sj = reflect(j as isize + dj as isize - 1, w);
                        acc += k * z[c][[si, sj]];
                    }
                }
                out[[i, j, c]] = acc;
            }
        }
    }
    out
}

fn demosaic_vjp(grad: &Array3<f64>, pattern: BayerPattern) -> Array2<f64> {
    let (h, w, _) = grad.dim();
    let mut gz = [Array2::zeros((h, w)), Array2::zeros((h, w)), Array2::zeros((h, w))];
    for c in 0..3 {
        let kernel = if c == 1 { &G_KERNEL } else { &RB_KERNEL };
        for i in 0..h {
            for j in 0..w {
                let g = grad[[i, j, c]];
                if g == 0.0 {
                    continue;
                }
                for (di, krow) in kernel.iter().enumerate() {
                    let si = reflect(i as isize + di as isize - 1, h);
                    for (dj, &k) in krow.iter().enumerate() {
                        if k == 0.0 {
                            continue;
                        }
                        let sj = reflect(j as isize + dj as isize - 1, w);
                        gz[c][[si, sj]] += k * g;
                    }
                }
            }
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            out[[i, j]] = gz[pattern.color_at(i, j).channel()][[i, j]];
        }
    }
    out
}

struct BilateralParams {
    radius: usize,
    spatial: Vec<Vec<f64>>,
    inv_2sr2: f64,
}

impl BilateralParams {
    fn new(radius: usize, sigma_spatial: f64, sigma_range: f64) -> Self {
        let side = 2 * radius + 1;
        let mut spatial = vec![vec![0.0; side]; side];
        for (di, row) in spatial.iter_mut().enumerate() {
            for (dj, w) in row.iter_mut().enumerate() {
                let dy = di as f64 - radius as f64;
                let dx = dj as f64 - radius as f64;
                *w = (-(dy * dy + dx * dx) / (2.0 * sigma_spatial * sigma_spatial)).exp();
            }
        }
        BilateralParams { radius, spatial, inv_2sr2: 1.0 / (2.0 * sigma_range * sigma_range) }
    }
}

fn bilateral_forward_plane(x: &Array2<f64>, p: &BilateralParams) -> Array2<f64> {
    let (h, w) = x.dim();
    let r = p.radius as isize;
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let xp = x[[i, j]];
            let mut num = 0.0;
            let mut den = 0.0;
            for di in -r..=r {
                let si = reflect(i as isize + di, h);
                for dj in -r..=r {
                    let sj = reflect(j as isize + dj, w);
                    let xq = x[[si, sj]];
                    let u = xp - xq;
                    let wgt = p.spatial[(di + r) as usize][(dj + r) as usize]
                        * (-u * u * p.inv_2sr2).exp();
                    num += wgt * xq;
                    den += wgt;
                }
            }
            out[[i, j]] = num / den;
        }
    }
    out
}

/// Exact VJP of the bilateral filter: the range weights depend on both the
/// center and the neighbor values, so every window contributes to the
/// gradient of the center pixel as well.
fn bilateral_vjp_plane(x: &Array2<f64>, g: &Array2<f64>, p: &BilateralParams) -> Array2<f64> {
    let (h, w) = x.dim();
    let r = p.radius as isize;
    let mut grad = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let gp = g[[i, j]];
            if gp == 0.0 {
                continue;
            }
            let xp = x[[i, j]];
            // first pass: denominator and output value
            let mut num = 0.0;
            let mut den = 0.0;
            for di in -r..=r {
                let si = reflect(i as isize + di, h);
                for dj in -r..=r {
                    let sj = reflect(j as isize + dj, w);
                    let xq = x[[si, sj]];
                    let u = xp - xq;
                    let wgt = p.spatial[(di + r) as usize][(dj + r) as usize]
                        * (-u * u * p.inv_2sr2).exp();
                    num += wgt * xq;
                    den += wgt;
                }
            }
            let out_p = num / den;
            // second pass: scatter contributions
            for di in -r..=r {
                let si = reflect(i as isize + di, h);
                for dj in -r..=r {
                    let sj = reflect(j as isize + dj, w);
                    let xq = x[[si, sj]];
                    let u = xp - xq;
                    let wgt = p.spatial[(di + r) as usize][(dj + r) as usize]
                        * (-u * u * p.inv_2sr2).exp();
                    let k = wgt / den;
                    // d(range weight)/du folded with quotient rule
                    let m = (wgt * u * 2.0 * p.inv_2sr2) * (xq - out_p) / den;
                    grad[[si, sj]] += gp * (k + m);
                    grad[[i, j]] -= gp * m;
                }
            }
        }
    }
    grad
}

fn gamma_forward(x: f64, exponent: f64) -> f64 {
    x.signum() * x.abs().powf(exponent)
}

fn gamma_derivative(x: f64, exponent: f64) -> f64 {
    exponent * x.abs().max(1e-12).powf(exponent - 1.0)
}

fn stage_forward(stage: &IspStage, raw: &RawImage, input: &Value) -> Result<Value> {
    match (stage, input) {
        (IspStage::BlackLevel, Value::Raw(x)) => {
            let scale = 1.0 / (raw.white_level - raw.black_level);
            Ok(Value::Raw(x.mapv(|v| (v - raw.black_level) * scale)))
        }
        (IspStage::WhiteBalanceGain { r, g, b }, Value::Raw(x)) => {
            let gains = [*r, *g, *b];
            let mut out = x.clone();
            for ((i, j), v) in out.indexed_iter_mut() {
                *v *= gains[raw.pattern.color_at(i, j).channel()];
            }
            Ok(Value::Raw(out))
        }
        (IspStage::DemosaicBilinear, Value::Raw(x)) => {
            Ok(Value::Rgb(demosaic_forward(x, raw.pattern)))
        }
        (IspStage::BilateralFilter { radius, sigma_spatial, sigma_range }, Value::Rgb(x)) => {
            let p = BilateralParams::new(*radius, *sigma_spatial, *sigma_range);
            let (h, w, _) = x.dim();
            let mut out = Array3::zeros((h, w, 3));
            for c in 0..3 {
                let plane = x.index_axis(ndarray::Axis(2), c).to_owned();
                out.index_axis_mut(ndarray::Axis(2), c)
                    .assign(&bilateral_forward_plane(&plane, &p));
            }
            Ok(Value::Rgb(out))
        }
        (IspStage::Gamma { exponent }, Value::Rgb(x)) => {
            Ok(Value::Rgb(x.mapv(|v| gamma_forward(v, *exponent))))
        }
        _ => Err(Error::Config(format!("stage {stage:?} applied in wrong domain"))),
    }
}

fn stage_vjp(stage: &IspStage, raw: &RawImage, input: &Value, grad: &Value) -> Result<Value> {
    match (stage, input, grad) {
        (IspStage::BlackLevel, Value::Raw(_), Value::Raw(g)) => {
            let scale = 1.0 / (raw.white_level - raw.black_level);
            Ok(Value::Raw(g.mapv(|v| v * scale)))
        }
        (IspStage::WhiteBalanceGain { r, g, b }, Value::Raw(_), Value::Raw(gr)) => {
            let gains = [*r, *g, *b];
            let mut out = gr.clone();
            for ((i, j), v) in out.indexed_iter_mut() {
                *v *= gains[raw.pattern.color_at(i, j).channel()];
            }
            Ok(Value::Raw(out))
        }
        (IspStage::DemosaicBilinear, Value::Raw(_), Value::Rgb(g)) => {
            Ok(Value::Raw(demosaic_vjp(g, raw.pattern)))
        }
        (IspStage::BilateralFilter { radius, sigma_spatial, sigma_range }, Value::Rgb(x), Value::Rgb(g)) => {
            let p = BilateralParams::new(*radius, *sigma_spatial, *sigma_range);
            let (h, w, _) = x.dim();
            let mut out = Array3::zeros((h, w, 3));
            for c in 0..3 {
                let plane = x.index_axis(ndarray::Axis(2), c).to_owned();
                let gplane = g.index_axis(ndarray::Axis(2), c).to_owned();
                out.index_axis_mut(ndarray::Axis(2), c)
                    .assign(&bilateral_vjp_plane(&plane, &gplane, &p));
            }
            Ok(Value::Rgb(out))
        }
        (IspStage::Gamma { exponent }, Value::Rgb(x), Value::Rgb(g)) => {
            let mut out = g.clone();
            for (v, xv) in out.iter_mut().zip(x.iter()) {
                *v *= gamma_derivative(*xv, *exponent);
            }
            Ok(Value::Rgb(out))
        }
        _ => Err(Error::Config(format!("stage {stage:?} VJP applied in wrong domain"))),
    }
}
