//! RAW-domain filtering defenses: average and median filtering over square
//! windows, applied on the mosaic plane directly, plus their evaluation
//! against crafted adversarial RAW data.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::image::{RawImage, RgbImage};
use crate::isp::reflect;
use crate::scaling::{scale_rgb, ScalingOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Average,
    Median,
}

/// Square window of side `2 * radius + 1`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FilterWindow {
    pub kind: FilterKind,
    pub radius: usize,
}

impl FilterWindow {
    pub fn new(kind: FilterKind, radius: usize) -> Result<Self> {
        if radius == 0 {
            return Err(Error::Config("filter radius must be >= 1".into()));
        }
        Ok(FilterWindow { kind, radius })
    }
}

/// Replaces every mosaic site by the average or median of its window,
/// with mirror-padded borders. Mixes across Bayer sites on purpose; the
/// semantic damage this causes is part of what the evaluation reports.
pub fn filter_raw(raw: &RawImage, w: &FilterWindow) -> Result<RawImage> {
    let (h, width) = raw.data.dim();
    let side = 2 * w.radius + 1;
    if side > h || side > width {
        return Err(Error::Config(format!(
            "window {side}x{side} larger than image {h}x{width}"
        )));
    }
    let r = w.radius as isize;
    let mut out = Array2::zeros((h, width));
    let mut window = Vec::with_capacity(side * side);
    for i in 0..h {
        for j in 0..width {
            window.clear();
            for di in -r..=r {
                let si = reflect(i as isize + di, h);
                for dj in -r..=r {
                    let sj = reflect(j as isize + dj, width);
                    window.push(raw.data[[si, sj]]);
                }
            }
            out[[i, j]] = match w.kind {
                FilterKind::Average => window.iter().sum::<f64>() / window.len() as f64,
                FilterKind::Median => {
                    window.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    window[window.len() / 2]
                }
            };
        }
    }
    raw.with_data_clamped(out)
}

/// Outcome of replaying an attack through a filtering defense.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseReport {
    pub attack_success_before: bool,
    pub attack_success_after: bool,
    /// Whether the filtered output still classifies as the clean source did.
    /// Reported independently: a destroyed attack does not imply recovery.
    pub semantics_recovered: bool,
    pub label_target: String,
    pub label_before: String,
    pub label_after: String,
    pub label_clean: String,
}

/// Evaluates a filter against one adversarial RAW behind an ISP forward query.
pub fn evaluate_defense(
    s_r: &RawImage,
    a_r: &RawImage,
    isp: &dyn Fn(&RawImage) -> Result<RgbImage>,
    op: &ScalingOperator,
    t: &RgbImage,
    w: &FilterWindow,
    pred: &Predictor,
) -> Result<DefenseReport> {
    if s_r.data.dim() != a_r.data.dim() {
        return Err(Error::shape(format!("{:?}", s_r.data.dim()), format!("{:?}", a_r.data.dim())));
    }
    let label_target = pred.classify(t)?;
    let o_before = scale_rgb(op, &isp(a_r)?)?;
    let label_before = pred.classify(&o_before)?;
    let filtered = filter_raw(a_r, w)?;
    let o_after = scale_rgb(op, &isp(&filtered)?)?;
    let label_after = pred.classify(&o_after)?;
    let o_clean = scale_rgb(op, &isp(s_r)?)?;
    let label_clean = pred.classify(&o_clean)?;
    Ok(DefenseReport {
        attack_success_before: label_before == label_target,
        attack_success_after: label_after == label_target,
        semantics_recovered: label_after == label_clean,
        label_target,
        label_before,
        label_after,
        label_clean,
    })
}
