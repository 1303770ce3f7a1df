//! Attack-success and image-quality metrics: the success predicate, the
//! pluggable predictor standing in for a deployed classifier, PSNR/SSIM
//! reporting and the c-sweep experiment driver.

use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, GradientOracle};
use crate::error::{Error, Result};
use crate::image::{l2_loss_raw, l2_loss_rgb, psnr, RawImage, RgbImage};
use crate::proxy::{ssim, ProxyLossConfig};
use crate::scaling::{build_operator, scale_rgb, ScalingAlgorithm, ScalingOperator};

/// Classifier abstraction: a prototype gallery scored by per-element MSE, or
/// an external command (image path in, label token out).
pub enum Predictor {
    PrototypeGallery { prototypes: Vec<(String, RgbImage)> },
    ExternalCommand { program: PathBuf, args: Vec<String> },
}

impl Predictor {
    pub fn gallery(prototypes: Vec<(String, RgbImage)>) -> Result<Self> {
        if prototypes.is_empty() {
            return Err(Error::Predictor("empty prototype gallery".into()));
        }
        let dim = prototypes[0].1.data.dim();
        if prototypes.iter().any(|(_, p)| p.data.dim() != dim) {
            return Err(Error::Predictor("prototypes must share one size".into()));
        }
        Ok(Predictor::PrototypeGallery { prototypes })
    }

    /// Deterministic label for an image. Gallery inputs larger than the
    /// prototypes are bilinearly downscaled first.
    pub fn classify(&self, img: &RgbImage) -> Result<String> {
        match self {
            Predictor::PrototypeGallery { prototypes } => {
                let (ph, pw, _) = prototypes[0].1.data.dim();
                let resized;
                let candidate = if (img.height(), img.width()) == (ph, pw) {
                    img
                } else {
                    let op = build_operator(
                        ScalingAlgorithm::Bilinear,
                        (img.height(), img.width()),
                        (ph, pw),
                    )?;
                    resized = scale_rgb(&op, img)?;
                    &resized
                };
                let mut best: Option<(f64, &str)> = None;
                for (label, proto) in prototypes {
                    let mse = l2_loss_rgb(candidate, proto)?;
                    // strict inequality keeps the earliest label on ties
                    if best.map_or(true, |(b, _)| mse < b) {
                        best = Some((mse, label));
                    }
                }
                Ok(best.unwrap().1.to_string())
            }
            Predictor::ExternalCommand { program, args } => {
                let dir = std::env::temp_dir();
                let path = dir.join(format!("rawscale-pred-{}.ppm", std::process::id()));
                crate::image::save_rgb(img, &path)?;
                let output = Command::new(program)
                    .args(args)
                    .arg(&path)
                    .output()
                    .map_err(|e| Error::Predictor(format!("spawn failed: {e}")))?;
                let _ = std::fs::remove_file(&path);
                if !output.status.success() {
                    return Err(Error::Predictor(format!(
                        "predictor exited with {:?}",
                        output.status.code()
                    )));
                }
                let label = String::from_utf8_lossy(&output.stdout).trim().to_string();
                if label.is_empty() {
                    return Err(Error::Predictor("predictor printed no label".into()));
                }
                Ok(label)
            }
        }
    }
}

/// Thresholds for the success predicate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VerdictThresholds {
    /// Per-element MSE bound on both (S, A) and (S_R, A_R); inclusive.
    pub l2: f64,
}

impl Default for VerdictThresholds {
    fn default() -> Self {
        VerdictThresholds { l2: 0.0250 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackVerdict {
    /// Pred(O) == Pred(T)
    pub objective1_met: bool,
    /// l2(S, A) <= threshold and l2(S_R, A_R) <= threshold
    pub objective2_met: bool,
    pub success: bool,
    pub label_target: String,
    pub label_output: String,
    pub l2_raw: f64,
    pub l2_source_attack: f64,
    pub l2_target_output: f64,
    pub psnr_source_attack: f64,
    pub ssim_target_output: f64,
}

/// Full success predicate plus quality metrics for one attack instance.
#[allow(clippy::too_many_arguments)]
pub fn verdict(
    s_r: &RawImage,
    a_r: &RawImage,
    s: &RgbImage,
    a: &RgbImage,
    t: &RgbImage,
    o: &RgbImage,
    pred: &Predictor,
    thresholds: &VerdictThresholds,
) -> Result<AttackVerdict> {
    let label_target = pred.classify(t)?;
    let label_output = pred.classify(o)?;
    let l2_raw = l2_loss_raw(s_r, a_r)?;
    let l2_source_attack = l2_loss_rgb(s, a)?;
    let objective1_met = label_target == label_output;
    let objective2_met = l2_source_attack <= thresholds.l2 && l2_raw <= thresholds.l2;
    Ok(AttackVerdict {
        objective1_met,
        objective2_met,
        success: objective1_met && objective2_met,
        label_target,
        label_output,
        l2_raw,
        l2_source_attack,
        l2_target_output: l2_loss_rgb(t, o)?,
        psnr_source_attack: psnr(s, a)?,
        ssim_target_output: ssim(t, o, &ProxyLossConfig::default())?,
    })
}

/// Attack success rate over a batch, in percent.
pub fn asr(verdicts: &[AttackVerdict]) -> Result<f64> {
    if verdicts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let successes = verdicts.iter().filter(|v| v.success).count();
    Ok(100.0 * successes as f64 / verdicts.len() as f64)
}

/// One attack instance for the c-sweep driver.
pub struct SweepInstance<'a> {
    pub oracle: &'a dyn GradientOracle,
    pub source_raw: &'a RawImage,
    pub target: &'a RgbImage,
    pub operator: &'a ScalingOperator,
    pub base_config: AttackConfig,
    pub predictor: Option<&'a Predictor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub c: f64,
    pub raw_term: f64,
    pub out_term: f64,
    pub objective1_met: Option<bool>,
}

/// Runs one attack per `c` with a shared seed; rows sorted by `c`.
pub fn c_sweep(instance: &SweepInstance, c_values: &[f64], seed: u64) -> Result<Vec<SweepRow>> {
    let mut cs = c_values.to_vec();
    cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut rows = Vec::with_capacity(cs.len());
    for &c in &cs {
        let cfg = AttackConfig { c, ..instance.base_config.clone() };
        let outcome = run_attack(
            instance.oracle,
            instance.source_raw,
            instance.target,
            instance.operator,
            &cfg,
            seed,
        )?;
        let report = crate::attack::objective(
            instance.oracle,
            &outcome.adversarial_raw,
            &RgbImage::new(instance.oracle.forward_unclamped(instance.source_raw)?)?,
            instance.target,
            instance.operator,
            c,
        )?;
        let objective1_met = match instance.predictor {
            Some(p) => {
                let a = RgbImage::new(instance.oracle.forward_unclamped(&outcome.adversarial_raw)?)?
                    .clamped();
                let o = scale_rgb(instance.operator, &a)?;
                Some(p.classify(&o)? == p.classify(instance.target)?)
            }
            None => None,
        };
        rows.push(SweepRow { c, raw_term: report.raw_term, out_term: report.out_term, objective1_met });
    }
    Ok(rows)
}
