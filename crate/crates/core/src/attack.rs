//! Image-scaling attack engine: the two-term objective, its gradient through
//! a gradient oracle, and the Adam optimization loop with feasibility
//! clipping, in both gradient-available and proxy-gradient modes.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::image::{l2_loss_rgb, RawImage, RgbImage};
use crate::scaling::{scale_rgb, ScalingOperator};
use crate::target_isp::BlackBoxIsp;

/// Forward map RAW -> RGB plus its VJP; realized by a differentiable ISP or a
/// trained proxy model.
pub trait GradientOracle: Sync {
    /// Unclamped RGB output, same spatial size as the input.
    fn forward_unclamped(&self, raw: &RawImage) -> Result<Array3<f64>>;
    /// `J^T . grad_rgb` of the unclamped forward at `raw`.
    fn vjp(&self, raw: &RawImage, grad_rgb: &Array3<f64>) -> Result<Array2<f64>>;
}

impl GradientOracle for crate::isp::DifferentiableIsp {
    fn forward_unclamped(&self, raw: &RawImage) -> Result<Array3<f64>> {
        crate::isp::DifferentiableIsp::forward_unclamped(self, raw)
    }
    fn vjp(&self, raw: &RawImage, grad_rgb: &Array3<f64>) -> Result<Array2<f64>> {
        crate::isp::DifferentiableIsp::vjp(self, raw, grad_rgb)
    }
}

/// When the feasibility clip is applied during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Project onto `[0, 1]` after every Adam step (default).
    EveryStep,
    /// Single clip after the loop, as in the one-shot formulation.
    FinalOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Regulating weight between the raw-similarity and output-match terms.
    pub c: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Per-element MSE bound under which the attack counts as inconspicuous.
    pub success_l2_threshold: f64,
    /// Per-element MSE on (output, target) used for reporting.
    pub output_match_threshold: f64,
    pub clip_mode: ClipMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            c: 2.5,
            iterations: 1000,
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            success_l2_threshold: 0.0250,
            output_match_threshold: 0.005,
            clip_mode: ClipMode::EveryStep,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c < 0.0 {
            return Err(Error::Config(format!("c must be >= 0, got {}", self.c)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.success_l2_threshold <= 0.0 || self.output_match_threshold <= 0.0 {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Breakdown of the attack objective at one iterate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttackObjectiveReport {
    /// `(1/(m*n)) * ||h(S_R) - h(A_R)||^2`
    pub raw_term: f64,
    /// `(1/(m'*n')) * ||T - O||^2`
    pub out_term: f64,
    /// `raw_term + c * out_term`
    pub total: f64,
}

fn check_shapes(
    forward: &Array3<f64>,
    s: &RgbImage,
    t: &RgbImage,
    op: &ScalingOperator,
) -> Result<()> {
    let (h, w, _) = forward.dim();
    if s.data.dim() != forward.dim() {
        return Err(Error::shape(format!("{:?}", forward.dim()), format!("{:?}", s.data.dim())));
    }
    if (h, w) != op.src_size {
        return Err(Error::shape(format!("{:?}", op.src_size), format!("{:?}", (h, w))));
    }
    if (t.height(), t.width()) != op.dst_size {
        return Err(Error::shape(
            format!("{:?}", op.dst_size),
            format!("{:?}", (t.height(), t.width())),
        ));
    }
    Ok(())
}

fn report_from(
    a_rgb: &Array3<f64>,
    s: &RgbImage,
    t: &RgbImage,
    op: &ScalingOperator,
    raw_dims: (usize, usize),
    c: f64,
) -> Result<AttackObjectiveReport> {
    let (m, n) = raw_dims;
    let (mp, np) = op.dst_size;
    let delta1 = &s.data - a_rgb;
    let raw_term = delta1.iter().map(|d| d * d).sum::<f64>() / (m * n) as f64;
    let o = op.apply_tensor(a_rgb)?;
    let delta2 = &t.data - &o;
    let out_term = delta2.iter().map(|d| d * d).sum::<f64>() / (mp * np) as f64;
    Ok(AttackObjectiveReport { raw_term, out_term, total: raw_term + c * out_term })
}

/// Evaluates the objective at `a_r`. The scaled output uses the unclamped
/// linear map; clamping applies only to emitted images.
pub fn objective(
    oracle: &dyn GradientOracle,
    a_r: &RawImage,
    s: &RgbImage,
    t: &RgbImage,
    op: &ScalingOperator,
    c: f64,
) -> Result<AttackObjectiveReport> {
    let a_rgb = oracle.forward_unclamped(a_r)?;
    check_shapes(&a_rgb, s, t, op)?;
    report_from(&a_rgb, s, t, op, a_r.data.dim(), c)
}

/// Gradient of the objective total with respect to the RAW iterate.
pub fn objective_gradient(
    oracle: &dyn GradientOracle,
    a_r: &RawImage,
    s: &RgbImage,
    t: &RgbImage,
    op: &ScalingOperator,
    c: f64,
) -> Result<Array2<f64>> {
    let a_rgb = oracle.forward_unclamped(a_r)?;
    check_shapes(&a_rgb, s, t, op)?;
    let (m, n) = a_r.data.dim();
    let (mp, np) = op.dst_size;
    // d raw_term / dA = -(2/(m n)) (S - A)
    let mut g = (&s.data - &a_rgb).mapv(|d| -2.0 * d / (m * n) as f64);
    if c != 0.0 {
        let o = op.apply_tensor(&a_rgb)?;
        let gd = (&t.data - &o).mapv(|d| -2.0 * d / (mp * np) as f64);
        g = g + op.apply_tensor_adjoint(&gd)?.mapv(|v| c * v);
    }
    oracle.vjp(a_r, &g)
}

struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
}

impl Adam {
    fn new(shape: (usize, usize), cfg: &AttackConfig) -> Self {
        Adam {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_epsilon,
            lr: cfg.learning_rate,
        }
    }

    fn step(&mut self, x: &mut Array2<f64>, grad: &Array2<f64>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((xv, gv), (mv, vv)) in x
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *xv -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Result of one attack run.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// The iterate with the lowest objective (earliest on ties), clipped to `[0, 1]`.
    pub adversarial_raw: RawImage,
    pub trace: Vec<AttackObjectiveReport>,
    pub best_iteration: usize,
}

/// Runs the gradient attack: initialize at the clean RAW, descend the
/// objective with Adam, keep iterates feasible by clipping.
///
/// Fully deterministic given inputs; `seed` is recorded in manifests but the
/// optimization itself has no stochastic component.
pub fn run_attack(
    oracle: &dyn GradientOracle,
    s_r: &RawImage,
    t: &RgbImage,
    op: &ScalingOperator,
    cfg: &AttackConfig,
    _seed: u64,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let s = RgbImage::new(oracle.forward_unclamped(s_r)?)?;
    let mut a = s_r.data.clone();
    let mut adam = Adam::new(a.dim(), cfg);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best_total = f64::INFINITY;
    let mut best = a.clone();
    let mut best_iteration = 0;

    for k in 0..cfg.iterations {
        let iterate = RawImage::with_levels(a.clone(), s_r.pattern, s_r.black_level, s_r.white_level)
            .map_err(|_| Error::NonFiniteObjective { iteration: k })?;
        let a_rgb = oracle.forward_unclamped(&iterate)?;
        check_shapes(&a_rgb, &s, t, op)?;
        let report = report_from(&a_rgb, &s, t, op, a.dim(), cfg.c)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: k });
        }
        if report.total < best_total {
            best_total = report.total;
            best = a.clone();
            best_iteration = k;
        }
        trace.push(report);

        let grad = objective_gradient(oracle, &iterate, &s, t, op, cfg.c)?;
        adam.step(&mut a, &grad);
        if cfg.clip_mode == ClipMode::EveryStep {
            a.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
    }

    let adversarial_raw = s_r.with_data_clamped(best)?;
    Ok(AttackOutcome { adversarial_raw, trace, best_iteration })
}

/// Metrics of a proxy-crafted RAW replayed through the black-box target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferMetrics {
    pub l2_source_attack: f64,
    pub l2_raw: f64,
    pub l2_target_output: f64,
    pub pred_target: Option<String>,
    pub pred_output: Option<String>,
    pub objective1_met: Option<bool>,
}

/// Replays an adversarial RAW through the black-box target ISP and downscales.
pub fn transfer_attack(
    s_r: &RawImage,
    a_r: &RawImage,
    target: &BlackBoxIsp,
    op: &ScalingOperator,
    t: &RgbImage,
    predictor: Option<&Predictor>,
) -> Result<(RgbImage, RgbImage, TransferMetrics)> {
    if s_r.data.dim() != a_r.data.dim() {
        return Err(Error::shape(format!("{:?}", s_r.data.dim()), format!("{:?}", a_r.data.dim())));
    }
    let s = target.query(s_r)?;
    let a = target.query(a_r)?;
    let o = scale_rgb(op, &a)?;
    let (pred_target, pred_output, objective1_met) = match predictor {
        Some(p) => {
            let pt = p.classify(t)?;
            let po = p.classify(&o)?;
            let met = pt == po;
            (Some(pt), Some(po), Some(met))
        }
        None => (None, None, None),
    };
    let metrics = TransferMetrics {
        l2_source_attack: l2_loss_rgb(&s, &a)?,
        l2_raw: crate::image::l2_loss_raw(s_r, a_r)?,
        l2_target_output: l2_loss_rgb(t, &o)?,
        pred_target,
        pred_output,
        objective1_met,
    };
    Ok((a, o, metrics))
}
