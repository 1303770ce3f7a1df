//! Reconstruction losses for proxy training: per-element content MSE, a
//! global structural-similarity term, and an optional perceptual term built
//! on a frozen, seed-initialized feature extractor.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{leaky_relu, leaky_relu_backward, Conv2d};
use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Frozen three-layer convolution stack used as a feature space for the
/// perceptual term. Parameters are drawn once from a seeded generator and
/// never trained.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    pub seed: u64,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

pub struct PerceptualCache {
    x: Array3<f64>,
    pre1: Array3<f64>,
    act1: Array3<f64>,
    pre2: Array3<f64>,
    act2: Array3<f64>,
}

impl PerceptualExtractor {
    pub const CHANNELS: usize = 8;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PerceptualExtractor {
            seed,
            conv1: Conv2d::new(3, 3, 3, Self::CHANNELS, 1, 1, &mut rng),
            conv2: Conv2d::new(3, 3, Self::CHANNELS, Self::CHANNELS, 1, 1, &mut rng),
            conv3: Conv2d::new(3, 3, Self::CHANNELS, Self::CHANNELS, 1, 1, &mut rng),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, PerceptualCache) {
        let pre1 = self.conv1.forward(x);
        let act1 = leaky_relu(&pre1);
        let pre2 = self.conv2.forward(&act1);
        let act2 = leaky_relu(&pre2);
        let out = self.conv3.forward(&act2);
        (out, PerceptualCache { x: x.clone(), pre1, act1, pre2, act2 })
    }

    pub fn input_grad(&self, cache: &PerceptualCache, gy: &Array3<f64>) -> Array3<f64> {
        let g2 = self.conv3.input_grad(&cache.act2, gy);
        let g2 = leaky_relu_backward(&cache.pre2, &g2);
        let g1 = self.conv2.input_grad(&cache.act1, &g2);
        let g1 = leaky_relu_backward(&cache.pre1, &g1);
        self.conv1.input_grad(&cache.x, &g1)
    }
}

#[derive(Debug, Clone)]
pub struct ProxyLossConfig {
    /// Weight of the (1 - SSIM) term.
    pub lambda_ssim: f64,
    /// Weight of the perceptual term; 0 disables it.
    pub lambda_perceptual: f64,
    /// SSIM regularizing constants for dynamic range 1.
    pub c1: f64,
    pub c2: f64,
    /// Per-channel scales applied to the feature difference.
    pub channel_weights: Vec<f64>,
    pub phi: PerceptualExtractor,
}

impl Default for ProxyLossConfig {
    fn default() -> Self {
        ProxyLossConfig {
            lambda_ssim: 0.25,
            lambda_perceptual: 0.0,
            c1: 0.01_f64 * 0.01,
            c2: 0.03_f64 * 0.03,
            channel_weights: vec![1.0; PerceptualExtractor::CHANNELS],
            phi: PerceptualExtractor::new(7),
        }
    }
}

impl ProxyLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ssim < 0.0 || self.lambda_perceptual < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.c1 <= 0.0 || self.c2 <= 0.0 {
            return Err(Error::Config("SSIM constants must be positive".into()));
        }
        if self.channel_weights.len() != PerceptualExtractor::CHANNELS {
            return Err(Error::Config(format!(
                "expected {} channel weights, got {}",
                PerceptualExtractor::CHANNELS,
                self.channel_weights.len()
            )));
        }
        Ok(())
    }
}

/// Whole-image statistics for one channel pair.
#[derive(Debug, Clone, Copy)]
pub struct SsimStats {
    pub mean_a: f64,
    pub mean_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov: f64,
}

impl SsimStats {
    pub fn compute(a: &[f64], b: &[f64]) -> SsimStats {
        let n = a.len() as f64;
        let mean_a = a.iter().sum::<f64>() / n;
        let mean_b = b.iter().sum::<f64>() / n;
        let mut var_a = 0.0;
        let mut var_b = 0.0;
        let mut cov = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            let dx = x - mean_a;
            let dy = y - mean_b;
            var_a += dx * dx;
            var_b += dy * dy;
            cov += dx * dy;
        }
        SsimStats {
            mean_a,
            mean_b,
            var_a: var_a / n,
            var_b: var_b / n,
            cov: cov / n,
        }
    }

    pub fn ssim(&self, c1: f64, c2: f64) -> f64 {
        let num = (2.0 * self.mean_a * self.mean_b + c1) * (2.0 * self.cov + c2);
        let den = (self.mean_a * self.mean_a + self.mean_b * self.mean_b + c1)
            * (self.var_a + self.var_b + c2);
        num / den
    }
}

fn channel_slices(x: &Array3<f64>, c: usize) -> Vec<f64> {
    x.slice(ndarray::s![.., .., c]).iter().copied().collect()
}

/// Global structural similarity: per-channel whole-image statistics,
/// averaged across channels.
pub fn ssim_arrays(a: &Array3<f64>, b: &Array3<f64>, cfg: &ProxyLossConfig) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    cfg.validate()?;
    let channels = a.dim().2;
    let mut total = 0.0;
    for c in 0..channels {
        let sa = channel_slices(a, c);
        let sb = channel_slices(b, c);
        total += SsimStats::compute(&sa, &sb).ssim(cfg.c1, cfg.c2);
    }
    Ok(total / channels as f64)
}

pub fn ssim(a: &RgbImage, b: &RgbImage, cfg: &ProxyLossConfig) -> Result<f64> {
    ssim_arrays(&a.data, &b.data, cfg)
}

/// Gradient of the channel-averaged SSIM with respect to `b`.
fn ssim_grad_wrt_b(a: &Array3<f64>, b: &Array3<f64>, cfg: &ProxyLossConfig) -> Array3<f64> {
    let (h, w, channels) = a.dim();
    let n = (h * w) as f64;
    let mut grad = Array3::zeros((h, w, channels));
    for c in 0..channels {
        let sa = channel_slices(a, c);
        let sb = channel_slices(b, c);
        let st = SsimStats::compute(&sa, &sb);
        let a1 = 2.0 * st.mean_a * st.mean_b + cfg.c1;
        let a2 = 2.0 * st.cov + cfg.c2;
        let b1 = st.mean_a * st.mean_a + st.mean_b * st.mean_b + cfg.c1;
        let b2 = st.var_a + st.var_b + cfg.c2;
        let s = (a1 * a2) / (b1 * b2);
        for (idx, g) in grad.slice_mut(ndarray::s![.., .., c]).iter_mut().enumerate() {
            let ak = sa[idx];
            let bk = sb[idx];
            // d mean_b = 1/N; d cov = (a_k - mean_a)/N; d var_b = 2(b_k - mean_b)/N
            let ds = (2.0 / n)
                * ((st.mean_a * a2 + a1 * (ak - st.mean_a)) / (b1 * b2)
                    - s * (st.mean_b / b1 + (bk - st.mean_b) / b2));
            *g = ds / channels as f64;
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossBreakdown {
    /// Per-element mean squared error.
    pub content: f64,
    /// Unweighted `1 - SSIM`.
    pub ssim_term: f64,
    /// Unweighted perceptual feature MSE.
    pub perceptual: f64,
    /// `content + lambda_ssim * ssim_term + lambda_perceptual * perceptual`.
    pub total: f64,
}

fn check_shapes(pred: &Array3<f64>, target: &Array3<f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("{:?}", target.dim()), format!("{:?}", pred.dim())));
    }
    Ok(())
}

pub fn total_loss(pred: &Array3<f64>, target: &Array3<f64>, cfg: &ProxyLossConfig) -> Result<LossBreakdown> {
    check_shapes(pred, target)?;
    cfg.validate()?;
    let n = pred.len() as f64;
    let content = pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    let ssim_term = 1.0 - ssim_arrays(target, pred, cfg)?;
    let perceptual = if cfg.lambda_perceptual > 0.0 {
        let (fp, _) = cfg.phi.forward(pred);
        let (ft, _) = cfg.phi.forward(target);
        weighted_feature_mse(&fp, &ft, &cfg.channel_weights)
    } else {
        0.0
    };
    let total = content + cfg.lambda_ssim * ssim_term + cfg.lambda_perceptual * perceptual;
    Ok(LossBreakdown { content, ssim_term, perceptual, total })
}

fn weighted_feature_mse(fp: &Array3<f64>, ft: &Array3<f64>, w: &[f64]) -> f64 {
    let m = fp.len() as f64;
    let mut acc = 0.0;
    for ((_, _, c), (&p, &t)) in fp.indexed_iter().map(|(i, _)| i).zip(fp.iter().zip(ft.iter())) {
        let d = w[c] * (p - t);
        acc += d * d;
    }
    acc / m
}

/// Loss breakdown plus the gradient of `total` with respect to `pred`.
pub fn total_loss_grad(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    cfg: &ProxyLossConfig,
) -> Result<(LossBreakdown, Array3<f64>)> {
    check_shapes(pred, target)?;
    cfg.validate()?;
    let n = pred.len() as f64;
    let content = pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    let mut grad = Array3::from_shape_fn(pred.raw_dim(), |_| 0.0);
    for ((g, &p), &t) in grad.iter_mut().zip(pred.iter()).zip(target.iter()) {
        *g = 2.0 * (p - t) / n;
    }
    let ssim_value = ssim_arrays(target, pred, cfg)?;
    let ssim_term = 1.0 - ssim_value;
    let ssim_grad = ssim_grad_wrt_b(target, pred, cfg);
    grad.zip_mut_with(&ssim_grad, |g, &sg| *g -= cfg.lambda_ssim * sg);
    let perceptual = if cfg.lambda_perceptual > 0.0 {
        let (fp, cache_p) = cfg.phi.forward(pred);
        let (ft, _) = cfg.phi.forward(target);
        let m = fp.len() as f64;
        let mut gfeat = Array3::zeros(fp.raw_dim());
        let mut acc = 0.0;
        for (idx, gf) in gfeat.indexed_iter_mut() {
            let c = idx.2;
            let wv = cfg.channel_weights[c];
            let d = wv * (fp[idx] - ft[idx]);
            acc += d * d;
            *gf = 2.0 * wv * d / m;
        }
        let gper = cfg.phi.input_grad(&cache_p, &gfeat);
        grad.zip_mut_with(&gper, |g, &pg| *g += cfg.lambda_perceptual * pg);
        acc / m
    } else {
        0.0
    };
    let total = content + cfg.lambda_ssim * ssim_term + cfg.lambda_perceptual * perceptual;
    Ok((LossBreakdown { content, ssim_term, perceptual, total }, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.gen::<f64>())
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = rand_tensor(1, 8, 8);
        let cfg = ProxyLossConfig::default();
        let s = ssim_arrays(&a, &a, &cfg).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_hand_value() {
        let a = Array3::from_elem((6, 6, 3), 0.3);
        let b = Array3::from_elem((6, 6, 3), 0.7);
        let cfg = ProxyLossConfig::default();
        let s = ssim_arrays(&a, &b, &cfg).unwrap();
        // zero variance: (2*0.21 + c1)/(0.09 + 0.49 + c1), the c2 factor cancels
        let expected = (2.0 * 0.3 * 0.7 + cfg.c1) / (0.09 + 0.49 + cfg.c1);
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let cfg = ProxyLossConfig::default();
        for seed in 0..5 {
            let a = rand_tensor(seed, 8, 8);
            let b = rand_tensor(seed + 100, 8, 8);
            let s1 = ssim_arrays(&a, &b, &cfg).unwrap();
            let s2 = ssim_arrays(&b, &a, &cfg).unwrap();
            assert!((s1 - s2).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&s1));
        }
    }

    #[test]
    fn ssim_stats_covariance_inequality() {
        for seed in 0..10 {
            let a = rand_tensor(seed, 6, 6);
            let b = rand_tensor(seed + 50, 6, 6);
            let sa: Vec<f64> = a.slice(ndarray::s![.., .., 0]).iter().copied().collect();
            let sb: Vec<f64> = b.slice(ndarray::s![.., .., 0]).iter().copied().collect();
            let st = SsimStats::compute(&sa, &sb);
            assert!(st.var_a >= 0.0 && st.var_b >= 0.0);
            assert!(st.cov.abs() <= (st.var_a.sqrt()) * (st.var_b.sqrt()) + 1e-9);
        }
    }

    #[test]
    fn total_loss_zero_for_perfect_prediction() {
        let a = rand_tensor(3, 8, 8);
        let mut cfg = ProxyLossConfig::default();
        cfg.lambda_perceptual = 0.5;
        let l = total_loss(&a, &a, &cfg).unwrap();
        assert!(l.content.abs() < 1e-15);
        assert!(l.ssim_term.abs() < 1e-12);
        assert!(l.perceptual.abs() < 1e-15);
        assert!(l.total.abs() < 1e-12);
    }

    #[test]
    fn zero_weights_reduce_to_content() {
        let a = rand_tensor(4, 8, 8);
        let b = rand_tensor(5, 8, 8);
        let mut cfg = ProxyLossConfig::default();
        cfg.lambda_ssim = 0.0;
        cfg.lambda_perceptual = 0.0;
        let l = total_loss(&a, &b, &cfg).unwrap();
        assert_eq!(l.total, l.content);
    }

    #[test]
    fn total_recombines_from_terms() {
        let a = rand_tensor(6, 8, 8);
        let b = rand_tensor(7, 8, 8);
        let mut cfg = ProxyLossConfig::default();
        cfg.lambda_perceptual = 0.3;
        let l = total_loss(&b, &a, &cfg).unwrap();
        // recompute each term independently
        let content: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64;
        let sterm = 1.0 - ssim_arrays(&a, &b, &cfg).unwrap();
        let (fa, _) = cfg.phi.forward(&a);
        let (fb, _) = cfg.phi.forward(&b);
        let per: f64 = fa
            .iter()
            .zip(fb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / fa.len() as f64;
        let expected = content + cfg.lambda_ssim * sterm + cfg.lambda_perceptual * per;
        assert!((l.total - expected).abs() < 1e-12, "{} vs {expected}", l.total);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let target = rand_tensor(8, 6, 6);
        let mut pred = rand_tensor(9, 6, 6);
        let mut cfg = ProxyLossConfig::default();
        cfg.lambda_perceptual = 0.2;
        let (l0, grad) = total_loss_grad(&pred, &target, &cfg).unwrap();
        assert!(l0.total.is_finite());
        let eps = 1e-6;
        let mut checked = 0;
        for idx in (0..pred.len()).step_by(7) {
            let orig = pred.as_slice().unwrap()[idx];
            pred.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = total_loss(&pred, &target, &cfg).unwrap().total;
            pred.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = total_loss(&pred, &target, &cfg).unwrap().total;
            pred.as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = grad.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(((fd - an) / denom).abs() < 1e-4, "idx {idx}: {fd} vs {an}");
            checked += 1;
        }
        assert!(checked >= 15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = rand_tensor(1, 8, 8);
        let b = rand_tensor(1, 6, 8);
        let cfg = ProxyLossConfig::default();
        assert!(ssim_arrays(&a, &b, &cfg).is_err());
        assert!(total_loss(&a, &b, &cfg).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = ProxyLossConfig::default();
        cfg.lambda_ssim = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = ProxyLossConfig::default();
        cfg.c1 = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ProxyLossConfig::default();
        cfg.channel_weights = vec![1.0; 3];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn perceptual_extractor_is_frozen_and_seeded() {
        let p1 = PerceptualExtractor::new(7);
        let p2 = PerceptualExtractor::new(7);
        let x = rand_tensor(11, 8, 8);
        let (f1, _) = p1.forward(&x);
        let (f2, _) = p2.forward(&x);
        assert_eq!(f1, f2);
        let p3 = PerceptualExtractor::new(8);
        let (f3, _) = p3.forward(&x);
        assert_ne!(f1, f3);
    }
}
