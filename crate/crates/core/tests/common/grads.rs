//! Finite-difference gradient checks shared by the `gradients` suite and the
//! acceptance suite: every pipeline stage, the named full pipelines, every
//! network layer type, and the full attack objective.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rawscale::attack::{objective, objective_gradient};
use rawscale::image::{BayerPattern, RawImage, RgbImage};
use rawscale::isp::{DifferentiableIsp, IspStage};
use rawscale::proxy::layers::{
    leaky_relu, leaky_relu_backward, Conv2d, ConvTranspose2d, ResidualBlock,
};
use rawscale::scaling::{build_operator, ScalingAlgorithm};

use super::{check_grad_probes, check_grad_probes3};

pub const PROBES: usize = 24;
pub const RTOL_LINEAR: f64 = 1e-4;
pub const RTOL_NONLINEAR: f64 = 1e-3;
const EPS: f64 = 1e-5;
const ATOL: f64 = 1e-8;

fn random_raw(seed: u64, h: usize, w: usize) -> RawImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // interior of [0, 1]: keeps gamma and the bilateral kernel smooth at probes
    let data = Array2::from_shape_fn((h, w), |_| 0.15 + 0.7 * rng.gen::<f64>());
    RawImage::new(data, BayerPattern::Rggb).unwrap()
}

fn random_cotangent3(seed: u64, dim: (usize, usize, usize)) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn(dim, |_| rng.gen::<f64>() * 2.0 - 1.0)
}

/// Probes `vjp` of one pipeline against central differences of `sum(fwd * ct)`.
pub fn check_isp_pipeline(isp: &DifferentiableIsp, rtol: f64, seed: u64, context: &str) {
    let raw = random_raw(seed, 12, 12);
    let out = isp.forward_unclamped(&raw).unwrap();
    let ct = random_cotangent3(seed ^ 0xA5A5, out.dim());
    let grad = isp.vjp(&raw, &ct).unwrap();
    let f = {
        let ct = ct.clone();
        let raw = raw.clone();
        move |x: &Array2<f64>| {
            let probe = RawImage::with_levels(x.clone(), raw.pattern, raw.black_level, raw.white_level)
                .unwrap();
            (&isp.forward_unclamped(&probe).unwrap() * &ct).sum()
        }
    };
    check_grad_probes(&f, &raw.data, &grad, PROBES, EPS, rtol, ATOL, seed ^ 0x33, context);
}

/// One composed pipeline per stage kind: single-stage checks are impossible
/// because a valid pipeline contains exactly one demosaic, so each raw-domain
/// or RGB-domain stage is checked around the (independently checked, linear)
/// demosaic.
pub fn check_every_isp_stage() {
    let cases: Vec<(&str, Vec<IspStage>, f64)> = vec![
        ("stage black_level", vec![IspStage::BlackLevel, IspStage::DemosaicBilinear], RTOL_LINEAR),
        (
            "stage white_balance",
            vec![IspStage::WhiteBalanceGain { r: 1.9, g: 1.0, b: 1.4 }, IspStage::DemosaicBilinear],
            RTOL_LINEAR,
        ),
        ("stage demosaic_bilinear", vec![IspStage::DemosaicBilinear], RTOL_LINEAR),
        (
            "stage bilateral_filter",
            vec![
                IspStage::DemosaicBilinear,
                IspStage::BilateralFilter { radius: 2, sigma_spatial: 1.7, sigma_range: 0.1 },
            ],
            RTOL_NONLINEAR,
        ),
        (
            "stage gamma",
            vec![IspStage::DemosaicBilinear, IspStage::Gamma { exponent: 1.0 / 2.2 }],
            RTOL_NONLINEAR,
        ),
    ];
    for (i, (name, stages, rtol)) in cases.into_iter().enumerate() {
        let isp = DifferentiableIsp::new(stages).unwrap();
        check_isp_pipeline(&isp, rtol, 100 + i as u64, name);
    }
}

/// The two full pipelines the attack targets.
pub fn check_named_pipelines() {
    check_isp_pipeline(
        &DifferentiableIsp::demosaic_only(),
        RTOL_LINEAR,
        200,
        "pipeline bilinear demosaicing",
    );
    check_isp_pipeline(
        &DifferentiableIsp::bilateral_default(),
        RTOL_NONLINEAR,
        201,
        "pipeline bilateral filtering behind bilinear demosaicing",
    );
}

fn random_feat(seed: u64, h: usize, w: usize, c: usize) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((h, w, c), |_| rng.gen::<f64>() * 2.0 - 1.0)
}

/// Input gradients of every layer type in the surrogate network.
pub fn check_every_proxy_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // plain convolution, stride 1
    let conv = Conv2d::new(3, 3, 4, 5, 1, 1, &mut rng);
    let x = random_feat(300, 8, 8, 4);
    let ct = random_cotangent3(301, conv.forward(&x).dim());
    let g = conv.input_grad(&x, &ct);
    check_grad_probes3(
        &|p| (&conv.forward(p) * &ct).sum(),
        &x,
        &g,
        PROBES,
        EPS,
        RTOL_LINEAR,
        ATOL,
        302,
        "layer conv2d stride 1",
    );

    // strided convolution (the downsampling path)
    let conv2 = Conv2d::new(3, 3, 3, 6, 2, 1, &mut rng);
    let x = random_feat(310, 8, 8, 3);
    let ct = random_cotangent3(311, conv2.forward(&x).dim());
    let g = conv2.input_grad(&x, &ct);
    check_grad_probes3(
        &|p| (&conv2.forward(p) * &ct).sum(),
        &x,
        &g,
        PROBES,
        EPS,
        RTOL_LINEAR,
        ATOL,
        312,
        "layer conv2d stride 2",
    );

    // transposed convolution (the upsampling path)
    let tconv = ConvTranspose2d::new(4, 4, 3, 2, &mut rng);
    let x = random_feat(320, 4, 4, 3);
    let ct = random_cotangent3(321, tconv.forward(&x, (8, 8)).dim());
    let g = tconv.input_grad(&x, &ct);
    check_grad_probes3(
        &|p| (&tconv.forward(p, (8, 8)) * &ct).sum(),
        &x,
        &g,
        PROBES,
        EPS,
        RTOL_LINEAR,
        ATOL,
        322,
        "layer conv_transpose2d",
    );

    // residual block, identity shortcut
    let block = ResidualBlock::identity(4, &mut rng);
    let x = random_feat(330, 7, 7, 4);
    let (out, cache) = block.forward(&x);
    let ct = random_cotangent3(331, out.dim());
    let g = block.input_grad(&cache, &ct);
    check_grad_probes3(
        &|p| (&block.forward(p).0 * &ct).sum(),
        &x,
        &g,
        PROBES,
        EPS,
        RTOL_NONLINEAR,
        ATOL,
        332,
        "layer residual identity",
    );

    // residual block, projecting shortcut
    let block = ResidualBlock::projected(3, 5, &mut rng);
    let x = random_feat(340, 7, 7, 3);
    let (out, cache) = block.forward(&x);
    let ct = random_cotangent3(341, out.dim());
    let g = block.input_grad(&cache, &ct);
    check_grad_probes3(
        &|p| (&block.forward(p).0 * &ct).sum(),
        &x,
        &g,
        PROBES,
        EPS,
        RTOL_NONLINEAR,
        ATOL,
        342,
        "layer residual projected",
    );

    // the activation itself, probed away from its kink at zero
    let mut x = random_feat(350, 6, 6, 3);
    x.mapv_inplace(|v| if v.abs() < 0.05 { 0.1 * v.signum() + v } else { v });
    let ct = random_cotangent3(351, x.dim());
    let g = leaky_relu_backward(&x, &ct);
    check_grad_probes3(
        &|p| (&leaky_relu(p) * &ct).sum(),
        &x,
        &g,
        PROBES,
        EPS,
        RTOL_NONLINEAR,
        ATOL,
        352,
        "layer leaky_relu",
    );
}

/// Full two-term objective gradient through each pipeline plus downscaling.
pub fn check_full_objective() {
    for (seed, isp, rtol, name) in [
        (400u64, DifferentiableIsp::demosaic_only(), RTOL_NONLINEAR, "objective via bilinear demosaicing"),
        (401, DifferentiableIsp::bilateral_default(), RTOL_NONLINEAR, "objective via bilateral pipeline"),
    ] {
        let s_r = random_raw(seed, 16, 16);
        let s = RgbImage::new(isp.forward_unclamped(&s_r).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF);
        let t = RgbImage::new(Array3::from_shape_fn((8, 8, 3), |_| rng.gen::<f64>())).unwrap();
        let op = build_operator(ScalingAlgorithm::Bilinear, (16, 16), (8, 8)).unwrap();
        let a_r = random_raw(seed + 1, 16, 16);
        let grad = objective_gradient(&isp, &a_r, &s, &t, &op, 2.5).unwrap();
        let f = {
            let (s, t, isp) = (s.clone(), t.clone(), isp.clone());
            let op = build_operator(ScalingAlgorithm::Bilinear, (16, 16), (8, 8)).unwrap();
            let proto = a_r.clone();
            move |x: &Array2<f64>| {
                let probe =
                    RawImage::with_levels(x.clone(), proto.pattern, proto.black_level, proto.white_level)
                        .unwrap();
                objective(&isp, &probe, &s, &t, &op, 2.5).unwrap().total
            }
        };
        check_grad_probes(&f, &a_r.data, &grad, PROBES, EPS, rtol, ATOL, seed ^ 0x77, name);
    }
}
