#![allow(dead_code)]
//! Shared helpers for the integration suites: an independent per-pixel
//! reference interpolator (no matrices) and a finite-difference gradient
//! probe checker.

pub mod grads;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rawscale::scaling::ScalingAlgorithm;

fn clampi(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

fn cubic(x: f64) -> f64 {
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

/// Samples one source axis position directly: returns (indices, weights).
fn axis_taps(alg: ScalingAlgorithm, src: usize, dst: usize, j: usize) -> Vec<(usize, f64)> {
    let scale = src as f64 / dst as f64;
    match alg {
        ScalingAlgorithm::Nearest => {
            let i = ((j as f64 * scale).floor() as i64).min(src as i64 - 1);
            vec![(clampi(i, src), 1.0)]
        }
        ScalingAlgorithm::Bilinear => {
            let x = (j as f64 + 0.5) * scale - 0.5;
            let i0 = x.floor();
            let t = x - i0;
            let i0 = i0 as i64;
            vec![(clampi(i0, src), 1.0 - t), (clampi(i0 + 1, src), t)]
        }
        ScalingAlgorithm::Bicubic => {
            let x = (j as f64 + 0.5) * scale - 0.5;
            let i0 = x.floor();
            let t = x - i0;
            let i0 = i0 as i64;
            vec![
                (clampi(i0 - 1, src), cubic(1.0 + t)),
                (clampi(i0, src), cubic(t)),
                (clampi(i0 + 1, src), cubic(1.0 - t)),
                (clampi(i0 + 2, src), cubic(2.0 - t)),
            ]
        }
    }
}

/// Direct per-output-pixel downscale of one plane, written without the
/// operator machinery: every destination pixel gathers its own taps.
pub fn reference_scale_plane(
    alg: ScalingAlgorithm,
    plane: &Array2<f64>,
    dst: (usize, usize),
) -> Array2<f64> {
    let (sh, sw) = plane.dim();
    let mut out = Array2::zeros(dst);
    for oi in 0..dst.0 {
        let rows = axis_taps(alg, sh, dst.0, oi);
        for oj in 0..dst.1 {
            let cols = axis_taps(alg, sw, dst.1, oj);
            let mut acc = 0.0;
            for &(si, wi) in &rows {
                for &(sj, wj) in &cols {
                    acc += wi * wj * plane[[si, sj]];
                }
            }
            out[[oi, oj]] = acc;
        }
    }
    out
}

/// Central finite-difference probe check of an analytic gradient.
///
/// `f` evaluates the scalar objective at a 2-D input; `grad` is the claimed
/// gradient at `x`. Probes `n_probes` positions drawn from `seed` and demands
/// relative agreement `rtol` (absolute floor `atol` guards near-zero entries).
pub fn check_grad_probes(
    f: &dyn Fn(&Array2<f64>) -> f64,
    x: &Array2<f64>,
    grad: &Array2<f64>,
    n_probes: usize,
    eps: f64,
    rtol: f64,
    atol: f64,
    seed: u64,
    context: &str,
) {
    assert_eq!(x.dim(), grad.dim(), "{context}: gradient shape mismatch");
    let (h, w) = x.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in 0..n_probes {
        let i = rng.gen_range(0..h);
        let j = rng.gen_range(0..w);
        let mut xp = x.clone();
        xp[[i, j]] = x[[i, j]] + eps;
        let fp = f(&xp);
        xp[[i, j]] = x[[i, j]] - eps;
        let fm = f(&xp);
        let fd = (fp - fm) / (2.0 * eps);
        let an = grad[[i, j]];
        let denom = fd.abs().max(an.abs());
        let err = (fd - an).abs();
        assert!(
            err <= atol || err / denom <= rtol,
            "{context}: probe {p} at ({i},{j}): fd {fd} vs analytic {an} (rel {})",
            err / denom.max(1e-300)
        );
    }
}

/// Same probe check for 3-D (h, w, c) inputs.
pub fn check_grad_probes3(
    f: &dyn Fn(&Array3<f64>) -> f64,
    x: &Array3<f64>,
    grad: &Array3<f64>,
    n_probes: usize,
    eps: f64,
    rtol: f64,
    atol: f64,
    seed: u64,
    context: &str,
) {
    assert_eq!(x.dim(), grad.dim(), "{context}: gradient shape mismatch");
    let (h, w, c) = x.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in 0..n_probes {
        let idx = [rng.gen_range(0..h), rng.gen_range(0..w), rng.gen_range(0..c)];
        let mut xp = x.clone();
        xp[idx] = x[idx] + eps;
        let fp = f(&xp);
        xp[idx] = x[idx] - eps;
        let fm = f(&xp);
        let fd = (fp - fm) / (2.0 * eps);
        let an = grad[idx];
        let denom = fd.abs().max(an.abs());
        let err = (fd - an).abs();
        assert!(
            err <= atol || err / denom <= rtol,
            "{context}: probe {p} at {idx:?}: fd {fd} vs analytic {an} (rel {})",
            err / denom.max(1e-300)
        );
    }
}
