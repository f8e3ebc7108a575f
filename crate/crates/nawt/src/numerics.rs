//! Special functions, quadrature, differentiation checks, and seeded
//! random-number streams shared by the estimation and simulation code.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NawtError, Result};

/// Evaluates the Gauss series 2F1(1, 1+alpha, 2+alpha, z) for z in [0, 1).
///
/// With a = 1 the Pochhammer ratio collapses, so the series is
/// sum_{m>=0} (1+alpha)/(1+alpha+m) z^m with strictly positive terms.
pub fn hyp2f1_1b(alpha: f64, z: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&z) {
        return Err(NawtError::Domain(format!(
            "hyp2f1_1b requires 0 <= z < 1, got {z}"
        )));
    }
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(NawtError::Domain(format!(
            "hyp2f1_1b requires alpha >= 0, got {alpha}"
        )));
    }
    let mut sum = 1.0;
    let mut zp = 1.0;
    for m in 1..200_000 {
        zp *= z;
        let term = (1.0 + alpha) / (1.0 + alpha + m as f64) * zp;
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
    }
    Ok(sum)
}

/// Pseudo-log-likelihood contribution of a control unit with fitted
/// probability `pi` under the power weighting pi^alpha:
/// -int_0^pi u^alpha / (1 - u) du.
///
/// Integer alpha uses the exact antiderivative
/// sum_{j=1..alpha} pi^j / j + log(1 - pi); non-integer alpha is handled
/// by adaptive quadrature with the log singularity split off analytically.
pub fn control_loglik_term(pi: f64, alpha: f64) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(NawtError::Domain(format!(
            "control_loglik_term requires 0 < pi < 1, got {pi}"
        )));
    }
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(NawtError::Domain(format!(
            "control_loglik_term requires alpha >= 0, got {alpha}"
        )));
    }
    if alpha.fract() == 0.0 && alpha <= 64.0 {
        let a = alpha as u32;
        let mut poly = 0.0;
        let mut pj = 1.0;
        for j in 1..=a {
            pj *= pi;
            poly += pj / j as f64;
        }
        return Ok(poly + (1.0 - pi).ln());
    }
    // -int_0^pi u^a/(1-u) du, split at c so the near-1 part can have its
    // 1/v pole removed: int_c^pi u^a/(1-u) du with v = 1-u becomes
    // log((1-c)/(1-pi)) + int_{1-pi}^{1-c} ((1-v)^a - 1)/v dv.
    let c = 0.5_f64.min(pi);
    let mut integral = integrate(|u| u.powf(alpha) / (1.0 - u), 0.0, c, 1e-13)?;
    if pi > c {
        integral += ((1.0 - c) / (1.0 - pi)).ln();
        integral += integrate(
            |v| ((1.0 - v).powf(alpha) - 1.0) / v,
            1.0 - pi,
            1.0 - c,
            1e-13,
        )?;
    }
    Ok(-integral)
}

/// Pseudo-log-likelihood contribution of a treated unit: pi^alpha / alpha,
/// reducing to log(pi) at alpha = 0.
pub fn treated_loglik_term(pi: f64, alpha: f64) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(NawtError::Domain(format!(
            "treated_loglik_term requires 0 < pi < 1, got {pi}"
        )));
    }
    if alpha == 0.0 {
        Ok(pi.ln())
    } else {
        Ok(pi.powf(alpha) / alpha)
    }
}

/// Adaptive Simpson quadrature of `f` on [a, b] to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), fm)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (left, flm) = simpson(f, a, fa, m, fm);
        let (right, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth >= 60 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, flm, 0.5 * tol, depth + 1)
                + recurse(f, m, fm, b, fb, right, frm, 0.5 * tol, depth + 1)
        }
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(NawtError::Domain("integrate: non-finite bounds".into()));
    }
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    if !(fa.is_finite() && fb.is_finite()) {
        return Err(NawtError::Domain(
            "integrate: integrand non-finite at an endpoint".into(),
        ));
    }
    let (whole, fm) = simpson(&f, a, fa, b, fb);
    Ok(recurse(&f, a, fa, b, fb, whole, fm, tol, 0))
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_gradient<F: Fn(&[f64]) -> Result<f64>>(
    f: F,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; x.len()];
    let mut xx = x.to_vec();
    for i in 0..x.len() {
        xx[i] = x[i] + h;
        let up = f(&xx)?;
        xx[i] = x[i] - h;
        let down = f(&xx)?;
        xx[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// A reproducible random stream keyed by (seed, stream_id).
///
/// Identical keys yield bit-identical draw sequences regardless of how many
/// worker threads the caller uses; distinct stream ids select independent
/// ChaCha streams of the same keyed cipher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id.into());
        rng
    }
}
