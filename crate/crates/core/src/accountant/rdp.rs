//! Rényi-DP accounting of the Poisson-subsampled Gaussian mechanism.

use crate::error::Result;
use crate::model::log_sum_exp;

use super::{check_delta, MechanismParams};

/// Orders α used for the RDP-to-DP minimisation: 1.1, 1.25, 1.5, ..., 9.75
/// in quarter steps, every integer 2..=64, and 128, 256, 512.
pub fn rdp_orders() -> Vec<f64> {
    let mut orders = vec![1.1];
    orders.extend((1..36).map(|k| 1.0 + 0.25 * k as f64).filter(|a| a.fract() != 0.0));
    orders.extend((2..=64).map(f64::from));
    orders.extend([128.0, 256.0, 512.0]);
    orders.sort_by(f64::total_cmp);
    orders
}

/// `ln A_α` for integer α via the binomial expansion, in the log domain.
fn log_a_int(q: f64, sigma: f64, alpha: u32) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = 2.0 * sigma * sigma;
    let mut log_binom = 0.0;
    let mut terms = Vec::with_capacity(alpha as usize + 1);
    for k in 0..=alpha {
        if k > 0 {
            log_binom += f64::from(alpha - k + 1).ln() - f64::from(k).ln();
        }
        let kf = f64::from(k);
        terms.push(log_binom + kf * lq + f64::from(alpha - k) * l1q + (kf * kf - kf) / s2);
    }
    log_sum_exp(&terms)
}

/// `ln A_α` for any α > 1 by log-domain trapezoid quadrature of
/// `E_{z~N(0,σ²)}[((1-q) + q·exp((2z-1)/(2σ²)))^α]`.
///
/// The integrand is analytic and decays like a Gaussian, so the trapezoid
/// rule on a step well below both σ and σ² is accurate to rounding.
pub(crate) fn log_a_quad(q: f64, sigma: f64, alpha: f64) -> f64 {
    let s2 = sigma * sigma;
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let lo = -14.0 * sigma;
    let hi = alpha + 14.0 * sigma;
    let h = sigma.min(s2) / 12.0;
    let n = ((hi - lo) / h).ceil() as usize + 1;
    let norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let vals: Vec<f64> = (0..n)
        .map(|i| {
            let z = lo + i as f64 * h;
            let u = (2.0 * z - 1.0) / (2.0 * s2);
            let log_ratio = if q >= 1.0 { u } else { log_add_exp(l1q, lq + u) };
            -z * z / (2.0 * s2) + norm + alpha * log_ratio
        })
        .collect();
    log_sum_exp(&vals) + h.ln()
}

pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Per-step RDP of the subsampled Gaussian at order α, or `None` when the
/// computation overflows.
pub fn subsampled_gaussian_rdp(q: f64, sigma: f64, alpha: f64) -> Option<f64> {
    if q == 0.0 {
        return Some(0.0);
    }
    if q == 1.0 {
        return Some(alpha / (2.0 * sigma * sigma));
    }
    let log_a = if alpha.fract() == 0.0 && alpha <= u32::MAX as f64 {
        log_a_int(q, sigma, alpha as u32)
    } else {
        log_a_quad(q, sigma, alpha)
    };
    let r = log_a / (alpha - 1.0);
    r.is_finite().then_some(r.max(0.0))
}

/// Improved RDP-to-(ε, δ) conversion for a composed RDP curve; returns the
/// minimising `(ε, α)`.
pub fn rdp_to_dp(orders: &[f64], rdp: &[f64], delta: f64) -> (f64, f64) {
    let ld = delta.ln();
    let mut best = (f64::INFINITY, f64::NAN);
    for (&a, &r) in orders.iter().zip(rdp) {
        if !r.is_finite() {
            continue;
        }
        let eps = r + ((a - 1.0) / a).ln() - (ld + a.ln()) / (a - 1.0);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    (best.0.max(0.0), best.1)
}

/// Composed RDP curve over `orders` for `params`.
pub fn composed_rdp(params: &MechanismParams, orders: &[f64]) -> Vec<f64> {
    let t = params.steps as f64;
    orders
        .iter()
        .map(|&a| match subsampled_gaussian_rdp(params.sample_rate, params.noise_multiplier, a) {
            Some(r) => t * r,
            None => f64::INFINITY,
        })
        .collect()
}

/// ε at `delta` from the RDP accountant.
pub fn rdp_epsilon(params: &MechanismParams, delta: f64) -> Result<f64> {
    params.validate()?;
    check_delta(delta)?;
    if params.steps == 0 || params.sample_rate == 0.0 {
        return Ok(0.0);
    }
    let orders = rdp_orders();
    let rdp = composed_rdp(params, &orders);
    Ok(rdp_to_dp(&orders, &rdp, delta).0)
}
