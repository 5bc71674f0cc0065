//! Privacy accounting for Poisson-subsampled Gaussian mechanisms under
//! add/remove adjacency.
//!
//! Two accountants are provided: [`rdp`] (Rényi DP with the improved
//! RDP-to-DP conversion) and [`prv`] (numerical composition of the privacy
//! loss distribution). Both are stateless.

pub mod prv;
pub mod rdp;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use prv::{prv_epsilon, PrvOptions, PrvReport};
pub use rdp::{rdp_epsilon, rdp_orders};

/// Noise multiplier, sampling ratio and number of composed steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismParams {
    /// Ratio of the Gaussian noise std to the clipping norm.
    pub noise_multiplier: f64,
    /// Poisson inclusion probability per step.
    pub sample_rate: f64,
    pub steps: u64,
}

impl MechanismParams {
    pub fn new(noise_multiplier: f64, sample_rate: f64, steps: u64) -> Self {
        Self {
            noise_multiplier,
            sample_rate,
            steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_multiplier > 0.0) || !self.noise_multiplier.is_finite() {
            return Err(Error::param("noise_multiplier", format!("must be > 0, got {}", self.noise_multiplier)));
        }
        if !(0.0..=1.0).contains(&self.sample_rate) {
            return Err(Error::param("sample_rate", format!("must lie in [0, 1], got {}", self.sample_rate)));
        }
        Ok(())
    }
}

/// An `(ε, δ)` target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::param("epsilon", "must be >= 0"));
        }
        check_delta(delta)?;
        Ok(Self { epsilon, delta })
    }
}

pub(crate) fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param("delta", format!("must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccountantKind {
    Rdp,
    Prv,
}

impl AccountantKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AccountantKind::Rdp => "rdp",
            AccountantKind::Prv => "prv",
        }
    }
}

impl fmt::Display for AccountantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AccountantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rdp" => Ok(AccountantKind::Rdp),
            "prv" => Ok(AccountantKind::Prv),
            other => Err(Error::Input(format!("unknown accountant `{other}`"))),
        }
    }
}

/// ε of `params` at `delta` with the chosen accountant.
pub fn epsilon(params: &MechanismParams, delta: f64, kind: AccountantKind) -> Result<f64> {
    match kind {
        AccountantKind::Rdp => rdp_epsilon(params, delta),
        AccountantKind::Prv => prv_epsilon(params, delta),
    }
}

/// Re-express a guarantee obtained at `from_delta` at `to_delta`.
pub fn convert_delta(params: &MechanismParams, from_delta: f64, to_delta: f64, kind: AccountantKind) -> Result<f64> {
    check_delta(from_delta)?;
    check_delta(to_delta)?;
    epsilon(params, to_delta, kind)
}

pub const SIGMA_MIN: f64 = 0.1;
pub const SIGMA_MAX: f64 = 1000.0;
/// Calibrated σ reproduces the target ε to within this absolute error.
pub const CALIBRATION_TOLERANCE: f64 = 1e-3;

/// Smallest-noise σ in `[SIGMA_MIN, SIGMA_MAX]` whose ε at `target.delta` is
/// within [`CALIBRATION_TOLERANCE`] below `target.epsilon`.
///
/// Bisects in log σ; ε is non-increasing in σ.
pub fn calibrate_sigma(target: PrivacyBudget, sample_rate: f64, steps: u64, kind: AccountantKind) -> Result<f64> {
    if !(target.epsilon > 0.0) {
        return Err(Error::param("epsilon", "calibration target must be > 0"));
    }
    check_delta(target.delta)?;
    if steps == 0 {
        return Err(Error::param("steps", "calibration needs at least one step"));
    }
    if !(sample_rate > 0.0 && sample_rate <= 1.0) {
        return Err(Error::param("sample_rate", "calibration needs 0 < q <= 1"));
    }
    let eps_at = |sigma: f64| epsilon(&MechanismParams::new(sigma, sample_rate, steps), target.delta, kind);

    // PRV evaluations are costly at tiny σ; start from the RDP answer, which
    // sits close, and widen geometrically until the target is bracketed.
    let (mut lo, mut hi, mut eps_best) = match kind {
        AccountantKind::Rdp => {
            let eps_hi = eps_at(SIGMA_MAX)?;
            if eps_hi > target.epsilon {
                return Err(unreachable_target(target, eps_hi));
            }
            let eps_lo = eps_at(SIGMA_MIN)?;
            if eps_lo <= target.epsilon - CALIBRATION_TOLERANCE {
                return Err(loose_target(target, eps_lo, eps_hi));
            }
            if eps_lo <= target.epsilon {
                return Ok(SIGMA_MIN);
            }
            (SIGMA_MIN.ln(), SIGMA_MAX.ln(), eps_hi)
        }
        AccountantKind::Prv => {
            let guess = calibrate_sigma(target, sample_rate, steps, AccountantKind::Rdp)?;
            let step = 1.25f64.ln();
            let mut hi = guess.ln();
            let mut eps_hi = eps_at(guess)?;
            while eps_hi > target.epsilon {
                if hi >= SIGMA_MAX.ln() {
                    return Err(unreachable_target(target, eps_hi));
                }
                hi = (hi + step).min(SIGMA_MAX.ln());
                eps_hi = eps_at(hi.exp())?;
            }
            let mut lo = hi - step;
            loop {
                if lo <= SIGMA_MIN.ln() {
                    lo = SIGMA_MIN.ln();
                    let e = eps_at(SIGMA_MIN)?;
                    if e <= target.epsilon - CALIBRATION_TOLERANCE {
                        return Err(loose_target(target, e, eps_hi));
                    }
                    if e <= target.epsilon {
                        return Ok(SIGMA_MIN);
                    }
                    break;
                }
                let e = eps_at(lo.exp())?;
                if e > target.epsilon {
                    break;
                }
                hi = lo;
                eps_hi = e;
                lo -= step;
            }
            (lo, hi, eps_hi)
        }
    };

    for _ in 0..200 {
        if target.epsilon - eps_best <= CALIBRATION_TOLERANCE / 2.0 || hi - lo < 1e-13 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let e = eps_at(mid.exp())?;
        if e > target.epsilon {
            lo = mid;
        } else {
            hi = mid;
            eps_best = e;
        }
    }
    if (target.epsilon - eps_best).abs() > CALIBRATION_TOLERANCE {
        return Err(Error::Calibration(format!(
            "bisection stalled at σ={:.6} with ε={eps_best:.5} (target {})",
            hi.exp(),
            target.epsilon
        )));
    }
    Ok(hi.exp())
}

fn unreachable_target(target: PrivacyBudget, eps_hi: f64) -> Error {
    Error::Calibration(format!(
        "target ε={} unreachable: ε(σ={SIGMA_MAX})={eps_hi:.4} still exceeds it",
        target.epsilon
    ))
}

fn loose_target(target: PrivacyBudget, eps_lo: f64, eps_hi: f64) -> Error {
    Error::Calibration(format!(
        "target ε={} is looser than ε(σ={SIGMA_MIN})={eps_lo:.4}; bracket [{SIGMA_MIN}, {SIGMA_MAX}] gives ε in [{eps_hi:.4}, {eps_lo:.4}]",
        target.epsilon
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_or_zero_rate_is_free() {
        for kind in [AccountantKind::Rdp, AccountantKind::Prv] {
            assert_eq!(epsilon(&MechanismParams::new(1.0, 0.5, 0), 1e-5, kind).unwrap(), 0.0);
            assert_eq!(epsilon(&MechanismParams::new(1.0, 0.0, 100), 1e-5, kind).unwrap(), 0.0);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(rdp_epsilon(&MechanismParams::new(0.0, 0.5, 1), 1e-5).is_err());
        assert!(rdp_epsilon(&MechanismParams::new(1.0, 1.5, 1), 1e-5).is_err());
        assert!(prv_epsilon(&MechanismParams::new(-1.0, 0.5, 1), 1e-5).is_err());
        assert!(rdp_epsilon(&MechanismParams::new(1.0, 0.5, 1), 1.0).is_err());
    }

    #[test]
    fn convert_delta_identity() {
        let p = MechanismParams::new(1.1, 0.2, 50);
        let a = convert_delta(&p, 1e-3, 1e-3, AccountantKind::Rdp).unwrap();
        assert_eq!(a, rdp_epsilon(&p, 1e-3).unwrap());
        let b = convert_delta(&p, 1e-3, 1e-6, AccountantKind::Rdp).unwrap();
        assert!(b >= a);
    }

    #[test]
    fn calibration_round_trip_and_errors() {
        let target = PrivacyBudget::new(2.0, 1e-3).unwrap();
        let s = calibrate_sigma(target, 0.1, 300, AccountantKind::Rdp).unwrap();
        let e = rdp_epsilon(&MechanismParams::new(s, 0.1, 300), 1e-3).unwrap();
        assert!((e - 2.0).abs() <= CALIBRATION_TOLERANCE);
        assert!(e <= 2.0);
        let far = PrivacyBudget::new(1e-6, 1e-9).unwrap();
        assert!(matches!(
            calibrate_sigma(far, 1.0, 100_000, AccountantKind::Rdp),
            Err(Error::Calibration(_))
        ));
    }
}
