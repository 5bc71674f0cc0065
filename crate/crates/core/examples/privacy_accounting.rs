//! ε of a subsampled Gaussian mechanism under both accountants, and the noise
//! multiplier needed for a target budget.

use dpfew::accountant::prv::{prv_report, PrvOptions};
use dpfew::accountant::{calibrate_sigma, epsilon, AccountantKind, MechanismParams, PrivacyBudget};

fn main() -> dpfew::Result<()> {
    let delta = 1e-5;
    println!("{:>6} {:>6} {:>6} {:>9} {:>9} {:>8}", "sigma", "q", "steps", "rdp_eps", "prv_eps", "prv_band");
    for (sigma, q, steps) in [(1.0, 0.01, 1000), (0.8, 0.1, 500), (2.0, 1.0, 50)] {
        let p = MechanismParams::new(sigma, q, steps);
        let rdp = epsilon(&p, delta, AccountantKind::Rdp)?;
        let prv = prv_report(&p, delta, &PrvOptions::default())?;
        println!("{sigma:>6} {q:>6} {steps:>6} {rdp:>9.4} {:>9.4} {:>8.4}", prv.epsilon, prv.slack);
    }

    // calibrate for (ε=1, δ=0.1) and report the same mechanism at δ=1e-5
    let (q, steps) = (1.0, 100);
    let sigma = calibrate_sigma(PrivacyBudget::new(1.0, 0.1)?, q, steps, AccountantKind::Rdp)?;
    let p = MechanismParams::new(sigma, q, steps);
    println!(
        "sigma for (1, 0.1) at q={q}, T={steps}: {sigma:.4}; at delta={delta}: RDP {:.3}, PRV {:.3}",
        epsilon(&p, delta, AccountantKind::Rdp)?,
        epsilon(&p, delta, AccountantKind::Prv)?
    );
    Ok(())
}
