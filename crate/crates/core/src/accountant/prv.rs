//! Privacy-random-variable accountant.
//!
//! The single-step privacy loss `Y = ln(P(x)/Q(x))`, `x ~ P`, of the
//! subsampled Gaussian is discretised on a uniform grid with a mean-preserving
//! shift, composed `T` times by raising its FFT to the `T`-th power (by
//! repeated squaring), and inverted for ε.
//!
//! Error control: the rounding error of each step lies in an interval of
//! width `h` and has zero mean, so by Hoeffding the composed rounding error
//! exceeds `η = h·sqrt(T·ln(2/δ_err)/2)` with probability at most `δ_err`.
//! Hence `δ_true(ε) ≤ δ_grid(ε − η) + δ_err`, and the reported
//! `ε = ε_grid(δ − δ_err) + η` is an upper bound. Mass above the grid is
//! treated as infinite loss, mass below is clamped upward; both are
//! pessimistic. Both the remove and the add direction are composed and the
//! larger ε is returned.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

use super::{check_delta, MechanismParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrvOptions {
    /// Additive ε error budget `η`.
    pub eps_error: f64,
    /// `δ_err` as a fraction of the queried δ.
    pub delta_error_ratio: f64,
    /// Half-width of the window around the composed mean, in standard deviations.
    pub tail_sds: f64,
    /// Grid size cap; wider loss ranges get a coarser mesh and a larger η.
    pub max_points: usize,
}

impl Default for PrvOptions {
    fn default() -> Self {
        Self {
            eps_error: 0.005,
            delta_error_ratio: 1e-3,
            tail_sds: 10.0,
            max_points: 1 << 20,
        }
    }
}

/// Result of a PRV evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrvReport {
    /// Upper bound on ε (estimate plus the discretisation bound η).
    pub epsilon: f64,
    /// ε of the discretised distribution alone, without the error terms.
    pub epsilon_estimate: f64,
    /// Documented gap allowed between this accountant and an exact one:
    /// `2η`: one η added, up to one η of rounding in the estimate. η equals
    /// `eps_error` unless the grid cap forced a coarser mesh.
    pub slack: f64,
    pub mesh: f64,
    pub grid_points: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Direction {
    /// `x ~ (1-q)N(0,σ²) + qN(1,σ²)` against `N(0,σ²)`.
    Remove,
    /// `x ~ N(0,σ²)` against the mixture.
    Add,
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn norm_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Single-step privacy loss distribution of one direction.
#[derive(Clone, Copy, Debug)]
struct LossDist {
    q: f64,
    sigma: f64,
    dir: Direction,
}

impl LossDist {
    /// `ln(1-q + q·exp((2x-1)/(2σ²)))`.
    fn log_ratio(&self, x: f64) -> f64 {
        let u = (2.0 * x - 1.0) / (2.0 * self.sigma * self.sigma);
        if self.q >= 1.0 {
            u
        } else {
            super::rdp::log_add_exp((-self.q).ln_1p(), self.q.ln() + u)
        }
    }

    /// x at which `log_ratio(x) = t`, or `None` when `t ≤ ln(1-q)`.
    fn x_of(&self, t: f64) -> Option<f64> {
        let s2 = self.sigma * self.sigma;
        if self.q >= 1.0 {
            return Some(s2 * t + 0.5);
        }
        let l1q = (-self.q).ln_1p();
        if t <= l1q {
            return None;
        }
        let inner = if t > 0.0 {
            t + (-(1.0 - self.q) * (-t).exp()).ln_1p() - self.q.ln()
        } else {
            l1q + (t - l1q).exp_m1().ln() - self.q.ln()
        };
        Some(s2 * inner + 0.5)
    }

    /// `(P(Y ≤ t), P(Y > t))`.
    fn cdf_sf(&self, t: f64) -> (f64, f64) {
        let s = self.sigma;
        match self.dir {
            Direction::Remove => match self.x_of(t) {
                None => (0.0, 1.0),
                Some(x) => {
                    let q = self.q;
                    let cdf = (1.0 - q) * norm_cdf(x / s) + q * norm_cdf((x - 1.0) / s);
                    let sf = (1.0 - q) * norm_sf(x / s) + q * norm_sf((x - 1.0) / s);
                    (cdf, sf)
                }
            },
            // Y' = -log_ratio(x) ≤ t  <=>  x ≥ x_of(-t)
            Direction::Add => match self.x_of(-t) {
                None => (1.0, 0.0),
                Some(x) => (norm_sf(x / s), norm_cdf(x / s)),
            },
        }
    }

    /// Mean and variance of Y by quadrature over x.
    fn moments(&self) -> (f64, f64) {
        let s = self.sigma;
        let lo = -16.0 * s;
        let hi = 1.0 + 16.0 * s;
        let h = s.min(s * s) / 40.0;
        let n = ((hi - lo) / h).ceil() as usize;
        let (mut m1, mut m2, mut mass) = (0.0, 0.0, 0.0);
        let norm = 1.0 / (s * (2.0 * std::f64::consts::PI).sqrt());
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let phi0 = norm * (-x * x / (2.0 * s * s)).exp();
            let (w, y) = match self.dir {
                Direction::Remove => {
                    let phi1 = norm * (-(x - 1.0) * (x - 1.0) / (2.0 * s * s)).exp();
                    ((1.0 - self.q) * phi0 + self.q * phi1, self.log_ratio(x))
                }
                Direction::Add => (phi0, -self.log_ratio(x)),
            };
            mass += w;
            m1 += w * y;
            m2 += w * y * y;
        }
        let mean = m1 / mass;
        (mean, (m2 / mass - mean * mean).max(0.0))
    }
}

/// A composed, discretised loss distribution: values `j·h + offset` for
/// `j ∈ [-n/2, n/2)`, plus an atom at +∞.
struct ComposedPld {
    values: Vec<f64>,
    probs: Vec<f64>,
    inf_mass: f64,
    /// suffix sums of p and p·e^{-y}, for y > 0 only
    first_pos: usize,
    tail_p: Vec<f64>,
    tail_pe: Vec<f64>,
}

impl ComposedPld {
    fn new(values: Vec<f64>, probs: Vec<f64>, inf_mass: f64) -> Self {
        let first_pos = values.partition_point(|&v| v <= 0.0);
        let m = values.len() - first_pos;
        let mut tail_p = vec![0.0; m + 1];
        let mut tail_pe = vec![0.0; m + 1];
        for k in (0..m).rev() {
            let (v, p) = (values[first_pos + k], probs[first_pos + k]);
            tail_p[k] = tail_p[k + 1] + p;
            tail_pe[k] = tail_pe[k + 1] + p * (-v).exp();
        }
        Self {
            values,
            probs,
            inf_mass,
            first_pos,
            tail_p,
            tail_pe,
        }
    }

    /// `δ(ε) = P(Y = ∞) + E[(1 - e^{ε - Y})₊]` for ε ≥ 0.
    fn delta(&self, eps: f64) -> f64 {
        let k = self.values[self.first_pos..].partition_point(|&v| v <= eps);
        let d = self.tail_p[k] - eps.exp() * self.tail_pe[k];
        self.inf_mass + d.max(0.0)
    }

    fn epsilon(&self, delta: f64) -> Result<f64> {
        if self.delta(0.0) <= delta {
            return Ok(0.0);
        }
        let top = *self.values.last().unwrap_or(&0.0);
        if top <= 0.0 || self.delta(top) > delta {
            return Err(Error::Resolution(format!(
                "δ={delta:e} not reached inside the loss grid (max loss {top:.3}); widen the grid (larger tail_sds or max_points)"
            )));
        }
        let (mut lo, mut hi) = (0.0, top);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.delta(mid) > delta {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-10 {
                break;
            }
        }
        Ok(hi)
    }

    fn total_mass(&self) -> f64 {
        self.probs.iter().sum::<f64>() + self.inf_mass
    }
}

/// Discretise one direction on bins `j·h`, `j ∈ [bins.0, bins.1]`, compose
/// `steps` times on a circle of `n` points and read back the window of `n`
/// bins centred on bin `center`.
fn compose(dist: LossDist, steps: u64, n: usize, h: f64, bins: (i64, i64), center: i64) -> Result<(ComposedPld, f64)> {
    let (j_lo, j_hi) = bins;
    let k_bins = (j_hi - j_lo + 1) as usize;
    let t_of = |j: i64| j as f64 * h;
    let lowest_edge = t_of(j_lo) - 0.5 * h;
    let top_edge = t_of(j_hi) + 0.5 * h;

    // CDF at every bin edge and centre, for masses and the Simpson integral
    let edges: Vec<(f64, f64)> = (0..=k_bins).map(|k| dist.cdf_sf(lowest_edge + k as f64 * h)).collect();
    let mut pmf = vec![0.0; k_bins];
    let mut integral_f = 0.0;
    for k in 0..k_bins {
        let (f_lo, s_lo) = edges[k];
        let (f_hi, s_hi) = edges[k + 1];
        pmf[k] = if f_lo < 0.5 { f_hi - f_lo } else { s_lo - s_hi }.max(0.0);
        let (f_mid, _) = dist.cdf_sf(t_of(j_lo + k as i64));
        integral_f += h / 6.0 * (f_lo + 4.0 * f_mid + f_hi);
    }
    // clamp the lower tail into the lowest bin
    pmf[0] += edges[0].0;
    let inf_mass = edges[k_bins].1;
    let finite_mass: f64 = pmf.iter().sum();
    if finite_mass <= 0.0 {
        return Err(Error::Resolution("loss distribution lies entirely outside the grid".into()));
    }

    // E[max(Y, lowest_edge) · 1{Y ≤ top}] = top·F(top) - ∫ F
    let cont_mean = top_edge * edges[k_bins].0 - integral_f;
    let disc_mean: f64 = pmf.iter().enumerate().map(|(k, p)| p * t_of(j_lo + k as i64)).sum();
    let shift = (cont_mean - disc_mean) / finite_mass;
    if shift.abs() > 0.5 * h * (1.0 + 1e-6) {
        return Err(Error::Resolution(format!(
            "mean-preserving shift {shift:e} exceeds half the mesh {h:e}"
        )));
    }

    // bin j sits at index j mod n; composition is exact modulo n·h
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); n];
    for (k, &p) in pmf.iter().enumerate() {
        let idx = (j_lo + k as i64).rem_euclid(n as i64) as usize;
        buf[idx].re += p;
    }
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for z in buf.iter_mut() {
        *z = complex_pow(*z, steps);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;

    let half = (n / 2) as i64;
    let offset = steps as f64 * shift;
    let mut values = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    for j in center - half..center + half {
        let idx = j.rem_euclid(n as i64) as usize;
        values.push(t_of(j) + offset);
        probs.push((buf[idx].re * scale).max(0.0));
    }
    let composed_inf = -(steps as f64 * (-inf_mass).ln_1p()).exp_m1();

    // mass near the window edges signals wrap-around
    let edge = n / 50;
    let edge_mass: f64 = probs[..edge].iter().chain(&probs[n - edge..]).sum();
    Ok((ComposedPld::new(values, probs, composed_inf), edge_mass))
}

fn complex_pow(mut base: Complex<f64>, mut exp: u64) -> Complex<f64> {
    let mut acc = Complex::new(1.0, 0.0);
    while exp > 0 {
        if exp & 1 == 1 {
            acc *= base;
        }
        base *= base;
        exp >>= 1;
    }
    acc
}

/// Smallest t with `P(Y > t) ≤ target` when `upper`, otherwise largest t
/// with `P(Y ≤ t) ≤ target`, by bisection.
fn tail_quantile(dist: LossDist, target: f64, upper: bool) -> f64 {
    let sign = if upper { 1.0 } else { -1.0 };
    let outside = |t: f64| {
        let (f, s) = dist.cdf_sf(sign * t);
        if upper { s } else { f }
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while outside(hi) > target && hi < 1e6 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if outside(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    sign * hi
}

/// ε estimate, error bound η, mesh and grid size for one direction.
fn epsilon_one_direction(dist: LossDist, steps: u64, delta: f64, opts: &PrvOptions) -> Result<(f64, f64, f64, usize)> {
    let t = steps as f64;
    let delta_err = delta * opts.delta_error_ratio;
    let eta_per_mesh = (t * (2.0 / delta_err).ln() / 2.0).sqrt();
    let fine_mesh = opts.eps_error / eta_per_mesh;
    let (mean, var) = dist.moments();
    let target = 1e-3 * delta / t;
    let (lo1, hi1) = (tail_quantile(dist, target, false), tail_quantile(dist, target, true));
    let mut half_width = (opts.tail_sds * (t * var).sqrt())
        .max(hi1 - mean)
        .max(mean - lo1)
        .max(1.0);
    let cap = opts.max_points.next_power_of_two().max(1024);
    loop {
        // very wide loss ranges get a coarser mesh and a proportionally larger η
        let mesh = fine_mesh.max(2.0 * half_width / cap as f64);
        let n = ((2.0 * half_width / mesh).ceil() as usize).next_power_of_two().clamp(1024, cap);
        let bins = ((lo1 / mesh).floor() as i64, (hi1 / mesh).ceil() as i64);
        let center = (t * mean / mesh).round() as i64;
        let (pld, edge_mass) = compose(dist, steps, n, mesh, bins, center)?;
        debug_assert!((pld.total_mass() - 1.0).abs() < 1e-6);
        if edge_mass > 1e-3 * delta {
            half_width *= 2.0;
            continue;
        }
        let est = pld.epsilon(delta - delta_err)?;
        return Ok((est, mesh * eta_per_mesh, mesh, n));
    }
}

/// Full PRV evaluation with explicit options.
pub fn prv_report(params: &MechanismParams, delta: f64, opts: &PrvOptions) -> Result<PrvReport> {
    params.validate()?;
    check_delta(delta)?;
    if params.steps == 0 || params.sample_rate == 0.0 {
        return Ok(PrvReport {
            epsilon: 0.0,
            epsilon_estimate: 0.0,
            slack: 0.0,
            mesh: 0.0,
            grid_points: 0,
        });
    }
    let mk = |dir| LossDist {
        q: params.sample_rate,
        sigma: params.noise_multiplier,
        dir,
    };
    let remove = epsilon_one_direction(mk(Direction::Remove), params.steps, delta, opts)?;
    // with q = 1 both directions are the same Gaussian
    let (est, eta, mesh, n) = if params.sample_rate < 1.0 {
        let add = epsilon_one_direction(mk(Direction::Add), params.steps, delta, opts)?;
        if add.0 + add.1 > remove.0 + remove.1 {
            add
        } else {
            remove
        }
    } else {
        remove
    };
    Ok(PrvReport {
        epsilon: est + eta,
        epsilon_estimate: est,
        slack: 2.0 * eta,
        mesh,
        grid_points: n,
    })
}

/// ε at `delta` from the PRV accountant with default options.
pub fn prv_epsilon(params: &MechanismParams, delta: f64) -> Result<f64> {
    Ok(prv_report(params, delta, &PrvOptions::default())?.epsilon)
}

/// Single-step discretised PMF (values, probs, inf mass) for diagnostics and tests.
pub fn single_step_pmf(params: &MechanismParams, mesh: f64, points: usize) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    params.validate()?;
    let dist = LossDist {
        q: params.sample_rate,
        sigma: params.noise_multiplier,
        dir: Direction::Remove,
    };
    let n = points.next_power_of_two();
    let half = (n / 2) as i64;
    let (pld, _) = compose(dist, 1, n, mesh, (-half, half - 1), 0)?;
    Ok((pld.values, pld.probs, pld.inf_mass))
}
