//! Two-parameter Mittag-Leffler function E_{α,θ}(w) = Σ wⁿ/Γ(αn+θ).
//!
//! Three evaluation branches are used:
//!
//! * the power series for moderate |w|, accepted only while the ratio of
//!   Σ|termₙ| to |Σ termₙ| stays small (no catastrophic cancellation);
//! * the algebraic asymptotic expansion plus the exponential pole
//!   contributions once |w|^{1/α} is large enough that the optimally
//!   truncated expansion is accurate to working precision;
//! * numerical inversion of the Laplace transform s^{α-θ}/(s^α - w) along
//!   an optimal parabolic contour (trapezoidal rule), with the residues of
//!   the poles left outside the contour added back, everywhere else.

use std::f64::consts::PI;

use num_complex::Complex64;
use libm::{lgamma as ln_gamma, tgamma as gamma};

use crate::error::{Error, Result};

/// Largest |w| for which the power series is attempted.
pub const SERIES_RADIUS: f64 = 12.0;

/// The series is rejected when Σ|termₙ| / |Σ termₙ| exceeds this.
const SERIES_MAX_AMPLIFICATION: f64 = 1.0e3;

const SERIES_MAX_TERMS: usize = 300;

/// |w|^{1/α} beyond which the asymptotic expansion is attempted.
pub const ASYMPTOTIC_ROOT: f64 = 38.0;

const LOG_MACHINE_EPS: f64 = -36.043_653_389_117_154;

/// Requested accuracy of the contour quadrature, ln(1e-15).
const LOG_CONTOUR_TOL: f64 = -34.538_776_394_910_684;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlParams {
    pub alpha: f64,
    pub theta: f64,
}

impl MlParams {
    pub fn new(alpha: f64, theta: f64) -> Result<Self> {
        let p = MlParams { alpha, theta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 2.0 && self.alpha.is_finite()) {
            return Err(Error::param(format!(
                "Mittag-Leffler order alpha must lie in (0, 2], got {}",
                self.alpha
            )));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::param(format!(
                "Mittag-Leffler parameter theta must be positive, got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

/// Evaluation strategy used for a particular argument.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Series,
    Asymptotic,
    Contour,
}

/// E_{α,θ}(w) for complex w.
pub fn ml(params: MlParams, w: Complex64) -> Result<Complex64> {
    params.validate()?;
    if !(w.re.is_finite() && w.im.is_finite()) {
        return Err(Error::param("Mittag-Leffler argument must be finite"));
    }
    if w.norm() == 0.0 {
        return Ok(Complex64::new(rgamma(params.theta), 0.0));
    }
    if w.norm() <= SERIES_RADIUS {
        if let Some(v) = series(params, w) {
            return Ok(v);
        }
    }
    if w.norm().powf(1.0 / params.alpha) >= ASYMPTOTIC_ROOT {
        if let Some(v) = asymptotic(params, w)? {
            return Ok(v);
        }
    }
    contour(params, w)
}

/// E_{α,θ}(x) for real x.
pub fn ml_real(params: MlParams, x: f64) -> Result<f64> {
    Ok(ml(params, Complex64::new(x, 0.0))?.re)
}

/// Forces a particular branch. `None` means the branch declined the argument
/// (series cancellation too strong, or asymptotic expansion not accurate).
pub fn ml_with_branch(params: MlParams, w: Complex64, branch: Branch) -> Result<Option<Complex64>> {
    params.validate()?;
    match branch {
        Branch::Series => Ok(series(params, w)),
        Branch::Asymptotic => asymptotic(params, w),
        Branch::Contour => contour(params, w).map(Some),
    }
}

/// t·E_{α,2}(-μ t^α), the mode response to a unit velocity.
pub fn kernel_te(alpha: f64, mu: f64, t: f64) -> Result<f64> {
    kernel_moment(alpha, mu, t, 0)
}

/// Repeated integrals of the kernel: order 0 gives t·E_{α,2}(-μt^α),
/// order j gives t^{1+j}·E_{α,2+j}(-μt^α) = ∫₀ᵗ (order j-1).
pub fn kernel_moment(alpha: f64, mu: f64, t: f64, order: u32) -> Result<f64> {
    if !(mu > 0.0) || !(t >= 0.0) {
        return Err(Error::param(format!(
            "kernel needs mu > 0 and t >= 0 (mu = {mu}, t = {t})"
        )));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let p = MlParams::new(alpha, 2.0 + order as f64)?;
    Ok(t.powi(1 + order as i32) * ml_real(p, -mu * t.powf(alpha))?)
}

/// 1/Γ(x), valid also where Γ overflows or has poles.
pub(crate) fn rgamma(x: f64) -> f64 {
    if x <= 0.0 && x == x.floor() {
        return 0.0;
    }
    if x == x.floor() && x <= 30.0 {
        // Exact factorials keep 1/Γ(n) exact for small n.
        return 1.0 / (1..x as u64).map(|k| k as f64).product::<f64>();
    }
    if x > 170.0 {
        return (-ln_gamma(x)).exp();
    }
    1.0 / gamma(x)
}

fn series_sum(params: MlParams, w: Complex64) -> (Complex64, f64) {
    let mut sum = Complex64::new(0.0, 0.0);
    let mut abs_sum = 0.0;
    let mut pow = Complex64::new(1.0, 0.0);
    let mut small_run = 0;
    for n in 0..SERIES_MAX_TERMS {
        let term = pow * rgamma(params.alpha * n as f64 + params.theta);
        sum += term;
        abs_sum += term.norm();
        if term.norm() <= 1e-17 * sum.norm().max(1e-300) {
            small_run += 1;
            if small_run >= 3 {
                break;
            }
        } else {
            small_run = 0;
        }
        pow *= w;
    }
    (sum, abs_sum)
}

fn series(params: MlParams, w: Complex64) -> Option<Complex64> {
    let (sum, abs_sum) = series_sum(params, w);
    if sum.norm() > 0.0 && abs_sum / sum.norm() <= SERIES_MAX_AMPLIFICATION {
        Some(sum)
    } else {
        None
    }
}

/// Poles s of s^{α-θ}/(s^α - w) on the principal sheet.
fn principal_poles(alpha: f64, w: Complex64) -> Vec<Complex64> {
    let arg = w.arg();
    let kmin = (-alpha / 2.0 - arg / (2.0 * PI)).ceil() as i64;
    let kmax = (alpha / 2.0 - arg / (2.0 * PI)).floor() as i64;
    let r = w.norm().powf(1.0 / alpha);
    (kmin..=kmax)
        .map(|k| Complex64::from_polar(r, (arg + 2.0 * PI * k as f64) / alpha))
        .collect()
}

fn residue_term(params: MlParams, s: Complex64) -> Result<Complex64> {
    if s.re > 709.0 {
        return Err(Error::Range(format!(
            "E_{{{},{}}} overflows (exponent {:.3e})",
            params.alpha, params.theta, s.re
        )));
    }
    Ok(s.powf(1.0 - params.theta) * s.exp() / params.alpha)
}

fn asymptotic(params: MlParams, w: Complex64) -> Result<Option<Complex64>> {
    let mut exp_part = Complex64::new(0.0, 0.0);
    for s in principal_poles(params.alpha, w) {
        exp_part += residue_term(params, s)?;
    }
    let inv = 1.0 / w;
    let mut pow = inv;
    let mut alg = Complex64::new(0.0, 0.0);
    let mut smallest = f64::INFINITY;
    let mut any_nonzero = false;
    for k in 1..200 {
        let term = pow * rgamma(params.theta - params.alpha * k as f64);
        let mag = term.norm();
        if mag > 0.0 {
            any_nonzero = true;
            if mag > smallest {
                break;
            }
            smallest = mag;
            alg -= term;
            if mag <= 1e-17 * (alg + exp_part).norm() {
                break;
            }
        }
        pow *= inv;
    }
    if !any_nonzero {
        // 1/Γ(θ-αk) vanishes for every k: the pole terms are exact.
        return Ok(Some(exp_part));
    }
    let total = alg + exp_part;
    if smallest <= 1e-15 * total.norm() {
        Ok(Some(total))
    } else {
        Ok(None)
    }
}

struct ContourParams {
    mu: f64,
    h: f64,
    n: usize,
}

fn contour(params: MlParams, w: Complex64) -> Result<Complex64> {
    let alpha = params.alpha;
    let beta = params.theta;
    let t = 1.0;

    let mut poles: Vec<(f64, Complex64)> = principal_poles(alpha, w)
        .into_iter()
        .map(|s| ((s.re + s.norm()) / 2.0, s))
        .filter(|(phi, _)| *phi > 1.0e-15)
        .collect();
    poles.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut s_star = vec![Complex64::new(0.0, 0.0)];
    let mut phi = vec![0.0];
    for (p, s) in &poles {
        s_star.push(*s);
        phi.push(*p);
    }
    let j1 = s_star.len();
    let mut p = vec![(-2.0 * (alpha - beta + 1.0)).max(0.0)];
    p.extend(std::iter::repeat_n(1.0, j1 - 1));
    let mut q = vec![1.0; j1 - 1];
    q.push(f64::INFINITY);
    phi.push(f64::INFINITY);

    let admissible: Vec<usize> = (0..j1)
        .filter(|&j| phi[j] < (LOG_CONTOUR_TOL - LOG_MACHINE_EPS) / t && phi[j] < phi[j + 1])
        .collect();
    if admissible.is_empty() {
        return Err(Error::Range(format!(
            "no admissible integration region for E_{{{alpha},{beta}}}({w})"
        )));
    }

    let mut log_eps = LOG_CONTOUR_TOL;
    let chosen = loop {
        let mut best: Option<(usize, ContourParams)> = None;
        for &j in &admissible {
            let cp = if j + 1 < j1 {
                optimal_param_rb(t, phi[j], phi[j + 1], p[j], q[j], log_eps)
            } else {
                optimal_param_ru(t, phi[j], p[j], log_eps)
            };
            if let Some(cp) = cp {
                if best.as_ref().is_none_or(|(_, b)| cp.n < b.n) {
                    best = Some((j, cp));
                }
            }
        }
        match best {
            Some((j, cp)) if cp.n <= 200 => break (j, cp),
            _ => {
                log_eps += std::f64::consts::LN_10;
                if log_eps > -5.0 {
                    return Err(Error::Range(format!(
                        "contour quadrature did not find usable parameters for E_{{{alpha},{beta}}}({w})"
                    )));
                }
            }
        }
    };
    let (region, cp) = chosen;

    let integral = trapezoid(alpha, beta, w, &cp);
    let mut residues = Complex64::new(0.0, 0.0);
    for s in &s_star[region + 1..] {
        residues += residue_term(params, *s)?;
    }
    let mut e = integral + residues;
    if w.im == 0.0 {
        e.im = 0.0;
    }
    if !(e.re.is_finite() && e.im.is_finite()) {
        return Err(Error::Range(format!("E_{{{alpha},{beta}}}({w}) is not representable")));
    }
    Ok(e)
}

fn trapezoid(alpha: f64, beta: f64, w: Complex64, cp: &ContourParams) -> Complex64 {
    let i = Complex64::i();
    let node = |k: i64| {
        let u = cp.h * k as f64;
        let z = cp.mu * (i * u + 1.0) * (i * u + 1.0);
        let zd = Complex64::new(-2.0 * cp.mu * u, 2.0 * cp.mu);
        z.exp() * z.powf(alpha - beta) / (z.powf(alpha) - w) * zd
    };
    let n = cp.n as i64;
    let sum = if w.im == 0.0 {
        // For real w the node at -k is minus the conjugate of the node at k.
        let mut s = node(0);
        for k in 1..=n {
            let v = node(k);
            s += v - v.conj();
        }
        s
    } else {
        (-n..=n).map(node).sum()
    };
    sum * cp.h / (2.0 * PI * i)
}

fn optimal_param_rb(
    t: f64,
    phi_j: f64,
    phi_j1: f64,
    pj: f64,
    qj: f64,
    log_epsilon: f64,
) -> Option<ContourParams> {
    let fac = 1.01;
    let f_max = (log_epsilon - LOG_MACHINE_EPS).exp();

    let sq_phi_j = phi_j.sqrt();
    let threshold = 2.0 * ((log_epsilon - LOG_MACHINE_EPS) / t).sqrt();
    let sq_phi_j1 = phi_j1.sqrt().min(threshold - sq_phi_j);

    let (sq_bar_j, sq_bar_j1, f_bar) = if pj < 1.0e-14 && qj < 1.0e-14 {
        (sq_phi_j, sq_phi_j1, 1.0)
    } else if pj < 1.0e-14 {
        let f_min = if sq_phi_j > 0.0 {
            fac * (sq_phi_j / (sq_phi_j1 - sq_phi_j)).powf(qj)
        } else {
            fac
        };
        if f_min >= f_max {
            return None;
        }
        let f_bar = f_min + f_min / f_max * (f_max - f_min);
        let fq = f_bar.powf(-1.0 / qj);
        (sq_phi_j, (2.0 * sq_phi_j1 - fq * sq_phi_j) / (2.0 + fq), f_bar)
    } else if qj < 1.0e-14 {
        let f_min = fac * (sq_phi_j1 / (sq_phi_j1 - sq_phi_j)).powf(pj);
        if f_min >= f_max {
            return None;
        }
        let f_bar = f_min + f_min / f_max * (f_max - f_min);
        let fp = f_bar.powf(-1.0 / pj);
        ((2.0 * sq_phi_j + fp * sq_phi_j1) / (2.0 - fp), sq_phi_j1, f_bar)
    } else {
        let mut f_min = fac * (sq_phi_j + sq_phi_j1) / (sq_phi_j1 - sq_phi_j).powf(pj.max(qj));
        if f_min >= f_max {
            return None;
        }
        f_min = f_min.max(1.5);
        let f_bar = f_min + f_min / f_max * (f_max - f_min);
        let fp = f_bar.powf(-1.0 / pj);
        let fq = f_bar.powf(-1.0 / qj);
        let w = -phi_j1 * t / log_epsilon;
        let den = 2.0 + w - (1.0 + w) * fp + fq;
        let a = ((2.0 + w + fq) * sq_phi_j + fp * sq_phi_j1) / den;
        let b = (-(1.0 + w) * fq * sq_phi_j + (2.0 + w - (1.0 + w) * fp) * sq_phi_j1) / den;
        (a, b, f_bar)
    };

    let log_eps = log_epsilon - f_bar.ln();
    let w = -sq_bar_j1 * sq_bar_j1 * t / log_eps;
    let mu = (((1.0 + w) * sq_bar_j + sq_bar_j1) / (2.0 + w)).powi(2);
    let h = -2.0 * PI / log_eps * (sq_bar_j1 - sq_bar_j) / ((1.0 + w) * sq_bar_j + sq_bar_j1);
    let n = ((1.0 - log_eps / t / mu).sqrt() / h).ceil();
    if !(mu > 0.0 && h > 0.0 && n.is_finite()) {
        return None;
    }
    Some(ContourParams {
        mu,
        h,
        n: n as usize,
    })
}

fn optimal_param_ru(t: f64, phi_j: f64, pj: f64, log_epsilon: f64) -> Option<ContourParams> {
    let sq_phi_j = phi_j.sqrt();
    let mut phibar = if phi_j > 0.0 { phi_j * 1.01 } else { 0.01 };
    let mut sq_phibar = phibar.sqrt();

    let f_min = 1.0_f64;
    let f_max = 10.0_f64;
    let f_tar = 5.0_f64;

    let mut a;
    let mut nj;
    let mut sq_mu;
    let mut guard = 0;
    loop {
        let phi_t = phibar * t;
        let log_eps_phi_t = log_epsilon / phi_t;
        nj = (phi_t / PI * (1.0 - 3.0 * log_eps_phi_t / 2.0 + (1.0 - 2.0 * log_eps_phi_t).sqrt())).ceil();
        a = PI * nj / phi_t;
        sq_mu = sq_phibar * (4.0 - a).abs() / (7.0 - (1.0 + 12.0 * a).sqrt()).abs();
        let fbar = ((sq_phibar - sq_phi_j) / sq_mu).powf(-pj);
        let stop = pj < 1.0e-14 || (f_min < fbar && fbar < f_max);
        guard += 1;
        if stop || guard > 100 {
            break;
        }
        sq_phibar = f_tar.powf(-1.0 / pj) * sq_mu + sq_phi_j;
        phibar = sq_phibar * sq_phibar;
    }
    let mut mu = sq_mu * sq_mu;
    let mut h = (-3.0 * a - 2.0 + 2.0 * (1.0 + 12.0 * a).sqrt()) / (4.0 - a) / nj;

    let threshold = (log_epsilon - LOG_MACHINE_EPS) / t;
    if mu > threshold {
        let qv = if pj.abs() < 1.0e-14 {
            0.0
        } else {
            f_tar.powf(-1.0 / pj) * mu.sqrt()
        };
        let phibar = (qv + phi_j.sqrt()).powi(2);
        if phibar < threshold {
            let w = (LOG_MACHINE_EPS / (LOG_MACHINE_EPS - log_epsilon)).sqrt();
            let u = (-phibar * t / LOG_MACHINE_EPS).sqrt();
            mu = threshold;
            nj = (w * log_epsilon / 2.0 / PI / (u * w - 1.0)).ceil();
            h = (LOG_MACHINE_EPS / (LOG_MACHINE_EPS - log_epsilon)).sqrt() / nj;
        } else {
            return None;
        }
    }
    if !(mu > 0.0 && h > 0.0 && nj.is_finite() && nj > 0.0) {
        return None;
    }
    Some(ContourParams {
        mu,
        h,
        n: nj as usize,
    })
}
