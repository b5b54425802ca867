//! Hypothesis checks for the uniqueness results on concrete data: the data
//! conditions, the constant C₀, the sufficient inequalities for
//! non-degeneracy and the non-degeneracy values at the poles themselves.

use std::f64::consts::{E, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{InitialData, ProblemSpec, SourceSpec, TimeGrid};
use crate::laplace::ReducedData;
use crate::signal::{derivative_profile, laplace_samples};

/// Lower/upper bounds on the model constants entering C₀.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub b_low: f64,
    pub a_high: f64,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub beta_low: f64,
}

impl Bounds {
    /// The tightest bounds for a known problem.
    pub fn for_problem(ps: &ProblemSpec) -> Self {
        Bounds {
            b_low: ps.terms.iter().map(|t| t.b).fold(f64::INFINITY, f64::min),
            a_high: ps.a,
            alpha_low: ps.alpha,
            alpha_high: ps.alpha,
            beta_low: ps.terms.iter().map(|t| t.beta).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b_low > 0.0 && self.a_high > 0.0 && self.beta_low > 0.0) {
            return Err(Error::param("b_low, a_high and beta_low must be positive"));
        }
        if !(1.0 < self.alpha_low && self.alpha_low <= self.alpha_high && self.alpha_high < 2.0) {
            return Err(Error::param(format!(
                "need 1 < alpha_low <= alpha_high < 2, got {} and {}",
                self.alpha_low, self.alpha_high
            )));
        }
        Ok(())
    }
}

pub fn compute_c0(bounds: &Bounds, n: u32, t_src: f64, lambda1: f64) -> Result<f64> {
    bounds.validate()?;
    if !(t_src > 0.0 && lambda1 > 0.0) {
        return Err(Error::param("T and lambda_1 must be positive"));
    }
    let Bounds {
        b_low,
        a_high,
        alpha_low,
        alpha_high,
        beta_low,
    } = *bounds;
    let ratio = b_low / a_high;
    let p = n as i32 + 2;
    let num = ratio.powf(1.0 / alpha_low).min(ratio.powf(1.0 / alpha_high))
        * lambda1.powf(1.0 / alpha_low).min(lambda1.powf(beta_low / alpha_high))
        * (PI / alpha_high).cos().abs().powi(p);
    let den = ((n as f64 + 2.0) / (t_src * E)).powi(p).max(1.0) * a_high.max(1.0);
    Ok(num / den)
}

/// Partial sums of Σ|γₖ||·| over the truncation and the share contributed by
/// its second half (small when the series has visibly converged).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesCheck {
    pub total: f64,
    pub tail_share: f64,
}

fn series(terms: impl Iterator<Item = f64>) -> SeriesCheck {
    let v: Vec<f64> = terms.collect();
    let total: f64 = v.iter().sum();
    let tail: f64 = v[v.len() / 2..].iter().sum();
    SeriesCheck {
        total,
        tail_share: if total > 0.0 { tail / total } else { 0.0 },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summability {
    pub phi: SeriesCheck,
    pub psi: SeriesCheck,
    pub f: SeriesCheck,
    pub z_l1: SeriesCheck,
}

/// Derivative data of ẑₗ used by the conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZDerivatives {
    /// ẑ^{(j)}(T), j = 0..n-1.
    pub at_end: Vec<f64>,
    /// ẑ^{(j)}(0), j = 0..n-1.
    pub at_start: Vec<f64>,
    /// max |ẑ^{(n)}| on [0, T].
    pub sup_n: f64,
}

impl ZDerivatives {
    fn zero(n: usize) -> Self {
        ZDerivatives {
            at_end: vec![0.0; n],
            at_start: vec![0.0; n],
            sup_n: 0.0,
        }
    }

    /// ‖ẑ^{(n)}‖ + Σⱼ|ẑ^{(j)}(0)|.
    pub fn smooth_norm(&self) -> f64 {
        self.sup_n + self.at_start.iter().map(|v| v.abs()).sum::<f64>()
    }

    pub fn end_leading(&self) -> f64 {
        *self.at_end.last().unwrap_or(&0.0)
    }
}

/// Relative fit residual above which derivative estimates are reported as
/// unreliable.
pub const SMOOTHNESS_WARN: f64 = 1e-6;

/// Derivatives of a sampled profile on [0, T]; the second value is the local
/// fit residual.
pub fn profile_derivatives(samples: &[f64], dt: f64, n: u32) -> Result<(ZDerivatives, f64)> {
    let n = n as usize;
    if samples.iter().all(|v| *v == 0.0) {
        return Ok((ZDerivatives::zero(n), 0.0));
    }
    let mut at_end = Vec::with_capacity(n);
    let mut at_start = Vec::with_capacity(n);
    let mut worst = 0.0f64;
    for j in 0..n {
        let (d, r) = derivative_profile(samples, dt, j)?;
        at_start.push(d[0]);
        at_end.push(d[d.len() - 1]);
        worst = worst.max(r);
    }
    let (dn, r) = derivative_profile(samples, dt, n)?;
    worst = worst.max(r);
    let sup_n = dn.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((ZDerivatives { at_end, at_start, sup_n }, worst))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub summability: Option<Summability>,
    pub uni_i0_ok: Vec<bool>,
    /// ẑₗ^{(j)}(T) = 0 for j ≤ n-2, per group.
    pub z_vanish_ok: Vec<bool>,
    /// g^{(j)}(T) = 0 for j ≤ n-1 (checked when g is supplied).
    pub g_vanish_ok: Option<bool>,
    pub smooth_vanish_ok: bool,
    /// Smallest admissible C† over l ≥ l₁; None when no finite value exists.
    pub c_dagger_estimate: Option<f64>,
    pub c0: Option<f64>,
    /// None for groups with ẑₗ^{(n-1)}(T) = 0, where the inequalities say nothing.
    pub gkits_ok: Vec<Option<bool>>,
    pub nondegeneracy_ok: Vec<bool>,
    pub nondegeneracy_values: Vec<Complex64>,
    pub nd_f: bool,
    pub nd_z: bool,
    pub warnings: Vec<String>,
}

/// Fraction of nonzero entries on the truncation that counts as "infinitely
/// often nonzero".
pub const ND_FRACTION: f64 = 0.2;

fn in_nd(nonzero: &[bool]) -> bool {
    let count = nonzero.iter().filter(|b| **b).count();
    count > 0 && count as f64 >= ND_FRACTION * nonzero.len() as f64
}

/// Relative floor below which derivative values count as zero.
pub const DERIVATIVE_FLOOR: f64 = 1e-6;

fn z_derivatives(rd: &ReducedData, grid: &TimeGrid, n: u32, warnings: &mut Vec<String>) -> Result<Vec<ZDerivatives>> {
    let mut out = Vec::with_capacity(rd.groups());
    for (l, z) in rd.z_hat.iter().enumerate() {
        if z.is_empty() {
            out.push(ZDerivatives::zero(n as usize));
            continue;
        }
        let (d, r) = profile_derivatives(z, grid.dt, n)?;
        if r > SMOOTHNESS_WARN {
            warnings.push(format!(
                "group {l}: derivative estimates of z are unreliable (fit residual {r:.1e})"
            ));
        }
        out.push(d);
    }
    Ok(out)
}

fn z_scale(rd: &ReducedData) -> f64 {
    rd.z_hat
        .iter()
        .flat_map(|z| z.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Data conditions: summability on the truncation, uniI0, vanishing at T,
/// the smallest C†, and 𝒩𝒟 membership. Conditions for C†, gkits and
/// non-degeneracy use 0-based group indices; `l1` is 1-based as in the
/// theorem.
pub fn check_conditions(
    rd: &ReducedData,
    gammas: &[f64],
    initial: &InitialData,
    src: &SourceSpec,
    grid: &TimeGrid,
    l1: usize,
) -> Result<HypothesisReport> {
    let n = src.n;
    if n == 0 {
        return Err(Error::param("n must be at least 1"));
    }
    let mut rep = HypothesisReport::default();
    let k = gammas.len();
    if k > 0 && initial.phi.len() == k && initial.psi.len() == k && src.f.len() == k {
        let z_l1 = |i: usize| {
            src.z
                .get(i)
                .map(|z| z.iter().map(|v| v.abs()).sum::<f64>() * grid.dt)
                .unwrap_or(0.0)
        };
        rep.summability = Some(Summability {
            phi: series((0..k).map(|i| (gammas[i] * initial.phi[i]).abs())),
            psi: series((0..k).map(|i| (gammas[i] * initial.psi[i]).abs())),
            f: series((0..k).map(|i| (gammas[i] * src.f[i]).abs())),
            z_l1: series((0..k).map(|i| gammas[i].abs() * z_l1(i))),
        });
    } else {
        rep.warnings.push("summability not evaluated: per-mode data lengths differ".into());
    }

    let groups = rd.groups();
    let zd = z_derivatives(rd, grid, n, &mut rep.warnings)?;
    let zs = z_scale(rd);
    let t = grid.t_src();
    let zero_at = |v: f64, j: usize| v.abs() <= DERIVATIVE_FLOOR * zs / t.powi(j as i32);
    for l in 0..groups {
        let l1norm = rd.z_hat[l].iter().map(|v| v.abs()).sum::<f64>() * grid.dt;
        rep.uni_i0_ok
            .push(rd.phi_hat[l].abs() + rd.psi_hat[l].abs() + rd.f_hat[l].abs() + l1norm != 0.0);
        let ok = zd[l].at_end[..(n as usize - 1)]
            .iter()
            .enumerate()
            .all(|(j, v)| zero_at(*v, j));
        rep.z_vanish_ok.push(ok);
    }
    let lead: Vec<bool> = (0..groups)
        .map(|l| !zero_at(zd[l].end_leading(), n as usize - 1))
        .collect();
    rep.nd_z = in_nd(&lead);
    rep.nd_f = in_nd(&rd.f_hat.iter().map(|f| *f != 0.0).collect::<Vec<_>>());

    if rep.nd_f {
        if src.g.len() == grid.n_src + 1 {
            let (gd, r) = profile_derivatives(&src.g, grid.dt, n)?;
            let gs = src.g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let ok = gd
                .at_end
                .iter()
                .enumerate()
                .all(|(j, v)| v.abs() <= DERIVATIVE_FLOOR * gs / t.powi(j as i32));
            if r > SMOOTHNESS_WARN {
                rep.warnings
                    .push(format!("derivative estimates of g are unreliable (fit residual {r:.1e})"));
            }
            rep.g_vanish_ok = Some(ok);
        } else {
            rep.warnings.push("g not supplied; its vanishing conditions are not checked".into());
        }
    }
    rep.smooth_vanish_ok = rep.z_vanish_ok.iter().skip(l1.saturating_sub(1)).all(|b| *b)
        && rep.g_vanish_ok.unwrap_or(true);

    let mut c_dagger = 0.0f64;
    for l in l1.saturating_sub(1)..groups {
        let zt = zd[l].end_leading().abs();
        let lhs0 = zd[l].smooth_norm() + rd.f_hat[l].abs();
        if lead[l] {
            c_dagger = c_dagger.max(lhs0 / zt);
            c_dagger = c_dagger.max((rd.phi_hat[l].abs() + rd.psi_hat[l].abs()) / zt);
        } else if lhs0 > DERIVATIVE_FLOOR * zs {
            c_dagger = f64::INFINITY;
        }
    }
    rep.c_dagger_estimate = c_dagger.is_finite().then_some(c_dagger);
    Ok(rep)
}

/// Both inequalities that make every group with ẑₗ^{(n-1)}(T) ≠ 0
/// non-degenerate, given C₀. `g` is sampled on the source grid.
pub fn check_gkits(rd: &ReducedData, g: &[f64], grid: &TimeGrid, n: u32, c0: f64) -> Result<Vec<Option<bool>>> {
    let mut warnings = Vec::new();
    let zd = z_derivatives(rd, grid, n, &mut warnings)?;
    let zs = z_scale(rd);
    let (gd, _) = profile_derivatives(g, grid.dt, n)?;
    let g_norm = gd.smooth_norm();
    let t = grid.t_src();
    Ok((0..rd.groups())
        .map(|l| {
            let zt = zd[l].end_leading().abs();
            if zt <= DERIVATIVE_FLOOR * zs / t.powi(n as i32 - 1) {
                return None;
            }
            let rest = zd[l].smooth_norm() + rd.phi_hat[l].abs() + rd.psi_hat[l].abs();
            let margin = c0 * zt - rest;
            Some(margin > 0.0 && rd.f_hat[l].abs() * g_norm < margin)
        })
        .collect())
}

/// Relative floor for the non-degeneracy value.
pub const NONDEGENERACY_FLOOR: f64 = 1e-12;

/// e^{sₗT}·(sₗφ̂ₗ + ψ̂ₗ + (1/a)(f̂ₗG(sₗ) + Ẑₗ(sₗ))) at sₗ = μₗ^{1/α}e^{iπ/α},
/// T the source length, and whether it clears the floor relative to the
/// size of the contributing terms. The factor keeps the transforms finite.
pub fn check_nondegeneracy(
    alpha: f64,
    a: f64,
    mus: &[f64],
    rd: &ReducedData,
    g: &[f64],
    dt: f64,
) -> Result<Vec<(Complex64, bool)>> {
    if mus.len() != rd.groups() {
        return Err(Error::Sampling(format!("{} rates for {} groups", mus.len(), rd.groups())));
    }
    if !(alpha > 1.0 && alpha < 2.0 && a > 0.0) {
        return Err(Error::param("need alpha in (1, 2) and a > 0"));
    }
    let len = if g.is_empty() {
        rd.z_hat.iter().map(Vec::len).max().unwrap_or(0)
    } else {
        g.len()
    };
    let t_end = len.saturating_sub(1) as f64 * dt;
    // ∫v(t)e^{s(T-t)}dt is the transform of the reversed samples at -s.
    let shifted = |v: &[f64], s: Complex64| {
        let rev: Vec<f64> = v.iter().rev().copied().collect();
        laplace_samples(&rev, dt, -s)
    };
    let shifted_abs = |v: &[f64], x: f64| {
        let rev: Vec<f64> = v.iter().rev().map(|x| x.abs()).collect();
        laplace_samples(&rev, dt, Complex64::new(-x, 0.0)).re
    };
    let zero = Complex64::new(0.0, 0.0);
    Ok(mus
        .iter()
        .enumerate()
        .map(|(l, &mu)| {
            let s = Complex64::from_polar(mu.powf(1.0 / alpha), PI / alpha);
            let shift = (s * t_end).exp();
            let has_g = rd.f_hat[l] != 0.0 && !g.is_empty();
            let terms = [
                shift * s * rd.phi_hat[l],
                shift * rd.psi_hat[l],
                if has_g { rd.f_hat[l] * shifted(g, s) / a } else { zero },
                if rd.z_hat[l].is_empty() { zero } else { shifted(&rd.z_hat[l], s) / a },
            ];
            let value: Complex64 = terms.iter().sum();
            // Transforms of |g|, |ẑ| bound the parts that may cancel inside G, Ẑ.
            let mut scale = terms[0].norm() + terms[1].norm();
            if has_g {
                scale += (rd.f_hat[l] * shifted_abs(g, s.re) / a).abs();
            }
            if !rd.z_hat[l].is_empty() {
                scale += shifted_abs(&rd.z_hat[l], s.re) / a;
            }
            (value, scale > 0.0 && value.norm() > NONDEGENERACY_FLOOR * scale)
        })
        .collect())
}

/// Everything at once for a known problem.
#[allow(clippy::too_many_arguments)]
pub fn full_report(
    rd: &ReducedData,
    gammas: &[f64],
    initial: &InitialData,
    src: &SourceSpec,
    grid: &TimeGrid,
    alpha: f64,
    a: f64,
    mus: &[f64],
    bounds: &Bounds,
    lambda1: f64,
    l1: usize,
) -> Result<HypothesisReport> {
    let mut rep = check_conditions(rd, gammas, initial, src, grid, l1)?;
    let c0 = compute_c0(bounds, src.n, grid.t_src(), lambda1)?;
    rep.c0 = Some(c0);
    let g = if src.g.is_empty() { vec![0.0; grid.n_src + 1] } else { src.g.clone() };
    rep.gkits_ok = check_gkits(rd, &g, grid, src.n, c0)?;
    let nd = check_nondegeneracy(alpha, a, mus, rd, &g, grid.dt)?;
    rep.nondegeneracy_ok = nd.iter().map(|v| v.1).collect();
    rep.nondegeneracy_values = nd.into_iter().map(|v| v.0).collect();
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b() -> Bounds {
        Bounds {
            b_low: 1.0,
            a_high: 1.0,
            alpha_low: 1.25,
            alpha_high: 1.5,
            beta_low: 0.5,
        }
    }

    #[test]
    fn cosine_factor_at_three_halves() {
        // λ₁ = 1 and T large isolate |cos(2π/3)|^{n+2}.
        let c = compute_c0(&b(), 2, 100.0, 1.0).unwrap();
        assert!((c - 0.5f64.powi(4)).abs() < 1e-15);
    }

    #[test]
    fn bad_bounds_are_rejected() {
        let mut x = b();
        x.alpha_low = 1.6;
        assert!(compute_c0(&x, 1, 1.0, 1.0).is_err());
        x = b();
        x.b_low = 0.0;
        assert!(compute_c0(&x, 1, 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_group_fails_uni_i0() {
        let grid = TimeGrid::new(1.0, 2.0, 0.1).unwrap();
        let rd = ReducedData {
            phi_hat: vec![1.0, 0.0],
            psi_hat: vec![0.0, 0.0],
            f_hat: vec![0.0, 0.0],
            z_hat: vec![Vec::new(), Vec::new()],
            z_nondegenerate: vec![],
            f_nonzero: vec![],
        };
        let src = SourceSpec {
            g: vec![],
            f: vec![0.0; 2],
            z: vec![],
            n: 1,
        };
        let rep = check_conditions(&rd, &[1.0, 1.0], &InitialData::zeros(2), &src, &grid, 1).unwrap();
        assert_eq!(rep.uni_i0_ok, vec![true, false]);
    }
}
