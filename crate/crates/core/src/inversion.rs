//! Recovery of a, α, the operator terms (m, βⱼ, bⱼ) and the source profile g
//! from a single observed trace.
//!
//! Pipeline: matrix-pencil seeds from the tail, a variable-projection fit of
//! the trace (nonlinear in α and the group rates, linear in 1/a and the
//! coefficients of g in a polynomial basis), pole search on the fitted
//! transform, then α from pole arguments, rates from moduli, the multiterm
//! decomposition of the rates, a from residues and g by regularized
//! deconvolution.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{InitialData, ModeKernel, SourceSpec, Term, TimeGrid, TimeTrace};
use crate::laplace::{
    find_poles_data, find_poles_model, reduce_data, HModel, PencilOptions, PoleEstimate, ReducedData, ScanRegion,
};
use crate::lsq;
use crate::signal::{laplace_samples, noise_sigma};
use crate::spectrum::Spectrum;

/// Everything the theorem treats as known: geometry, observation weights,
/// initial data and the known parts f, z of the source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Known {
    pub spectrum: Spectrum,
    pub gammas: Vec<f64>,
    pub initial: InitialData,
    pub f: Vec<f64>,
    /// zₖ on the source grid; empty entries are zero.
    pub z: Vec<Vec<f64>>,
    pub n: u32,
    pub t_src: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Regularization {
    /// Residual norm matched to tau·σ·√M.
    Discrepancy { tau: f64 },
    Fixed { lambda: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertOptions {
    /// Groups whose rates are fitted individually.
    pub max_groups: usize,
    pub max_terms: usize,
    /// Floor on the relative uncertainty assigned to each recovered rate.
    pub decomposition_tol: f64,
    /// Size of the polynomial basis for g used during the pole stage.
    pub g_basis: usize,
    pub regularization: Regularization,
    /// Overrides the noise level estimated from the trace.
    pub noise_sigma: Option<f64>,
    pub pencil: PencilOptions,
}

impl Default for InvertOptions {
    fn default() -> Self {
        InvertOptions {
            max_groups: 8,
            max_terms: 3,
            decomposition_tol: 1e-6,
            g_basis: 6,
            regularization: Regularization::Discrepancy { tau: 1.0 },
            noise_sigma: None,
            pencil: PencilOptions {
                rel_threshold: 1e-10,
                ..PencilOptions::default()
            },
        }
    }
}

// ---------------------------------------------------------------- α and μ

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaEstimate {
    pub alpha: f64,
    pub mean_arg: f64,
    /// Largest deviation of a pole argument from the mean.
    pub dispersion: f64,
}

pub const ARG_DISPERSION_MAX: f64 = 0.05;

/// RMS of uncertainty-weighted residuals accepted by the decomposition inside
/// the full pipeline.
pub const DECOMPOSITION_CHI: f64 = 3.0;

/// Largest relative standard deviation of a fitted rate admitted to the
/// pole stage.
pub const RATE_STD_MAX: f64 = 0.05;

/// α = π / (weighted circular mean of arg sₗ), weights inverse to the
/// reported condition numbers.
pub fn recover_alpha(poles: &[PoleEstimate]) -> Result<AlphaEstimate> {
    if poles.len() < 2 {
        return Err(Error::Estimation(format!("need at least 2 poles, got {}", poles.len())));
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for p in poles {
        let w = 1.0 / p.condition.max(1e-16);
        acc += w * p.location / p.location.norm();
    }
    let mean_arg = acc.arg();
    let dispersion = poles
        .iter()
        .map(|p| (p.location.arg() - mean_arg).abs())
        .fold(0.0, f64::max);
    if dispersion > ARG_DISPERSION_MAX {
        return Err(Error::InconsistentPoles(format!(
            "pole arguments spread by {dispersion:.3} rad around {mean_arg:.4}"
        )));
    }
    let alpha = PI / mean_arg;
    if !(alpha > 1.0 && alpha < 2.0) {
        return Err(Error::InconsistentPoles(format!(
            "mean pole argument {mean_arg:.4} gives alpha = {alpha:.4} outside (1, 2)"
        )));
    }
    Ok(AlphaEstimate {
        alpha,
        mean_arg,
        dispersion,
    })
}

/// μ̂ = |sₗ|^α̂ in ascending order; the l-th value belongs to the l-th group.
pub fn recover_mu(poles: &[PoleEstimate], alpha: f64) -> Result<Vec<f64>> {
    let mut mu: Vec<f64> = poles.iter().map(|p| p.location.norm().powf(alpha)).collect();
    mu.sort_by(f64::total_cmp);
    for w in mu.windows(2) {
        if w[1] - w[0] <= 1e-12 * w[1] {
            return Err(Error::Matching(format!("two poles share the modulus giving mu = {}", w[1])));
        }
    }
    Ok(mu)
}

// ------------------------------------------------------ multiterm decomposition

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub m: usize,
    pub betas: Vec<f64>,
    /// bⱼ/a.
    pub coeffs: Vec<f64>,
    /// RMS relative residual of the selected model.
    pub residual: f64,
    /// Best residual for each m tried.
    pub residuals: Vec<f64>,
    /// Best admissible model for each m tried.
    pub candidates: Vec<Option<TermModel>>,
    /// False when no m reached the tolerance.
    pub selected: bool,
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Exponents from unconstrained parameters: β₁ = 1.1·σ(u₁), βⱼ = βⱼ₋₁σ(uⱼ).
fn betas_of(u: &[f64]) -> Vec<f64> {
    let mut b = Vec::with_capacity(u.len());
    let mut prev = 1.1;
    for &x in u {
        prev *= logistic(x);
        b.push(prev);
    }
    b
}

fn params_of(betas: &[f64]) -> Vec<f64> {
    let mut prev = 1.1;
    betas
        .iter()
        .map(|&b| {
            let u = logit(b / prev);
            prev = b;
            u
        })
        .collect()
}

/// Relative residuals, divided by `sigma`, and coefficients for fixed exponents.
fn power_fit(betas: &[f64], mu: &[f64], lambdas: &[f64], sigma: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let a = DMatrix::from_fn(mu.len(), betas.len(), |i, j| lambdas[i].powf(betas[j]) / (mu[i] * sigma[i]));
    let rhs: Vec<f64> = sigma.iter().map(|s| 1.0 / s).collect();
    let (c, r) = lsq::linear(&a, &rhs)?;
    Some((c, r.into_iter().map(|v| -v).collect()))
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Dominant-term peeling: slope of log μ against log λ over the top 40% of
/// the log λ range, coefficient from the ratio, subtract, repeat.
fn peel(mu: &[f64], lambdas: &[f64], m: usize) -> Vec<f64> {
    let (lo, hi) = (lambdas[0].ln(), lambdas[lambdas.len() - 1].ln());
    let cut = hi - 0.4 * (hi - lo);
    let mut rest = mu.to_vec();
    let mut betas = Vec::new();
    for _ in 0..m {
        let pts: Vec<(f64, f64)> = lambdas
            .iter()
            .zip(&rest)
            .filter(|(l, r)| l.ln() >= cut && **r > 0.0)
            .map(|(l, r)| (l.ln(), r.ln()))
            .collect();
        let prev = betas.last().copied().unwrap_or(1.0);
        let beta = if pts.len() >= 2 {
            let n = pts.len() as f64;
            let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            sxy / sxx
        } else {
            0.5 * prev
        };
        let beta = if betas.is_empty() { beta.clamp(0.05, 1.0) } else { beta.clamp(0.02 * prev, 0.95 * prev) };
        let c = {
            let v: Vec<f64> = pts.iter().map(|p| p.1 - beta * p.0).collect();
            if v.is_empty() {
                0.0
            } else {
                (v.iter().sum::<f64>() / v.len() as f64).exp()
            }
        };
        for (r, l) in rest.iter_mut().zip(lambdas) {
            *r -= c * l.powf(beta);
        }
        betas.push(beta);
    }
    betas
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermModel {
    pub betas: Vec<f64>,
    /// bⱼ/a.
    pub coeffs: Vec<f64>,
    /// RMS of the weighted relative residuals.
    pub residual: f64,
}

impl TermModel {
    pub fn rate(&self, lambda: f64) -> f64 {
        self.coeffs.iter().zip(&self.betas).map(|(c, b)| c * lambda.powf(*b)).sum()
    }
}

fn fit_terms(mu: &[f64], lambdas: &[f64], sigma: &[f64], seed: &[f64]) -> Option<TermModel> {
    let r = |u: &[f64]| power_fit(&betas_of(u), mu, lambdas, sigma).map(|(_, r)| r);
    let j = |u: &[f64]| lsq::forward_jacobian(u, &r(u)?, r);
    let out = lsq::minimize(&params_of(seed), r, j, 200);
    let mut betas = betas_of(&out.x);
    if betas[0] > 1.0 {
        // The leading exponent may not exceed 1; refit the coefficients there.
        let scale = 1.0 / betas[0];
        for b in &mut betas {
            *b = (*b * scale).min(1.0);
        }
    }
    let (coeffs, res) = power_fit(&betas, mu, lambdas, sigma)?;
    if coeffs.iter().any(|c| !(*c > 0.0)) {
        return None;
    }
    Some(TermModel {
        betas,
        coeffs,
        residual: rms(&res),
    })
}

/// Smallest m ≤ max_m whose fit of μ = Σ cⱼλ^{βⱼ} (positive cⱼ, exponents
/// strictly decreasing in (0, 1]) has RMS relative residual below `tol`.
/// Fits for every m up to max_m are kept in `candidates`.
pub fn decompose_multiterm(mu: &[f64], lambdas: &[f64], max_m: usize, tol: f64) -> Result<Decomposition> {
    decompose_weighted(mu, lambdas, &vec![1.0; mu.len()], max_m, tol)
}

/// As [`decompose_multiterm`], with each relative residual divided by the
/// matching entry of `rel_sigma`.
pub fn decompose_weighted(
    mu: &[f64],
    lambdas: &[f64],
    rel_sigma: &[f64],
    max_m: usize,
    tol: f64,
) -> Result<Decomposition> {
    if rel_sigma.len() != mu.len() || rel_sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Sampling("one positive weight per rate is required".into()));
    }
    if mu.len() != lambdas.len() {
        return Err(Error::Sampling(format!("{} rates for {} eigenvalues", mu.len(), lambdas.len())));
    }
    if mu.iter().chain(lambdas).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Domain("rates and eigenvalues must be positive".into()));
    }
    if lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("eigenvalues must be strictly increasing".into()));
    }
    let max_m = max_m.min(mu.len() / 3);
    if max_m == 0 {
        return Err(Error::Fit(format!("{} rates are too few for a decomposition", mu.len())));
    }
    let mut residuals = Vec::new();
    let mut candidates = Vec::new();
    let mut best: Option<(usize, TermModel)> = None;
    for m in 1..=max_m {
        let peeled = peel(mu, lambdas, m);
        let mut seeds = vec![peeled.clone()];
        if m >= 2 {
            let fr = [0.2, 0.5, 0.8];
            let combos = fr.len().pow(m as u32 - 1);
            for c in 0..combos {
                let mut s = vec![peeled[0]];
                let mut idx = c;
                for _ in 1..m {
                    let prev = *s.last().unwrap();
                    s.push(prev * fr[idx % fr.len()]);
                    idx /= fr.len();
                }
                seeds.push(s);
            }
        }
        let fit = seeds
            .iter()
            .filter_map(|s| fit_terms(mu, lambdas, rel_sigma, s))
            .min_by(|a, b| a.residual.total_cmp(&b.residual));
        candidates.push(fit.clone());
        let Some(fit) = fit else {
            residuals.push(f64::INFINITY);
            continue;
        };
        residuals.push(fit.residual);
        let settled = best.as_ref().is_some_and(|(_, b)| b.residual < tol);
        if !settled && best.as_ref().is_none_or(|(_, b)| fit.residual < b.residual) {
            best = Some((m, fit));
        }
    }
    let Some((m, fit)) = best else {
        return Err(Error::Fit("no admissible multiterm model (positive coefficients) was found".into()));
    };
    Ok(Decomposition {
        m,
        selected: fit.residual < tol,
        betas: fit.betas,
        coeffs: fit.coeffs,
        residual: fit.residual,
        residuals,
        candidates,
    })
}

// ----------------------------------------------------------------------- a

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AMethod {
    /// Poles of groups with f̂ₗ = 0, where the G term vanishes.
    SourceFree,
    /// Joint least squares over 1/a and the coefficients of g in a basis.
    Joint,
    /// Median over the largest poles, where Ẑ dominates G.
    Dominance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AEstimate {
    pub a: f64,
    /// (group, estimate) for every pole with a usable Ẑ.
    pub per_pole: Vec<(usize, f64)>,
    pub method: AMethod,
}

/// a from residues: Nₗ = α sₗ Res = sₗφ̂ₗ + ψ̂ₗ + (1/a)(f̂ₗG(sₗ) + Ẑₗ(sₗ)).
/// Poles need their `group_index`. `g_basis` (on the source grid) enables the
/// joint estimate when no group is free of the unknown source.
pub fn recover_a(
    poles: &[PoleEstimate],
    alpha: f64,
    rd: &ReducedData,
    dt: f64,
    g_basis: &[Vec<f64>],
) -> Result<AEstimate> {
    struct Row {
        l: usize,
        s: Complex64,
        d: Complex64,
        z: Complex64,
    }
    let mut rows = Vec::new();
    for p in poles {
        let Some(l) = p.group_index else { continue };
        if l >= rd.groups() || rd.z_hat[l].is_empty() {
            continue;
        }
        let s = p.location;
        let n = alpha * s * p.residue;
        let d = n - s * rd.phi_hat[l] - rd.psi_hat[l];
        let z = laplace_samples(&rd.z_hat[l], dt, s);
        if z.norm() <= 1e-12 * (n.norm() + (s * rd.phi_hat[l]).norm() + rd.psi_hat[l].abs()) || d.norm() == 0.0 {
            continue;
        }
        rows.push(Row { l, s, d, z });
    }
    if rows.is_empty() {
        return Err(Error::Unidentifiable(
            "a cannot be recovered: the known source part z vanishes at every pole".into(),
        ));
    }
    let est = |r: &Row| (r.z * r.d.conj()).re / r.d.norm_sqr();
    let per_pole: Vec<(usize, f64)> = rows.iter().map(|r| (r.l, est(r))).collect();
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let free: Vec<f64> = rows.iter().filter(|r| rd.f_hat[r.l] == 0.0).map(est).collect();
    let (a, method) = if !free.is_empty() {
        (median(free), AMethod::SourceFree)
    } else if !g_basis.is_empty() && rows.len() >= 3 && 2 * rows.len() >= g_basis.len() + 2 {
        let cols = g_basis.len() + 1;
        let mut m = DMatrix::zeros(2 * rows.len(), cols);
        let mut b = vec![0.0; 2 * rows.len()];
        for (i, r) in rows.iter().enumerate() {
            m[(2 * i, 0)] = r.z.re;
            m[(2 * i + 1, 0)] = r.z.im;
            for (j, basis) in g_basis.iter().enumerate() {
                let v = rd.f_hat[r.l] * laplace_samples(basis, dt, r.s);
                m[(2 * i, j + 1)] = v.re;
                m[(2 * i + 1, j + 1)] = v.im;
            }
            b[2 * i] = r.d.re;
            b[2 * i + 1] = r.d.im;
        }
        let (x, _) = lsq::linear(&m, &b).ok_or_else(|| Error::Fit("joint residue fit failed".into()))?;
        (1.0 / x[0], AMethod::Joint)
    } else {
        let mut by_size: Vec<&Row> = rows.iter().collect();
        by_size.sort_by(|a, b| b.s.norm().total_cmp(&a.s.norm()));
        let top = by_size.len().div_ceil(2);
        (median(by_size[..top].iter().map(|r| est(r)).collect()), AMethod::Dominance)
    };
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::Estimation(format!("residues give a non-positive coefficient a = {a}")));
    }
    Ok(AEstimate { a, per_pole, method })
}

// ----------------------------------------------------------------------- g

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GEstimate {
    /// g on the source grid.
    pub g: Vec<f64>,
    pub lambda: f64,
    pub residual_norm: f64,
    /// Residual norm the discrepancy principle aimed for (0 for a fixed λ).
    pub target_norm: f64,
    pub warning: Option<String>,
}

/// Kernel tables of one group under recovered parameters.
fn group_kernel(alpha: f64, mu: f64, rd: &ReducedData, l: usize, grid: &TimeGrid) -> Result<ModeKernel> {
    if rd.phi_hat[l] != 0.0 || rd.psi_hat[l] != 0.0 {
        ModeKernel::new(alpha, mu, grid)
    } else {
        ModeKernel::convolution_only(alpha, mu, grid)
    }
}

fn has_data(rd: &ReducedData, l: usize) -> bool {
    rd.phi_hat[l] != 0.0 || rd.psi_hat[l] != 0.0 || rd.f_hat[l] != 0.0 || !rd.z_hat[l].is_empty()
}

/// g from r(t) = h(t) - [φ, ψ, z response] = (1/a)∫₀ᵗK(t-τ)g(τ)dτ with
/// K = Σₗ f̂ₗ·tE_{α,2}(-μₗt^α), by product integration and Tikhonov
/// regularization on second differences. The last n samples of g are fixed
/// to zero (vanishing conditions at T). `mus` holds one rate per group.
#[allow(clippy::too_many_arguments)]
pub fn recover_g(
    trace: &TimeTrace,
    alpha: f64,
    a: f64,
    mus: &[f64],
    rd: &ReducedData,
    grid: &TimeGrid,
    n: u32,
    reg: Regularization,
    sigma: f64,
) -> Result<GEstimate> {
    if mus.len() != rd.groups() {
        return Err(Error::Sampling(format!("{} rates for {} groups", mus.len(), rd.groups())));
    }
    if trace.values.len() != grid.n_obs + 1 {
        return Err(Error::Sampling("trace does not match the time grid".into()));
    }
    let f_abs: f64 = rd.f_hat.iter().map(|f| f.abs()).sum();
    let f_sum: f64 = rd.f_hat.iter().sum();
    if f_abs == 0.0 || f_sum.abs() <= 1e-12 * f_abs {
        return Err(Error::Unidentifiable("g cannot be recovered: the observed source weight Φf is zero".into()));
    }
    let nt = grid.n_obs;
    let ns = grid.n_src;
    let mut r = trace.values.clone();
    let mut wa = vec![0.0; nt + 1];
    let mut wb = vec![0.0; nt + 1];
    for l in 0..rd.groups() {
        if !has_data(rd, l) {
            continue;
        }
        let k = group_kernel(alpha, mus[l], rd, l, grid)?;
        let zero = vec![0.0; ns + 1];
        let z = if rd.z_hat[l].is_empty() { &zero } else { &rd.z_hat[l] };
        let u = k.solve(a, rd.phi_hat[l], rd.psi_hat[l], z, grid)?;
        for (ri, ui) in r.iter_mut().zip(&u) {
            *ri -= ui;
        }
        if rd.f_hat[l] != 0.0 {
            for m in 0..=nt {
                wa[m] += rd.f_hat[l] * k.wa[m] / a;
                wb[m] += rd.f_hat[l] * k.wb[m] / a;
            }
        }
    }
    let fixed = (n as usize).min(ns);
    let free = ns + 1 - fixed;
    if free == 0 {
        return Err(Error::Sampling("no free samples of g remain after the end conditions".into()));
    }
    let mut w = DMatrix::zeros(nt, free);
    for row in 1..=nt {
        for i in 0..ns.min(row) {
            let m = row - i;
            if i < free {
                w[(row - 1, i)] += wa[m];
            }
            if i + 1 < free {
                w[(row - 1, i + 1)] += wb[m];
            }
        }
    }
    let mut d2 = DMatrix::zeros(ns.saturating_sub(1), free);
    for i in 1..ns {
        for (j, c) in [(i - 1, 1.0), (i, -2.0), (i + 1, 1.0)] {
            if j < free {
                d2[(i - 1, j)] = c;
            }
        }
    }
    let rhs: Vec<f64> = r[1..].to_vec();
    let solve = |lambda: f64| -> Result<(Vec<f64>, f64)> {
        let rows = nt + d2.nrows();
        let mut m = DMatrix::zeros(rows, free);
        m.view_mut((0, 0), (nt, free)).copy_from(&w);
        m.view_mut((nt, 0), (d2.nrows(), free)).copy_from(&(&d2 * lambda.sqrt()));
        let mut b = rhs.clone();
        b.resize(rows, 0.0);
        let (x, _) = lsq::linear(&m, &b).ok_or_else(|| Error::Fit("regularized deconvolution failed".into()))?;
        let fit = &w * nalgebra::DVector::from_column_slice(&x);
        let res = fit
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        Ok((x, res))
    };
    let scale = w.norm_squared() / free as f64;
    let (x, lambda, res, target, warning) = match reg {
        Regularization::Fixed { lambda } => {
            let (x, res) = solve(lambda)?;
            (x, lambda, res, 0.0, None)
        }
        Regularization::Discrepancy { tau } => {
            let target = tau * sigma * (nt as f64).sqrt();
            let (lo, hi) = (1e-16 * scale, 1e2 * scale);
            let (x_lo, r_lo) = solve(lo)?;
            let (target, warning) = if r_lo >= target {
                let msg = format!(
                    "discrepancy target {target:.3e} is below the residual {r_lo:.3e} at the smallest regularization; using {:.3e}",
                    1.1 * r_lo
                );
                (1.1 * r_lo, Some(msg))
            } else {
                (target, None)
            };
            {
                let (x_hi, r_hi) = solve(hi)?;
                if r_hi <= target {
                    let msg = format!("discrepancy target {target:.3e} not reached even at lambda = {hi:.3e}");
                    (x_hi, hi, r_hi, target, Some(msg))
                } else {
                    let (mut a_, mut b_) = (lo.ln(), hi.ln());
                    let mut best = (x_lo, lo, r_lo);
                    for _ in 0..60 {
                        let mid = 0.5 * (a_ + b_);
                        let (x, res) = solve(mid.exp())?;
                        if res < target {
                            a_ = mid;
                            best = (x, mid.exp(), res);
                        } else {
                            b_ = mid;
                        }
                        if b_ - a_ < 1e-3 {
                            break;
                        }
                    }
                    (best.0, best.1, best.2, target, warning)
                }
            }
        }
    };
    let mut g = x;
    g.resize(ns + 1, 0.0);
    Ok(GEstimate {
        g,
        lambda,
        residual_norm: res,
        target_norm: target,
        warning,
    })
}

// ------------------------------------------------------------ trace fit

/// Legendre polynomials P₀..P_{n-1} at x.
fn legendre(x: f64, n: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(n);
    for k in 0..n {
        let v = match k {
            0 => 1.0,
            1 => x,
            _ => ((2 * k - 1) as f64 * x * p[k - 1] - (k - 1) as f64 * p[k - 2]) / k as f64,
        };
        p.push(v);
    }
    p
}

/// (T - t)ⁿ Pᵢ(2t/T - 1) on the source grid, i < size.
pub fn g_basis(grid: &TimeGrid, n: u32, size: usize) -> Vec<Vec<f64>> {
    let t_end = grid.t_src();
    let mut out = vec![Vec::with_capacity(grid.n_src + 1); size];
    for t in grid.source_times() {
        let w = (t_end - t).powi(n as i32);
        for (b, p) in out.iter_mut().zip(legendre(2.0 * t / t_end - 1.0, size)) {
            b.push(w * p);
        }
    }
    out
}

struct Cols {
    init: Vec<f64>,
    z: Vec<f64>,
    g: Vec<Vec<f64>>,
}

struct TraceModel {
    grid: TimeGrid,
    rd: ReducedData,
    n: u32,
    /// Groups with data, in order.
    groups: Vec<usize>,
    lambdas: Vec<f64>,
    basis: Vec<Vec<f64>>,
    target: Vec<f64>,
    has_z: bool,
    has_f: bool,
}

impl TraceModel {
    /// The same model on every `factor`-th sample.
    fn coarse(&self, factor: usize) -> Result<TraceModel> {
        let grid = TimeGrid::new(self.grid.t_src(), self.grid.t(self.grid.n_obs), self.grid.dt * factor as f64)?;
        let every = |v: &Vec<f64>| v.iter().step_by(factor).copied().collect::<Vec<_>>();
        let mut rd = self.rd.clone();
        rd.z_hat = rd.z_hat.iter().map(every).collect();
        Ok(TraceModel {
            basis: g_basis(&grid, self.n, self.basis.len()),
            grid,
            rd,
            n: self.n,
            groups: self.groups.clone(),
            lambdas: self.lambdas.clone(),
            target: every(&self.target),
            has_z: self.has_z,
            has_f: self.has_f,
        })
    }

    fn residual_norm(&self, kind: Rates, theta: &[f64]) -> Option<f64> {
        let (alpha, mus) = rates_of(kind, theta, &self.lambdas);
        let cols = mus
            .iter()
            .enumerate()
            .map(|(j, &mu)| self.cols(alpha, mu, j).ok())
            .collect::<Option<Vec<_>>>()?;
        let r = self.project(&cols)?.1;
        Some(r.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    fn cols(&self, alpha: f64, mu: f64, j: usize) -> Result<Cols> {
        let l = self.groups[j];
        let rd = &self.rd;
        let k = group_kernel(alpha, mu, rd, l, &self.grid)?;
        let mut init = vec![0.0; self.grid.n_obs + 1];
        if rd.phi_hat[l] != 0.0 || rd.psi_hat[l] != 0.0 {
            for (i, v) in init.iter_mut().enumerate() {
                *v = rd.phi_hat[l] * k.e1[i] + rd.psi_hat[l] * k.k0[i];
            }
        }
        let z = if rd.z_hat[l].is_empty() {
            Vec::new()
        } else {
            k.convolution(1.0, &rd.z_hat[l], &self.grid)
        };
        let g = if rd.f_hat[l] != 0.0 {
            self.basis
                .iter()
                .map(|b| {
                    let mut c = k.convolution(1.0, b, &self.grid);
                    for v in &mut c {
                        *v *= rd.f_hat[l];
                    }
                    c
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Cols { init, z, g })
    }

    /// Variable projection: residual of the best linear combination, and its
    /// coefficients [1/a (if z is present), g-basis coefficients / a].
    fn project(&self, cols: &[Cols]) -> Option<(Vec<f64>, Vec<f64>)> {
        let len = self.target.len();
        let mut y = self.target.clone();
        let p = self.basis.len();
        let ncols = usize::from(self.has_z) + if self.has_f { p } else { 0 };
        let mut a = DMatrix::zeros(len, ncols);
        for c in cols {
            for i in 0..len {
                y[i] -= c.init[i];
            }
            if !c.z.is_empty() {
                for i in 0..len {
                    a[(i, 0)] += c.z[i];
                }
            }
            let off = usize::from(self.has_z);
            for (q, gc) in c.g.iter().enumerate() {
                for i in 0..len {
                    a[(i, off + q)] += gc[i];
                }
            }
        }
        lsq::linear(&a, &y)
    }
}

#[derive(Clone, Copy, Debug)]
enum Rates {
    /// θ = [v, ln μ₀, u]: μⱼ = μ₀(λⱼ/λ₀)^β with β = 1.1σ(u).
    PowerLaw,
    /// θ = [v, ln μ₀, …, ln μ_{L-1}]; later groups continue the last slope.
    Free { fitted: usize },
    /// θ = [v, u₁..u_m, w₁..w_m]: μ = Σ e^{wⱼ}λ^{βⱼ}, β from u as in the
    /// decomposition.
    Terms { m: usize },
}

fn alpha_of(v: f64) -> f64 {
    1.0 + logistic(v)
}

fn rates_of(kind: Rates, theta: &[f64], lambdas: &[f64]) -> (f64, Vec<f64>) {
    let alpha = alpha_of(theta[0]);
    let mus = match kind {
        Rates::PowerLaw => lambdas
            .iter()
            .map(|l| theta[1].exp() * (l / lambdas[0]).powf(1.1 * logistic(theta[2])))
            .collect(),
        Rates::Free { fitted } => {
            let mut m: Vec<f64> = theta[1..=fitted].iter().map(|v| v.exp()).collect();
            if lambdas.len() > fitted {
                let slope = if fitted >= 2 {
                    (m[fitted - 1] / m[fitted - 2]).ln() / (lambdas[fitted - 1] / lambdas[fitted - 2]).ln()
                } else {
                    1.0
                };
                for l in &lambdas[fitted..] {
                    m.push(m[fitted - 1] * (l / lambdas[fitted - 1]).powf(slope));
                }
            }
            m
        }
        Rates::Terms { m } => {
            let model = terms_of(m, theta);
            lambdas.iter().map(|&l| model.rate(l)).collect()
        }
    };
    (alpha, mus)
}

fn terms_of(m: usize, theta: &[f64]) -> TermModel {
    TermModel {
        betas: betas_of(&theta[1..=m]),
        coeffs: theta[m + 1..=2 * m].iter().map(|w| w.exp()).collect(),
        residual: 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub relative_residual: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub termination: String,
}

struct TraceFit {
    alpha: f64,
    mus: Vec<f64>,
    coef: Vec<f64>,
    theta: Vec<f64>,
    residual: Vec<f64>,
    summary: FitSummary,
}

fn fit_trace(model: &TraceModel, kind: Rates, theta0: &[f64]) -> Option<TraceFit> {
    let columns = |theta: &[f64]| -> Option<(f64, Vec<f64>, Vec<Cols>)> {
        let (alpha, mus) = rates_of(kind, theta, &model.lambdas);
        if mus.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return None;
        }
        let cols = mus
            .iter()
            .enumerate()
            .map(|(j, &mu)| model.cols(alpha, mu, j).ok())
            .collect::<Option<Vec<_>>>()?;
        Some((alpha, mus, cols))
    };
    let residual = |theta: &[f64]| -> Option<Vec<f64>> {
        let (_, _, cols) = columns(theta)?;
        model.project(&cols).map(|p| p.1)
    };
    let jacobian = |theta: &[f64]| -> Option<DMatrix<f64>> {
        let (alpha, mus, mut cols) = columns(theta)?;
        let r0 = model.project(&cols)?.1;
        let mut jac = DMatrix::zeros(r0.len(), theta.len());
        let mut tp = theta.to_vec();
        for p in 0..theta.len() {
            let h = 1e-7 * theta[p].abs().max(1.0);
            tp[p] = theta[p] + h;
            let (alpha_p, mus_p) = rates_of(kind, &tp, &model.lambdas);
            let mut saved = Vec::new();
            for j in 0..mus.len() {
                if alpha_p != alpha || mus_p[j] != mus[j] {
                    let c = model.cols(alpha_p, mus_p[j], j).ok()?;
                    saved.push((j, std::mem::replace(&mut cols[j], c)));
                }
            }
            let rp = model.project(&cols)?.1;
            for (j, c) in saved {
                cols[j] = c;
            }
            tp[p] = theta[p];
            for i in 0..r0.len() {
                jac[(i, p)] = (rp[i] - r0[i]) / h;
            }
        }
        Some(jac)
    };
    let out = lsq::minimize(theta0, residual, jacobian, 60);
    let (alpha, mus, cols) = columns(&out.x)?;
    let (coef, res) = model.project(&cols)?;
    let norm = model.target.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel = res.iter().map(|v| v * v).sum::<f64>().sqrt() / norm.max(f64::MIN_POSITIVE);
    Some(TraceFit {
        alpha,
        mus,
        coef,
        theta: out.x,
        residual: res,
        summary: FitSummary {
            relative_residual: rel,
            evaluations: out.evaluations,
            converged: out.success,
            termination: out.termination,
        },
    })
}

// ------------------------------------------------------------- pipeline

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub noise_sigma: f64,
    pub pencil_order: usize,
    pub pencil_poles: Vec<Complex64>,
    pub seed_alpha: Option<f64>,
    pub power_law_fit: Option<FitSummary>,
    pub free_fit: Option<FitSummary>,
    /// Standard deviation of α from the linearized free fit.
    pub alpha_std: f64,
    /// Relative standard deviations of the fitted group rates.
    pub mu_rel_std: Vec<f64>,
    pub poles_partial: bool,
    pub alpha_dispersion: f64,
    pub decomposition_residuals: Vec<f64>,
    pub m_decomposition: usize,
    pub alpha_poles: f64,
    pub a_residue: f64,
    /// (m, residual sum of squares) of each refined m-term trace fit.
    pub refinement_rss: Vec<(usize, f64)>,
    pub refined_fit: Option<FitSummary>,
    pub refined_alpha_std: f64,
    pub beta_std: Vec<f64>,
    /// Relative standard deviations of the refined bⱼ/a.
    pub coeff_rel_std: Vec<f64>,
    pub a_method: Option<AMethod>,
    pub a_per_pole: Vec<(usize, f64)>,
    pub g_lambda: f64,
    pub g_residual: f64,
    pub g_target: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveredModel {
    pub alpha_hat: f64,
    /// Rates of the groups listed in `groups`, ascending.
    pub mu_hat: Vec<f64>,
    pub groups: Vec<usize>,
    pub m_hat: usize,
    pub beta_hat: Vec<f64>,
    pub b_over_a_hat: Vec<f64>,
    pub a_hat: f64,
    pub b_hat: Vec<f64>,
    /// ĝ on the source grid.
    pub g_hat: Vec<f64>,
    pub dt: f64,
    pub poles: Vec<PoleEstimate>,
    pub diagnostics: Diagnostics,
}

impl RecoveredModel {
    pub fn terms(&self) -> Vec<Term> {
        self.b_hat
            .iter()
            .zip(&self.beta_hat)
            .map(|(&b, &beta)| Term { b, beta })
            .collect()
    }
}

/// Best `keep` power-law parameters from a grid over (α, μ₀, β), evaluated
/// on a subsampled trace.
fn coarse_starts(model: &TraceModel, keep: usize) -> Result<Vec<Vec<f64>>> {
    let ns = model.grid.n_src;
    let factor = [4, 3, 2].into_iter().find(|f| ns % f == 0 && ns / f >= 20).unwrap_or(1);
    let coarse = if factor > 1 { model.coarse(factor)? } else { model.coarse(1)? };
    let mut scored = Vec::new();
    for alpha in [1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9] {
        for beta in [0.3, 0.6, 0.9] {
            for mu0 in [1.0, 3.0, 10.0, 30.0, 100.0] {
                let theta = vec![logit(alpha - 1.0), f64::ln(mu0), logit(beta / 1.1)];
                if let Some(r) = coarse.residual_norm(Rates::PowerLaw, &theta) {
                    scored.push((r, theta));
                }
            }
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(scored.into_iter().take(keep).map(|s| s.1).collect())
}

/// Seed α and the first rate from the dominant tail exponent.
fn pencil_seed(trace: &TimeTrace, t_src: f64, opts: &InvertOptions, diag: &mut Diagnostics) -> Result<Option<(f64, f64)>> {
    match find_poles_data(trace, t_src, 3, opts.pencil) {
        Ok(fit) => {
            diag.pencil_order = fit.order;
            diag.pencil_poles = fit.poles.iter().map(|p| p.location).collect();
            let best = fit
                .poles
                .iter()
                .filter(|p| p.location.arg() > PI / 2.0 + 0.03 && p.location.arg() < PI - 0.01)
                .max_by(|a, b| a.residue.norm().total_cmp(&b.residue.norm()));
            Ok(best.map(|p| {
                let alpha = PI / p.location.arg();
                (alpha, p.location.norm().powf(alpha))
            }))
        }
        Err(e @ Error::Sampling(_)) => Err(e),
        Err(e) => {
            diag.warnings.push(format!("tail pencil gave no seed: {e}"));
            Ok(None)
        }
    }
}

/// Full recovery from one trace.
pub fn invert_full(trace: &TimeTrace, known: &Known, opts: &InvertOptions) -> Result<RecoveredModel> {
    let mut diag = Diagnostics::default();
    let t_end = trace.t_end();
    let grid = TimeGrid::new(known.t_src, t_end, trace.dt).map_err(|e| e.at_stage("poles"))?;
    if trace.values.len() != grid.n_obs + 1 {
        return Err(Error::Sampling("trace length is not a whole number of steps".into()).at_stage("poles"));
    }
    let src = SourceSpec {
        g: Vec::new(),
        f: known.f.clone(),
        z: known.z.clone(),
        n: known.n,
    };
    let rd = reduce_data(&known.gammas, &known.initial, &src, &known.spectrum, &grid).map_err(|e| e.at_stage("poles"))?;
    let active: Vec<usize> = (0..rd.groups()).filter(|&l| has_data(&rd, l)).collect();
    if active.len() < 3 {
        return Err(Error::Estimation(format!("only {} groups carry data", active.len())).at_stage("poles"));
    }
    let sigma = opts.noise_sigma.unwrap_or_else(|| noise_sigma(&trace.values));
    diag.noise_sigma = sigma;
    let basis = g_basis(&grid, known.n, opts.g_basis);
    let model = TraceModel {
        grid,
        rd: rd.clone(),
        n: known.n,
        lambdas: active.iter().map(|&l| known.spectrum.group_lambda(l)).collect(),
        groups: active.clone(),
        basis: basis.clone(),
        target: trace.values.clone(),
        has_z: active.iter().any(|&l| !rd.z_hat[l].is_empty()),
        has_f: active.iter().any(|&l| rd.f_hat[l] != 0.0),
    };

    // Seeds and the power-law stage.
    let seed = pencil_seed(trace, known.t_src, opts, &mut diag).map_err(|e| e.at_stage("poles"))?;
    diag.seed_alpha = seed.map(|s| s.0);
    let to_theta = |alpha: f64, mu0: f64, beta: f64| vec![logit(alpha - 1.0), mu0.ln(), logit(beta / 1.1)];
    let mut starts = Vec::new();
    if let Some((alpha, mu0)) = seed {
        starts.push(to_theta(alpha.clamp(1.05, 1.95), mu0, 0.7));
    }
    starts.extend(coarse_starts(&model, 2).map_err(|e| e.at_stage("poles"))?);
    let stage_a = starts
        .iter()
        .filter_map(|t| fit_trace(&model, Rates::PowerLaw, t))
        .min_by(|a, b| a.summary.relative_residual.total_cmp(&b.summary.relative_residual));
    let stage_a = stage_a.ok_or_else(|| Error::Fit("trace fit failed from every start".into()).at_stage("poles"))?;
    diag.power_law_fit = Some(stage_a.summary.clone());

    // Free rates for the first groups.
    let fitted = active.len().min(opts.max_groups);
    let mut theta = vec![stage_a.theta[0]];
    theta.extend(stage_a.mus[..fitted].iter().map(|m| m.ln()));
    let stage_b = fit_trace(&model, Rates::Free { fitted }, &theta)
        .ok_or_else(|| Error::Fit("free-rate trace fit failed".into()).at_stage("poles"))?;
    diag.free_fit = Some(stage_b.summary.clone());
    linearized_errors(&model, &stage_b, fitted, &mut diag);

    // Poles of the fitted transform.
    let has_z = model.has_z;
    let (inv_a, gc) = if has_z {
        (stage_b.coef[0], &stage_b.coef[1..])
    } else {
        (1.0, &stage_b.coef[..])
    };
    if !(inv_a > 0.0) {
        return Err(Error::Estimation(format!("trace fit gives 1/a = {inv_a}")).at_stage("poles"));
    }
    // Groups whose rates the trace pins down; the rest stay out of the pole stage.
    let keep: Vec<usize> = (0..fitted)
        .filter(|&j| diag.mu_rel_std.get(j).is_none_or(|s| *s < RATE_STD_MAX))
        .collect();
    if keep.len() < 3 {
        return Err(Error::Estimation(format!(
            "only {} group rates are determined to {RATE_STD_MAX} relative",
            keep.len()
        ))
        .at_stage("poles"));
    }
    let fit_groups: Vec<usize> = keep.iter().map(|&j| active[j]).collect();
    let mut g_fit = vec![0.0; grid.n_src + 1];
    if model.has_f {
        for (c, b) in gc.iter().zip(&basis) {
            for (g, v) in g_fit.iter_mut().zip(b) {
                *g += c / inv_a * v;
            }
        }
    }
    let sub = |v: &[f64]| fit_groups.iter().map(|&l| v[l]).collect::<Vec<_>>();
    let rd_fit = ReducedData {
        phi_hat: sub(&rd.phi_hat),
        psi_hat: sub(&rd.psi_hat),
        f_hat: sub(&rd.f_hat),
        z_hat: fit_groups.iter().map(|&l| rd.z_hat[l].clone()).collect(),
        z_nondegenerate: Vec::new(),
        f_nonzero: Vec::new(),
    };
    let mus_fit: Vec<f64> = keep.iter().map(|&j| stage_b.mus[j]).collect();
    let hm = HModel::new(stage_b.alpha, 1.0 / inv_a, mus_fit.clone(), rd_fit, g_fit, grid.dt)
        .map_err(|e| e.at_stage("poles"))?;
    let (mu_lo, mu_hi) = mus_fit.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &m| (a.min(m), b.max(m)));
    let region = ScanRegion::for_hypothesis(mu_lo, mu_hi, stage_b.alpha, stage_b.alpha);
    let search = find_poles_model(|s| hm.eval(s), region, keep.len()).map_err(|e| e.at_stage("poles"))?;
    diag.poles_partial = search.partial;
    let mut poles = Vec::new();
    for mut p in search.poles {
        let nearest = (0..keep.len())
            .map(|j| (j, (hm.pole(j) - p.location).norm() / hm.pole(j).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match nearest {
            Some((j, d)) if d < 1e-6 => {
                p.group_index = Some(fit_groups[j]);
                poles.push(p);
            }
            _ => diag.warnings.push(format!("pole at {} matches no fitted group", p.location)),
        }
    }
    poles.sort_by(|a, b| a.location.norm().total_cmp(&b.location.norm()));

    let alpha_est = recover_alpha(&poles).map_err(|e| e.at_stage("alpha"))?;
    diag.alpha_dispersion = alpha_est.dispersion;
    let alpha = alpha_est.alpha;
    let mu_hat = recover_mu(&poles, alpha).map_err(|e| e.at_stage("mu"))?;
    let groups: Vec<usize> = poles.iter().map(|p| p.group_index.unwrap_or(usize::MAX)).collect();
    if groups.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Matching("pole moduli are not increasing along the eigenvalues".into()).at_stage("mu"));
    }
    let lambdas: Vec<f64> = groups.iter().map(|&l| known.spectrum.group_lambda(l)).collect();
    let rel_sigma: Vec<f64> = groups
        .iter()
        .map(|l| {
            let j = active.iter().position(|g| g == l).unwrap_or(0);
            diag.mu_rel_std.get(j).copied().unwrap_or(0.0).max(opts.decomposition_tol)
        })
        .collect();
    let dec = decompose_weighted(&mu_hat, &lambdas, &rel_sigma, opts.max_terms, DECOMPOSITION_CHI)
        .map_err(|e| e.at_stage("decompose"))?;
    diag.decomposition_residuals = dec.residuals.clone();
    diag.m_decomposition = dec.m;
    if !dec.selected {
        diag.warnings.push(format!(
            "no multiterm model fits the rates to their uncertainty; best weighted residual {:.2e} at m = {}",
            dec.residual, dec.m
        ));
    }

    let a_est = recover_a(&poles, alpha, &rd, grid.dt, &basis).map_err(|e| e.at_stage("a"))?;
    diag.a_method = Some(a_est.method);
    diag.a_per_pole = a_est.per_pole.clone();
    diag.a_residue = a_est.a;
    diag.alpha_poles = alpha;

    // Refinement: m-term fits of the whole trace seeded by the decomposition.
    let h_norm = trace.values.iter().map(|v| v * v).sum::<f64>();
    let mut refits = Vec::new();
    let mut prev: Option<TermModel> = None;
    for m in 1..=opts.max_terms {
        let cand = match (dec.candidates.get(m - 1).cloned().flatten(), &prev) {
            (Some(c), _) => c,
            // Extend the previous model with a weak slower term.
            (None, Some(p)) => {
                let mut c = p.clone();
                c.betas.push(0.4 * c.betas[m - 2]);
                c.coeffs.push(0.1 * c.coeffs[m - 2]);
                c
            }
            (None, None) => continue,
        };
        let mut theta = vec![logit(alpha - 1.0)];
        theta.extend(params_of(&cand.betas));
        theta.extend(cand.coeffs.iter().map(|c| c.ln()));
        if let Some(fit) = fit_trace(&model, Rates::Terms { m }, &theta) {
            let rss: f64 = fit.residual.iter().map(|v| v * v).sum();
            diag.refinement_rss.push((m, rss));
            prev = Some(terms_of(m, &fit.theta));
            refits.push((m, rss, fit));
            // A fit already at the noise level leaves nothing for more terms.
            let samples = trace.values.len() as f64;
            let floor = (sigma * sigma).max(1e-18 * h_norm / samples) * samples;
            if rss <= floor * (1.0 + 4.0 * (2.0 / samples).sqrt()) {
                break;
            }
        }
    }
    let rss_min = refits.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let m_max = refits.iter().map(|r| r.0).max().ok_or_else(|| {
        Error::Fit("no multiterm model could be refined against the trace".into()).at_stage("decompose")
    })?;
    let samples = trace.values.len() as f64;
    let s2 = (sigma * sigma)
        .max(rss_min / (samples - (2 * m_max + 1 + stage_b.coef.len()) as f64).max(1.0))
        .max(1e-18 * h_norm / samples);
    let (m_hat, _, refined) = refits
        .into_iter()
        .find(|(m, rss, _)| *rss <= rss_min + 10.0 * s2 * (2 * (m_max - m)) as f64)
        .expect("the best refinement satisfies its own bound");
    let terms = terms_of(m_hat, &refined.theta);
    let alpha = refined.alpha;
    let a_hat = if has_z && refined.coef[0] > 0.0 { 1.0 / refined.coef[0] } else { a_est.a };
    diag.refined_fit = Some(refined.summary.clone());
    refined_errors(&model, &refined, m_hat, &mut diag);

    let mus_all: Vec<f64> = (0..rd.groups()).map(|l| terms.rate(known.spectrum.group_lambda(l))).collect();
    let g = recover_g(trace, alpha, a_hat, &mus_all, &rd, &grid, known.n, opts.regularization, sigma)
        .map_err(|e| e.at_stage("g"))?;
    diag.g_lambda = g.lambda;
    diag.g_residual = g.residual_norm;
    diag.g_target = g.target_norm;
    if let Some(w) = &g.warning {
        diag.warnings.push(w.clone());
    }

    Ok(RecoveredModel {
        alpha_hat: alpha,
        mu_hat,
        groups,
        m_hat,
        b_hat: terms.coeffs.iter().map(|c| c * a_hat).collect(),
        beta_hat: terms.betas,
        b_over_a_hat: terms.coeffs,
        a_hat,
        g_hat: g.g,
        dt: grid.dt,
        poles,
        diagnostics: diag,
    })
}

/// Gauss-Newton covariance of θ with the residual variance as noise level.
fn covariance(model: &TraceModel, fit: &TraceFit, kind: Rates) -> Option<DMatrix<f64>> {
    let r = |theta: &[f64]| -> Option<Vec<f64>> {
        let (alpha, mus) = rates_of(kind, theta, &model.lambdas);
        let cols = mus
            .iter()
            .enumerate()
            .map(|(j, &mu)| model.cols(alpha, mu, j).ok())
            .collect::<Option<Vec<_>>>()?;
        model.project(&cols).map(|p| p.1)
    };
    let j = lsq::forward_jacobian(&fit.theta, &fit.residual, r)?;
    let dof = (fit.residual.len() as f64 - fit.theta.len() as f64 - fit.coef.len() as f64).max(1.0);
    let s2 = fit.residual.iter().map(|v| v * v).sum::<f64>() / dof;
    (j.transpose() * &j).try_inverse().map(|inv| inv * s2)
}

/// Standard deviations of f(θ) by the delta method.
fn propagate<F: Fn(&[f64]) -> Vec<f64>>(cov: &DMatrix<f64>, theta: &[f64], f: F) -> Vec<f64> {
    let f0 = f(theta);
    let g = lsq::forward_jacobian(theta, &f0, |t| Some(f(t))).expect("total function");
    let c = &g * cov * g.transpose();
    (0..f0.len()).map(|i| c[(i, i)].max(0.0).sqrt()).collect()
}

fn linearized_errors(model: &TraceModel, fit: &TraceFit, fitted: usize, diag: &mut Diagnostics) {
    let Some(cov) = covariance(model, fit, Rates::Free { fitted }) else {
        diag.warnings.push("free trace fit has a singular Jacobian".into());
        return;
    };
    diag.alpha_std = propagate(&cov, &fit.theta, |t| vec![alpha_of(t[0])])[0];
    diag.mu_rel_std = (1..=fitted).map(|p| cov[(p, p)].max(0.0).sqrt()).collect();
}

/// Standard deviations of α, the exponents and the relative coefficients of
/// the refined m-term fit.
fn refined_errors(model: &TraceModel, fit: &TraceFit, m: usize, diag: &mut Diagnostics) {
    let Some(cov) = covariance(model, fit, Rates::Terms { m }) else {
        diag.warnings.push("refined trace fit has a singular Jacobian".into());
        return;
    };
    let sd = propagate(&cov, &fit.theta, |t| {
        let mut v = vec![alpha_of(t[0])];
        v.extend(betas_of(&t[1..=m]));
        v
    });
    diag.refined_alpha_std = sd[0];
    diag.beta_std = sd[1..].to_vec();
    diag.coeff_rel_std = (m + 1..=2 * m).map(|p| cov[(p, p)].max(0.0).sqrt()).collect();
}
