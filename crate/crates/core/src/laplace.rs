//! Laplace-domain view of the observation.
//!
//! H(s) = s^{α-2} Σₗ Nₗ(s)/(s^α + μₗ) with Nₗ(s) = sφ̂ₗ + ψ̂ₗ + (1/a)(f̂ₗG(s) + Ẑₗ(s)),
//! one term per distinct eigenvalue. Each term has a simple pole at
//! sₗ = μₗ^{1/α}e^{iπ/α} (and its conjugate) with residue Nₗ(sₗ)/(αsₗ),
//! unless Nₗ(sₗ) = 0.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{InitialData, SourceSpec, TimeGrid, TimeTrace};
use crate::signal::{endpoint_derivative, laplace_weights, noise_sigma};
use crate::spectrum::Spectrum;

/// Data summed over each group of equal eigenvalues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedData {
    pub phi_hat: Vec<f64>,
    pub psi_hat: Vec<f64>,
    pub f_hat: Vec<f64>,
    /// ẑₗ sampled on the source grid; empty for ẑₗ ≡ 0.
    pub z_hat: Vec<Vec<f64>>,
    /// Groups with ẑₗ^{(n-1)}(T) ≠ 0.
    pub z_nondegenerate: Vec<usize>,
    /// Groups with f̂ₗ ≠ 0.
    pub f_nonzero: Vec<usize>,
}

impl ReducedData {
    pub fn groups(&self) -> usize {
        self.phi_hat.len()
    }
}

/// Relative size below which a group sum or endpoint derivative counts as zero.
pub const DEGENERACY_TOL: f64 = 1e-9;

pub fn reduce_data(
    gammas: &[f64],
    init: &InitialData,
    src: &SourceSpec,
    spec: &Spectrum,
    grid: &TimeGrid,
) -> Result<ReducedData> {
    if gammas.len() != spec.len() {
        return Err(Error::Sampling(format!(
            "{} weights for {} modes",
            gammas.len(),
            spec.len()
        )));
    }
    let get = |v: &[f64], k: usize| v.get(k).copied().unwrap_or(0.0);
    let len = grid.n_src + 1;
    let mut rd = ReducedData {
        phi_hat: Vec::new(),
        psi_hat: Vec::new(),
        f_hat: Vec::new(),
        z_hat: Vec::new(),
        z_nondegenerate: Vec::new(),
        f_nonzero: Vec::new(),
    };
    let f_scale = spec
        .modes
        .iter()
        .enumerate()
        .map(|(k, _)| (gammas[k] * get(&src.f, k)).abs())
        .fold(0.0, f64::max);
    let mut z_ends = Vec::new();
    for (l, range) in spec.groups.iter().enumerate() {
        let mut phi = 0.0;
        let mut psi = 0.0;
        let mut f = 0.0;
        let mut z = vec![0.0; len];
        let mut any_z = false;
        let mut f_abs = 0.0;
        for k in range.clone() {
            let g = gammas[k];
            phi += g * get(&init.phi, k);
            psi += g * get(&init.psi, k);
            f += g * get(&src.f, k);
            f_abs += (g * get(&src.f, k)).abs();
            if let Some(zk) = src.z.get(k).filter(|z| !z.is_empty()) {
                if zk.len() != len {
                    return Err(Error::Sampling(format!("z[{k}] has {} samples, grid needs {len}", zk.len())));
                }
                for (a, b) in z.iter_mut().zip(zk) {
                    *a += g * b;
                }
                any_z = true;
            }
        }
        // Cancellation inside a group leaves round-off; treat that as zero.
        if f.abs() <= DEGENERACY_TOL * f_abs.max(f_scale * 1e-3) {
            f = 0.0;
        }
        if f != 0.0 {
            rd.f_nonzero.push(l);
        }
        let z_end = if any_z && src.n >= 1 {
            endpoint_derivative(&z, grid.dt, src.n as usize - 1, true)?
        } else {
            0.0
        };
        z_ends.push((l, z_end, z.iter().fold(0.0f64, |m, v| m.max(v.abs()))));
        rd.phi_hat.push(phi);
        rd.psi_hat.push(psi);
        rd.f_hat.push(f);
        rd.z_hat.push(if any_z && z.iter().any(|v| *v != 0.0) { z } else { Vec::new() });
    }
    let t = grid.t_src();
    let z_scale = z_ends.iter().map(|e| e.2).fold(0.0, f64::max);
    let order = src.n.saturating_sub(1) as i32;
    for (l, d, _) in z_ends {
        if z_scale > 0.0 && d.abs() > 1e-6 * z_scale / t.powi(order) {
            rd.z_nondegenerate.push(l);
        }
    }
    Ok(rd)
}

/// Closed-form meromorphic model of the observation transform.
#[derive(Clone, Debug)]
pub struct HModel {
    pub alpha: f64,
    pub a: f64,
    /// μ for each group.
    pub mus: Vec<f64>,
    pub data: ReducedData,
    /// g on the source grid (may be empty when every f̂ₗ is zero).
    pub g: Vec<f64>,
    pub dt: f64,
}

/// Poles closer than this (relative) are reported as near-singular.
pub const NEAR_POLE: f64 = 1e-8;

impl HModel {
    pub fn new(alpha: f64, a: f64, mus: Vec<f64>, data: ReducedData, g: Vec<f64>, dt: f64) -> Result<Self> {
        if mus.len() != data.groups() {
            return Err(Error::Sampling(format!(
                "{} rates for {} data groups",
                mus.len(),
                data.groups()
            )));
        }
        let lens: Vec<usize> = std::iter::once(&g)
            .chain(&data.z_hat)
            .filter(|v| !v.is_empty())
            .map(Vec::len)
            .collect();
        if lens.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Sampling("g and z samples must share one source grid".into()));
        }
        Ok(HModel {
            alpha,
            a,
            mus,
            data,
            g,
            dt,
        })
    }

    /// Upper-half-plane pole of group l.
    pub fn pole(&self, l: usize) -> Complex64 {
        Complex64::from_polar(self.mus[l].powf(1.0 / self.alpha), PI / self.alpha)
    }

    fn source_len(&self) -> Option<usize> {
        if !self.g.is_empty() {
            return Some(self.g.len());
        }
        self.data.z_hat.iter().find(|z| !z.is_empty()).map(Vec::len)
    }

    /// Nₗ(s) for every group.
    pub fn numerators(&self, s: Complex64) -> Vec<Complex64> {
        let zero = Complex64::new(0.0, 0.0);
        let w = self.source_len().map(|n| laplace_weights(s, self.dt, n)).unwrap_or_default();
        let dot = |v: &[f64]| -> Complex64 { w.iter().zip(v).map(|(w, v)| w * v).sum() };
        let big_g = if self.g.is_empty() { zero } else { dot(&self.g) };
        (0..self.data.groups())
            .map(|l| {
                let zt = dot(&self.data.z_hat[l]);
                s * self.data.phi_hat[l] + self.data.psi_hat[l] + (self.data.f_hat[l] * big_g + zt) / self.a
            })
            .collect()
    }

    pub fn eval(&self, s: Complex64) -> Result<Complex64> {
        let sa = s.powf(self.alpha);
        for (l, mu) in self.mus.iter().enumerate() {
            let p = self.pole(l);
            if (s - p).norm() <= NEAR_POLE * p.norm() || (s - p.conj()).norm() <= NEAR_POLE * p.norm() {
                return Err(Error::NearSingular(format!("s = {s} is at the pole of group {l} (mu = {mu})")));
            }
        }
        let n = self.numerators(s);
        let sum: Complex64 = n.iter().zip(&self.mus).map(|(n, mu)| n / (sa + mu)).sum();
        Ok(s.powf(self.alpha - 2.0) * sum)
    }

    /// Nₗ(sₗ)/(α sₗ).
    pub fn residue(&self, l: usize) -> Complex64 {
        let p = self.pole(l);
        self.numerators(p)[l] / (self.alpha * p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoleMethod {
    ModelScan,
    DataPencil,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoleEstimate {
    pub location: Complex64,
    pub residue: Complex64,
    pub group_index: Option<usize>,
    pub method: PoleMethod,
    /// Model scan: last relative Newton step. Pencil: σ₀/σ_M of the retained
    /// signal subspace.
    pub condition: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoleSearch {
    pub poles: Vec<PoleEstimate>,
    /// Fewer poles than requested were found.
    pub partial: bool,
    pub diagnostics: Vec<String>,
}

/// Search window in the upper half plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRegion {
    pub r_min: f64,
    pub r_max: f64,
    pub arg_min: f64,
    pub arg_max: f64,
}

impl ScanRegion {
    /// Moduli covering μ ∈ [mu_min, mu_max] for α ∈ [alpha_min, alpha_max],
    /// arguments over (π/2, π).
    pub fn for_hypothesis(mu_min: f64, mu_max: f64, alpha_min: f64, alpha_max: f64) -> Self {
        let lo = mu_min.powf(1.0 / alpha_min).min(mu_min.powf(1.0 / alpha_max));
        let hi = mu_max.powf(1.0 / alpha_min).max(mu_max.powf(1.0 / alpha_max));
        ScanRegion {
            r_min: lo / 1.5,
            r_max: hi * 1.5,
            arg_min: PI / 2.0,
            arg_max: PI,
        }
    }
}

pub const SCAN_PER_DECADE: usize = 64;
pub const SCAN_ARGS: usize = 256;
const RESIDUE_NODES: usize = 32;
const RESIDUE_RADIUS: f64 = 1e-3;

/// Poles of an evaluator in the scan region: coarse log-polar scan of |1/H|,
/// Newton refinement on 1/H, residues by a contour average. Sorted by modulus.
pub fn find_poles_model<F>(h: F, region: ScanRegion, n_poles: usize) -> Result<PoleSearch>
where
    F: Fn(Complex64) -> Result<Complex64>,
{
    if !(region.r_min > 0.0 && region.r_max > region.r_min && region.arg_max > region.arg_min) {
        return Err(Error::param(format!("bad scan region {region:?}")));
    }
    let decades = (region.r_max / region.r_min).log10();
    let nr = ((decades * SCAN_PER_DECADE as f64).ceil() as usize).max(3) + 1;
    let na = SCAN_ARGS;
    let point = |i: usize, j: usize| {
        let r = region.r_min * (region.r_max / region.r_min).powf(i as f64 / (nr - 1) as f64);
        let th = region.arg_min + (region.arg_max - region.arg_min) * (j as f64 + 0.5) / na as f64;
        Complex64::from_polar(r, th)
    };
    let recip = |s: Complex64| -> f64 {
        match h(s) {
            Ok(v) if v.norm() > 0.0 => 1.0 / v.norm(),
            Ok(_) => f64::INFINITY,
            Err(_) => 0.0,
        }
    };
    let mut grid = vec![0.0; nr * na];
    for i in 0..nr {
        for j in 0..na {
            grid[i * na + j] = recip(point(i, j));
        }
    }
    let mut diagnostics = Vec::new();
    let mut found: Vec<PoleEstimate> = Vec::new();
    for i in 1..nr - 1 {
        for j in 1..na - 1 {
            let v = grid[i * na + j];
            let is_min = (-1i64..=1).all(|di| {
                (-1i64..=1).all(|dj| {
                    (di == 0 && dj == 0) || v < grid[(i as i64 + di) as usize * na + (j as i64 + dj) as usize]
                })
            });
            if !is_min {
                continue;
            }
            match refine_pole(&h, point(i, j)) {
                Ok((s, step)) => {
                    let (s, residue) = polish_pole(&h, s)?;
                    let dup = found.iter().any(|p| (p.location - s).norm() <= 1e-6 * s.norm());
                    let inside = s.im > 0.0 && s.norm() >= region.r_min / 1.1 && s.norm() <= region.r_max * 1.1;
                    if !dup && inside {
                        if residue.norm() > 0.0 && residue.is_finite() {
                            found.push(PoleEstimate {
                                location: s,
                                residue,
                                group_index: None,
                                method: PoleMethod::ModelScan,
                                condition: step,
                            });
                        }
                    }
                }
                Err(e) => diagnostics.push(format!("candidate near {}: {e}", point(i, j))),
            }
        }
    }
    found.sort_by(|a, b| a.location.norm().total_cmp(&b.location.norm()));
    found.truncate(n_poles);
    Ok(PoleSearch {
        partial: found.len() < n_poles,
        poles: found,
        diagnostics,
    })
}

fn eval_recip<F: Fn(Complex64) -> Result<Complex64>>(h: &F, s: Complex64) -> Option<Complex64> {
    match h(s) {
        Ok(v) if v.norm() > 0.0 && v.is_finite() => Some(1.0 / v),
        Ok(v) if v.norm() > 0.0 => Some(Complex64::new(0.0, 0.0)),
        Err(Error::NearSingular(_)) => Some(Complex64::new(0.0, 0.0)),
        _ => None,
    }
}

/// Newton iteration on 1/H; returns the pole and the last relative step.
fn refine_pole<F: Fn(Complex64) -> Result<Complex64>>(h: &F, start: Complex64) -> Result<(Complex64, f64)> {
    let mut s = start;
    let mut last = f64::INFINITY;
    for _ in 0..60 {
        let f = eval_recip(h, s).ok_or_else(|| Error::Estimation(format!("cannot evaluate near {s}")))?;
        if f.norm() == 0.0 {
            return Ok((s, 0.0));
        }
        let d = 1e-6 * s.norm();
        let fp = eval_recip(h, s + d).zip(eval_recip(h, s - d));
        let Some((a, b)) = fp else {
            return Err(Error::Estimation(format!("derivative unavailable near {s}")));
        };
        let deriv = (a - b) / (2.0 * d);
        if deriv.norm() == 0.0 || !deriv.is_finite() {
            return Err(Error::Estimation(format!("flat reciprocal near {s}")));
        }
        let step = f / deriv;
        s -= step;
        last = step.norm() / s.norm();
        if !s.is_finite() || s.norm() == 0.0 {
            return Err(Error::Estimation("Newton iteration diverged".into()));
        }
        if last < 1e-14 {
            break;
        }
    }
    if last < 1e-10 {
        Ok((s, last))
    } else {
        Err(Error::Estimation(format!(
            "Newton did not converge from {start} (last relative step {last:.1e})"
        )))
    }
}

/// Moves a pole estimate to c + M₁/M₀, where Mⱼ = (1/2πi)∮(s - c)ʲH(s)ds over a
/// small circle around c, and returns it with the residue M₀. Avoids
/// evaluating H closer to the pole than the circle radius.
fn polish_pole<F: Fn(Complex64) -> Result<Complex64>>(h: &F, c: Complex64) -> Result<(Complex64, Complex64)> {
    let rho = RESIDUE_RADIUS * c.norm();
    let mut m0 = Complex64::new(0.0, 0.0);
    let mut m1 = Complex64::new(0.0, 0.0);
    for j in 0..RESIDUE_NODES {
        let e = Complex64::from_polar(rho, 2.0 * PI * (j as f64 + 0.5) / RESIDUE_NODES as f64);
        let v = h(c + e)? * e;
        m0 += v;
        m1 += v * e;
    }
    m0 /= RESIDUE_NODES as f64;
    m1 /= RESIDUE_NODES as f64;
    if m0.norm() == 0.0 || !m0.is_finite() {
        return Ok((c, m0));
    }
    let s = c + m1 / m0;
    if (s - c).norm() > 0.5 * rho {
        return Ok((c, m0));
    }
    Ok((s, contour_residue(h, s)?))
}

/// lim (s - s*)H(s) as the mean of H(s* + ρe^{iθ})ρe^{iθ} over a small circle.
pub fn contour_residue<F: Fn(Complex64) -> Result<Complex64>>(h: &F, s: Complex64) -> Result<Complex64> {
    let rho = RESIDUE_RADIUS * s.norm();
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..RESIDUE_NODES {
        let e = Complex64::from_polar(rho, 2.0 * PI * (j as f64 + 0.5) / RESIDUE_NODES as f64);
        acc += h(s + e)? * e;
    }
    Ok(acc / RESIDUE_NODES as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PencilFit {
    pub poles: Vec<PoleEstimate>,
    /// Every exponent of the fitted model, with its amplitude.
    pub components: Vec<(Complex64, Complex64)>,
    pub singular_values: Vec<f64>,
    pub noise_sigma: f64,
    pub order: usize,
    /// Sampling step actually used (after decimation).
    pub step: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PencilOptions {
    /// Singular values below this fraction of the largest are dropped.
    pub rel_threshold: f64,
    /// Multiple of the noise level of a pure-noise Hankel matrix below which
    /// singular values are dropped.
    pub noise_factor: f64,
    pub max_samples: usize,
}

impl Default for PencilOptions {
    fn default() -> Self {
        PencilOptions {
            rel_threshold: 1e-8,
            noise_factor: 1.5,
            max_samples: 600,
        }
    }
}

/// Sum-of-exponentials fit Σ cⱼe^{sⱼt} of the trace on [tail_start, end] by
/// the matrix pencil method. Returns the `n_poles` dominant upper-half-plane
/// exponents, sorted by modulus.
pub fn find_poles_data(trace: &TimeTrace, tail_start: f64, n_poles: usize, opts: PencilOptions) -> Result<PencilFit> {
    let first = (tail_start / trace.dt).ceil() as usize;
    if first >= trace.values.len() {
        return Err(Error::Sampling("tail starts after the end of the trace".into()));
    }
    let tail = &trace.values[first..];
    let stride = tail.len().div_ceil(opts.max_samples).max(1);
    let y: Vec<f64> = tail.iter().step_by(stride).copied().collect();
    let n = y.len();
    if n < 4 * n_poles.max(1) || n < 12 {
        return Err(Error::Sampling(format!(
            "tail has {n} usable samples, need at least {}",
            (4 * n_poles).max(12)
        )));
    }
    let step = trace.dt * stride as f64;
    let t0 = first as f64 * trace.dt;
    let l = n / 3;
    let rows = n - l;
    let hankel = DMatrix::from_fn(rows, l + 1, |i, j| y[i + j]);
    let svd = hankel.svd(false, true);
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    // Noise level measured on the full-rate samples, scaled to the decimated ones.
    let sigma = noise_sigma(tail);
    let noise_floor = opts.noise_factor * sigma * ((rows as f64).sqrt() + ((l + 1) as f64).sqrt());
    let thr = (opts.rel_threshold * sv[0]).max(noise_floor);
    let order = sv.iter().take_while(|v| **v > thr).count().min(l / 2);
    if order == 0 {
        return Err(Error::Estimation(format!(
            "no signal above the noise floor (largest singular value {:.3e}, floor {:.3e})",
            sv[0], noise_floor
        )));
    }
    let vt = svd.v_t.ok_or_else(|| Error::Estimation("SVD failed".into()))?;
    // Right singular vectors as columns: (l+1) x order.
    let v = vt.rows(0, order).transpose();
    let v1 = v.rows(0, l).into_owned();
    let v2 = v.rows(1, l).into_owned();
    let pinv = v1
        .pseudo_inverse(1e-13)
        .map_err(|e| Error::Estimation(format!("pencil pseudo-inverse failed: {e}")))?;
    let a = pinv * v2;
    let z = a.complex_eigenvalues();
    let exps: Vec<Complex64> = z.iter().map(|z| z.ln() / step).collect();
    // Amplitudes from the Vandermonde least-squares problem.
    let vm = DMatrix::from_fn(n, order, |i, j| (exps[j] * (i as f64 * step)).exp());
    let rhs = DVector::from_iterator(n, y.iter().map(|v| Complex64::new(*v, 0.0)));
    let amps = vm
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Estimation(format!("amplitude fit failed: {e}")))?;
    let components: Vec<(Complex64, Complex64)> = exps
        .iter()
        .zip(amps.iter())
        .map(|(s, c)| (*s, c * (-s * t0).exp()))
        .collect();
    let cond = sv[0] / sv[order - 1];
    let mut upper: Vec<(Complex64, Complex64, f64)> = exps
        .iter()
        .zip(amps.iter())
        .filter(|(s, _)| s.im > 1e-8 * s.norm())
        .map(|(s, c)| (*s, *c * (-s * t0).exp(), c.norm()))
        .collect();
    upper.sort_by(|a, b| b.2.total_cmp(&a.2));
    upper.truncate(n_poles);
    upper.sort_by(|a, b| a.0.norm().total_cmp(&b.0.norm()));
    let poles = upper
        .into_iter()
        .map(|(s, c, _)| PoleEstimate {
            location: s,
            residue: c,
            group_index: None,
            method: PoleMethod::DataPencil,
            condition: cond,
        })
        .collect();
    Ok(PencilFit {
        poles,
        components,
        singular_values: sv,
        noise_sigma: sigma,
        order,
        step,
    })
}
