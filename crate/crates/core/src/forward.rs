//! Direct problem in modal form.
//!
//! Each mode solves the scalar fractional equation
//! D^{α-1}(u' - ψ) + μu = (1/a)(t^{1-α}/Γ(2-α)) * χ with u(0) = φ, whose
//! solution is u = φE_{α,1}(-μt^α) + ψ tE_{α,2}(-μt^α) + (1/a)[tE_{α,2}] * χ.
//! The convolution is done by product integration: χ is taken piecewise
//! linear on the time grid and integrated exactly against the kernel, using
//! its repeated integrals t²E_{α,3} and t³E_{α,4}.

use serde::{Deserialize, Serialize};
use libm::tgamma as gamma;

use crate::error::{Error, Result};
use crate::mlf::{kernel_moment, ml_real, MlParams};
use crate::spectrum::{DomainSpec, Spectrum};

/// One term b·(-Δ)^β of the spatial operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub b: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub a: f64,
    pub alpha: f64,
    pub terms: Vec<Term>,
    pub domain: DomainSpec,
    /// End of the source support T.
    pub t_src: f64,
    /// End of the observation window, T + δ.
    pub t_obs: f64,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::param(format!("a must be positive, got {}", self.a)));
        }
        if !(self.alpha > 1.0 && self.alpha < 2.0) {
            return Err(Error::param(format!("alpha must lie in (1, 2), got {}", self.alpha)));
        }
        validate_terms(&self.terms)?;
        self.domain.validate()?;
        if !(self.t_src > 0.0 && self.t_obs > self.t_src && self.t_obs.is_finite()) {
            return Err(Error::param(format!(
                "need 0 < T < T_obs, got T = {}, T_obs = {}",
                self.t_src, self.t_obs
            )));
        }
        Ok(())
    }
}

/// Positive weights and strictly decreasing exponents in (0, 1].
pub fn validate_terms(terms: &[Term]) -> Result<()> {
    if terms.is_empty() {
        return Err(Error::param("the operator needs at least one term"));
    }
    for t in terms {
        if !(t.b > 0.0 && t.b.is_finite()) {
            return Err(Error::param(format!("term weight must be positive, got {}", t.b)));
        }
        if !(t.beta > 0.0 && t.beta <= 1.0) {
            return Err(Error::param(format!("term exponent must lie in (0, 1], got {}", t.beta)));
        }
    }
    if terms.windows(2).any(|w| w[1].beta >= w[0].beta) {
        return Err(Error::param("term exponents must be strictly decreasing"));
    }
    Ok(())
}

/// μ(λ) = (1/a) Σⱼ bⱼ λ^{βⱼ}.
pub fn rate(a: f64, terms: &[Term], lambda: f64) -> f64 {
    terms.iter().map(|t| t.b * lambda.powf(t.beta)).sum::<f64>() / a
}

pub fn mode_rates(ps: &ProblemSpec, spec: &Spectrum) -> Result<Vec<f64>> {
    ps.validate()?;
    Ok(spec.lambdas.iter().map(|&l| rate(ps.a, &ps.terms, l)).collect())
}

/// Uniform grid t_i = iΔt, i = 0..=n_obs, with the source end T = n_src·Δt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_src: usize,
    pub n_obs: usize,
}

impl TimeGrid {
    pub fn new(t_src: f64, t_obs: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Sampling(format!("time step must be positive, got {dt}")));
        }
        let n_src = (t_src / dt).round();
        if n_src < 1.0 || (n_src * dt - t_src).abs() > 1e-9 * t_src {
            return Err(Error::Sampling(format!(
                "source end T = {t_src} is not a multiple of the time step {dt}"
            )));
        }
        let n_obs = (t_obs / dt + 1e-9).floor();
        if n_obs <= n_src {
            return Err(Error::Sampling("observation window must extend past the source support".into()));
        }
        Ok(TimeGrid {
            dt,
            n_src: n_src as usize,
            n_obs: n_obs as usize,
        })
    }

    pub fn for_problem(ps: &ProblemSpec, dt: f64) -> Result<Self> {
        TimeGrid::new(ps.t_src, ps.t_obs, dt)
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn t_src(&self) -> f64 {
        self.t(self.n_src)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_obs).map(|i| self.t(i)).collect()
    }

    /// Grid on [0, T] only.
    pub fn source_times(&self) -> Vec<f64> {
        (0..=self.n_src).map(|i| self.t(i)).collect()
    }

    pub fn refine(&self, factor: usize) -> TimeGrid {
        TimeGrid {
            dt: self.dt / factor as f64,
            n_src: self.n_src * factor,
            n_obs: self.n_obs * factor,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InitialData {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl InitialData {
    pub fn zeros(modes: usize) -> Self {
        InitialData {
            phi: vec![0.0; modes],
            psi: vec![0.0; modes],
        }
    }
}

/// Named closed-form time profiles on [0, T].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Profile {
    Zero,
    Constant { value: f64 },
    /// tᵖ(T - t)^q.
    Poly { p: u32, q: u32 },
}

impl Profile {
    pub fn bump(n: u32) -> Self {
        Profile::Poly { p: n, q: n }
    }

    pub fn eval(&self, t: f64, t_src: f64) -> f64 {
        if !(0.0..=t_src).contains(&t) {
            return 0.0;
        }
        match *self {
            Profile::Zero => 0.0,
            Profile::Constant { value } => value,
            Profile::Poly { p, q } => t.powi(p as i32) * (t_src - t).powi(q as i32),
        }
    }

    pub fn sample(&self, grid: &TimeGrid) -> Vec<f64> {
        let t_src = grid.t_src();
        grid.source_times().into_iter().map(|t| self.eval(t, t_src)).collect()
    }
}

/// χₖ(t) = g(t)fₖ + zₖ(t); g and zₖ are sampled on the source grid 0..=n_src.
/// An empty `z[k]` (or a missing entry) stands for zₖ ≡ 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub g: Vec<f64>,
    pub f: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    /// Smoothness order of the vanishing conditions at T.
    pub n: u32,
}

impl SourceSpec {
    pub fn chi(&self, k: usize, grid: &TimeGrid) -> Result<Vec<f64>> {
        let len = grid.n_src + 1;
        let mut chi = vec![0.0; len];
        let fk = self.f.get(k).copied().unwrap_or(0.0);
        if fk != 0.0 {
            if self.g.len() != len {
                return Err(Error::Sampling(format!("g has {} samples, grid needs {len}", self.g.len())));
            }
            for (c, g) in chi.iter_mut().zip(&self.g) {
                *c += fk * g;
            }
        }
        if let Some(z) = self.z.get(k).filter(|z| !z.is_empty()) {
            if z.len() != len {
                return Err(Error::Sampling(format!("z[{k}] has {} samples, grid needs {len}", z.len())));
            }
            for (c, v) in chi.iter_mut().zip(z) {
                *c += v;
            }
        }
        Ok(chi)
    }

    pub fn is_zero_mode(&self, k: usize) -> bool {
        self.f.get(k).is_none_or(|f| *f == 0.0) && self.z.get(k).is_none_or(|z| z.iter().all(|v| *v == 0.0))
    }
}

/// Product-integration weights for a kernel with first and second repeated
/// integrals `k1`, `k2` tabulated at iΔt: for m ≥ 1,
/// `(a[m], b[m])` multiply χ at the left and right end of the segment whose
/// right end lies mΔt before the evaluation time.
pub(crate) fn product_weights(k1: &[f64], k2: &[f64], dt: f64) -> (Vec<f64>, Vec<f64>) {
    let n = k1.len();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for m in 1..n {
        let d2 = (k2[m] - k2[m - 1]) / dt;
        a[m] = k1[m] - d2;
        b[m] = d2 - k1[m - 1];
    }
    (a, b)
}

/// Σ over source segments of the product-integration sum at every grid time.
pub(crate) fn convolve(a: &[f64], b: &[f64], chi: &[f64], n_out: usize) -> Vec<f64> {
    let n_seg = chi.len().saturating_sub(1);
    let mut out = vec![0.0; n_out + 1];
    for (n, o) in out.iter_mut().enumerate().skip(1) {
        let mut s = 0.0;
        for i in 0..n_seg.min(n) {
            let m = n - i;
            s += a[m] * chi[i] + b[m] * chi[i + 1];
        }
        *o = s;
    }
    out
}

/// Kernel tables needed for one mode.
#[derive(Clone, Debug)]
pub struct ModeKernel {
    pub alpha: f64,
    pub mu: f64,
    /// E_{α,1}(-μt^α) at grid times.
    pub e1: Vec<f64>,
    /// tE_{α,2}(-μt^α).
    pub k0: Vec<f64>,
    /// Product-integration weights of tE_{α,2}.
    pub wa: Vec<f64>,
    pub wb: Vec<f64>,
}

impl ModeKernel {
    pub fn new(alpha: f64, mu: f64, grid: &TimeGrid) -> Result<Self> {
        Self::build(alpha, mu, grid, true)
    }

    /// Tables for the convolution only (no initial-data response).
    pub fn convolution_only(alpha: f64, mu: f64, grid: &TimeGrid) -> Result<Self> {
        Self::build(alpha, mu, grid, false)
    }

    fn build(alpha: f64, mu: f64, grid: &TimeGrid, initial: bool) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::param(format!("mode rate must be positive, got {mu}")));
        }
        let n = grid.n_obs + 1;
        let mut k1 = Vec::with_capacity(n);
        let mut k2 = Vec::with_capacity(n);
        let (mut e1, mut k0) = (Vec::new(), Vec::new());
        let p1 = MlParams::new(alpha, 1.0)?;
        for i in 0..n {
            let t = grid.t(i);
            k1.push(kernel_moment(alpha, mu, t, 1)?);
            k2.push(kernel_moment(alpha, mu, t, 2)?);
            if initial {
                e1.push(ml_real(p1, -mu * t.powf(alpha))?);
                k0.push(kernel_moment(alpha, mu, t, 0)?);
            }
        }
        let (wa, wb) = product_weights(&k1, &k2, grid.dt);
        Ok(ModeKernel { alpha, mu, e1, k0, wa, wb })
    }

    /// (1/a)[tE_{α,2}] * χ at every grid time.
    pub fn convolution(&self, a: f64, chi: &[f64], grid: &TimeGrid) -> Vec<f64> {
        let mut c = convolve(&self.wa, &self.wb, chi, grid.n_obs);
        for v in &mut c {
            *v /= a;
        }
        c
    }

    pub fn solve(&self, a: f64, phi: f64, psi: f64, chi: &[f64], grid: &TimeGrid) -> Result<Vec<f64>> {
        if chi.len() != grid.n_src + 1 {
            return Err(Error::Sampling(format!(
                "source has {} samples, grid needs {}",
                chi.len(),
                grid.n_src + 1
            )));
        }
        if (phi != 0.0 || psi != 0.0) && self.e1.is_empty() {
            return Err(Error::param("kernel tables were built without the initial-data response"));
        }
        let mut u = self.convolution(a, chi, grid);
        if phi != 0.0 || psi != 0.0 {
            for (i, v) in u.iter_mut().enumerate() {
                *v += phi * self.e1[i] + psi * self.k0[i];
            }
        }
        Ok(u)
    }
}

/// uₖ on the grid.
pub fn mode_solution(
    ps: &ProblemSpec,
    mu: f64,
    phi: f64,
    psi: f64,
    chi: &[f64],
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    ModeKernel::new(ps.alpha, mu, grid)?.solve(ps.a, phi, psi, chi, grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeTrace {
    pub dt: f64,
    pub values: Vec<f64>,
    /// Largest contribution of the last tenth of the retained modes, relative
    /// to max|h|.
    #[serde(default)]
    pub tail_estimate: f64,
}

impl TimeTrace {
    pub fn new(dt: f64, values: Vec<f64>) -> Self {
        TimeTrace {
            dt,
            values,
            tail_estimate: 0.0,
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| i as f64 * self.dt).collect()
    }

    pub fn t_end(&self) -> f64 {
        (self.values.len().saturating_sub(1)) as f64 * self.dt
    }
}

/// Sum that does not depend on evaluation order beyond the fixed split.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (l, r) = v.split_at(v.len() / 2);
    pairwise_sum(l) + pairwise_sum(r)
}

/// h(tᵢ) = Σₖ γₖ uₖ(tᵢ). `u[k]` may be empty for modes that are identically zero.
pub fn observe(u: &[Vec<f64>], gammas: &[f64], dt: f64) -> Result<TimeTrace> {
    if u.len() != gammas.len() {
        return Err(Error::Sampling(format!(
            "{} mode solutions but {} observation weights",
            u.len(),
            gammas.len()
        )));
    }
    let len = u.iter().map(Vec::len).max().unwrap_or(0);
    if u.iter().any(|x| !x.is_empty() && x.len() != len) {
        return Err(Error::Sampling("mode solutions have different lengths".into()));
    }
    let tail_from = u.len() - u.len() / 10;
    let mut values = Vec::with_capacity(len);
    let mut tail_max: f64 = 0.0;
    let mut buf = Vec::with_capacity(u.len());
    for i in 0..len {
        buf.clear();
        buf.extend(u.iter().zip(gammas).map(|(uk, g)| if uk.is_empty() { 0.0 } else { g * uk[i] }));
        values.push(pairwise_sum(&buf));
        tail_max = tail_max.max(pairwise_sum(&buf[tail_from..]).abs());
    }
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tail_estimate = if scale > 0.0 { tail_max / scale } else { 0.0 };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Truncation("observed trace has non-finite values".into()));
    }
    Ok(TimeTrace {
        dt,
        values,
        tail_estimate,
    })
}

/// Full direct solve: mode solutions for every mode with data, then observation.
pub fn solve(
    ps: &ProblemSpec,
    spec: &Spectrum,
    gammas: &[f64],
    init: &InitialData,
    src: &SourceSpec,
    grid: &TimeGrid,
) -> Result<TimeTrace> {
    let mus = mode_rates(ps, spec)?;
    let u = solve_modes(ps, &mus, gammas, init, src, grid)?;
    observe(&u, gammas, grid.dt)
}

/// Mode solutions; modes without data or with zero weight are left empty.
pub fn solve_modes(
    ps: &ProblemSpec,
    mus: &[f64],
    gammas: &[f64],
    init: &InitialData,
    src: &SourceSpec,
    grid: &TimeGrid,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(mus.len());
    for (k, &mu) in mus.iter().enumerate() {
        let phi = init.phi.get(k).copied().unwrap_or(0.0);
        let psi = init.psi.get(k).copied().unwrap_or(0.0);
        if gammas.get(k).is_none_or(|g| *g == 0.0) || (phi == 0.0 && psi == 0.0 && src.is_zero_mode(k)) {
            out.push(Vec::new());
            continue;
        }
        let chi = src.chi(k, grid)?;
        let kernel = if phi == 0.0 && psi == 0.0 {
            ModeKernel::convolution_only(ps.alpha, mu, grid)?
        } else {
            ModeKernel::new(ps.alpha, mu, grid)?
        };
        out.push(kernel.solve(ps.a, phi, psi, &chi, grid)?);
    }
    Ok(out)
}

/// Discrete L² residual of D^{α-1}(u' - ψ) + μu - (1/a)(t^{1-α}/Γ(2-α)) * χ over
/// (0, T_obs], with Grünwald-Letnikov weights for the derivative and product
/// integration of the piecewise-linear χ for the right-hand side.
pub fn residual_oracle(alpha: f64, a: f64, mu: f64, psi: f64, chi: &[f64], u: &[f64], grid: &TimeGrid) -> Result<f64> {
    let n = grid.n_obs;
    if u.len() != n + 1 || chi.len() != grid.n_src + 1 {
        return Err(Error::Sampling("residual oracle: sample counts do not match the grid".into()));
    }
    let dt = grid.dt;
    let order = alpha - 1.0;
    let mut gl = vec![1.0; n + 1];
    for j in 1..=n {
        gl[j] = gl[j - 1] * (1.0 - (order + 1.0) / j as f64);
    }
    let mut w = vec![0.0; n + 1];
    for j in 1..=n {
        w[j] = (u[j] - u[j - 1]) / dt - psi;
    }
    let c1 = 1.0 / gamma(3.0 - alpha);
    let c2 = 1.0 / gamma(4.0 - alpha);
    let k1: Vec<f64> = (0..=n).map(|i| c1 * grid.t(i).powf(2.0 - alpha)).collect();
    let k2: Vec<f64> = (0..=n).map(|i| c2 * grid.t(i).powf(3.0 - alpha)).collect();
    let (pa, pb) = product_weights(&k1, &k2, dt);
    let rhs = convolve(&pa, &pb, chi, n);
    let scale = dt.powf(-order);
    let mut acc = 0.0;
    for i in 1..=n {
        let d: f64 = (0..=i).map(|j| gl[j] * w[i - j]).sum::<f64>() * scale;
        let r = d + mu * u[i] - rhs[i] / a;
        acc += r * r;
    }
    Ok((acc * dt).sqrt())
}

/// Whether e^{-σt}|h(t)| stays within 10× its maximum over the early window
/// t ≤ min(1/σ, T_obs/2).
pub fn exp_bound_check(trace: &TimeTrace, sigma: f64) -> Result<bool> {
    if !(sigma > 0.0) {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    let damped: Vec<f64> = trace
        .values
        .iter()
        .enumerate()
        .map(|(i, h)| (-sigma * i as f64 * trace.dt).exp() * h.abs())
        .collect();
    let window = (1.0 / sigma).min(trace.t_end() / 2.0);
    let early_n = ((window / trace.dt).floor() as usize + 1).clamp(2, damped.len());
    let early = damped[..early_n].iter().copied().fold(0.0, f64::max);
    let all = damped.iter().copied().fold(0.0, f64::max);
    Ok(all <= 10.0 * early)
}
