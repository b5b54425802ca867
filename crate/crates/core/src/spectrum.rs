//! Dirichlet eigenstructure of intervals and rectangles, grouping of repeated
//! eigenvalues, observation weights γₖ = Φvₖ and Weyl-law diagnostics.
//!
//! Indices are 0-based throughout: `distinct_index[l]` is the position of the
//! first eigenvalue of group l in `lambdas`.

use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;

/// Default relative tolerance for merging eigenvalues into one group.
pub const DEFAULT_GROUP_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainSpec {
    Interval { x1: f64 },
    Rectangle { x1: f64, x2: f64 },
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DomainSpec::Interval { x1 } => x1 > 0.0 && x1.is_finite(),
            DomainSpec::Rectangle { x1, x2 } => x1 > 0.0 && x2 > 0.0 && x1.is_finite() && x2.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("domain side lengths must be positive: {self:?}")))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DomainSpec::Interval { .. } => 1,
            DomainSpec::Rectangle { .. } => 2,
        }
    }

    fn contains_strictly(&self, x: &[f64]) -> bool {
        match (*self, x) {
            (DomainSpec::Interval { x1 }, [x]) => *x > 0.0 && *x < x1,
            (DomainSpec::Rectangle { x1, x2 }, [x, y]) => *x > 0.0 && *x < x1 && *y > 0.0 && *y < x2,
            _ => false,
        }
    }
}

/// Quantum numbers of a Dirichlet mode: sin(mπx/x₁) (times sin(nπy/x₂) on the rectangle).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mode {
    pub m: u32,
    pub n: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub domain: DomainSpec,
    pub lambdas: Vec<f64>,
    pub modes: Vec<Mode>,
    pub distinct_index: Vec<usize>,
    pub groups: Vec<Range<usize>>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Eigenvalue of group l.
    pub fn group_lambda(&self, l: usize) -> f64 {
        self.lambdas[self.distinct_index[l]]
    }

    /// Group containing mode k.
    pub fn group_of(&self, k: usize) -> usize {
        self.groups.partition_point(|g| g.end <= k)
    }

    /// Keeps the first `groups` distinct eigenvalues (all their modes).
    pub fn truncate_groups(&self, groups: usize) -> Spectrum {
        let groups = groups.min(self.groups.len());
        let end = if groups == 0 { 0 } else { self.groups[groups - 1].end };
        Spectrum {
            domain: self.domain,
            lambdas: self.lambdas[..end].to_vec(),
            modes: self.modes[..end].to_vec(),
            distinct_index: self.distinct_index[..groups].to_vec(),
            groups: self.groups[..groups].to_vec(),
        }
    }

    /// L²-normalised eigenfunction vₖ at a point.
    pub fn eigenfunction(&self, k: usize, x: &[f64]) -> f64 {
        let Mode { m, n } = self.modes[k];
        match (self.domain, x) {
            (DomainSpec::Interval { x1 }, [x, ..]) => (2.0 / x1).sqrt() * (m as f64 * PI * x / x1).sin(),
            (DomainSpec::Rectangle { x1, x2 }, [x, y, ..]) => {
                2.0 / (x1 * x2).sqrt() * (m as f64 * PI * x / x1).sin() * (n as f64 * PI * y / x2).sin()
            }
            _ => f64::NAN,
        }
    }
}

pub fn eigen_interval(x1: f64, k: usize) -> Result<Spectrum> {
    let domain = DomainSpec::Interval { x1 };
    domain.validate()?;
    if k == 0 {
        return Err(Error::EmptySpectrum);
    }
    let lambdas: Vec<f64> = (1..=k).map(|j| (PI * j as f64 / x1).powi(2)).collect();
    let modes = (1..=k as u32).map(|m| Mode { m, n: 0 }).collect();
    Ok(Spectrum {
        domain,
        lambdas,
        modes,
        distinct_index: (0..k).collect(),
        groups: (0..k).map(|j| j..j + 1).collect(),
    })
}

pub fn eigen_rectangle(x1: f64, x2: f64, k: usize) -> Result<Spectrum> {
    let domain = DomainSpec::Rectangle { x1, x2 };
    domain.validate()?;
    if k == 0 {
        return Err(Error::EmptySpectrum);
    }
    let lam = |m: u32, n: u32| PI * PI * ((m as f64 / x1).powi(2) + (n as f64 / x2).powi(2));
    // Grow the cutoff until it holds at least k lattice points.
    let mut cutoff = lam(1, 1) * 2.0;
    let mut all = loop {
        let mmax = (cutoff.sqrt() * x1 / PI).floor() as u32;
        let nmax = (cutoff.sqrt() * x2 / PI).floor() as u32;
        let mut pts = Vec::new();
        for m in 1..=mmax.max(1) {
            for n in 1..=nmax.max(1) {
                let l = lam(m, n);
                if l <= cutoff {
                    pts.push((l, m, n));
                }
            }
        }
        if pts.len() >= k {
            break pts;
        }
        cutoff *= 2.0;
    };
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.truncate(k);
    let lambdas: Vec<f64> = all.iter().map(|p| p.0).collect();
    let modes = all.iter().map(|p| Mode { m: p.1, n: p.2 }).collect();
    let (distinct_index, groups) = group_distinct(&lambdas, DEFAULT_GROUP_TOL)?;
    Ok(Spectrum {
        domain,
        lambdas,
        modes,
        distinct_index,
        groups,
    })
}

/// Splits a nondecreasing eigenvalue list into groups of (numerically) equal
/// values. Neighbours are merged when their relative gap is at most `rel_tol`.
pub fn group_distinct(lambdas: &[f64], rel_tol: f64) -> Result<(Vec<usize>, Vec<Range<usize>>)> {
    if let Some(bad) = lambdas.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::Domain(format!("eigenvalues must be positive and finite, got {bad}")));
    }
    if lambdas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("eigenvalues must be nondecreasing".into()));
    }
    let mut starts = Vec::new();
    for (k, l) in lambdas.iter().enumerate() {
        if k == 0 || (l - lambdas[k - 1]) > rel_tol * lambdas[k - 1] {
            starts.push(k);
        }
    }
    let groups = starts
        .iter()
        .enumerate()
        .map(|(i, &s)| s..starts.get(i + 1).copied().unwrap_or(lambdas.len()))
        .collect();
    Ok((starts, groups))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

/// Weight κ of an integral observation, sampled on a uniform grid covering the
/// closed domain (row-major, x fastest) and interpolated (bi)linearly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kappa {
    Constant { value: f64 },
    Grid { nx: usize, ny: usize, values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    Integral { kappa: Kappa },
    Point { x0: Vec<f64> },
    BoundaryTrace { sides: Vec<Side> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Integral,
    Point,
    BoundaryTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationWeights {
    pub gammas: Vec<f64>,
    pub kind: ObservationKind,
}

impl Kappa {
    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Kappa::Constant { value } if value.is_finite() => Ok(()),
            Kappa::Constant { .. } => Err(Error::param("kappa must be finite")),
            Kappa::Grid { nx, ny, values } => {
                let ny_ok = if dim == 1 { *ny == 1 } else { *ny >= 2 };
                if *nx < 2 || !ny_ok || values.len() != nx * ny {
                    return Err(Error::Geometry(format!(
                        "kappa grid {nx}x{ny} with {} samples does not fit a {dim}-d domain",
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::param("kappa samples must be finite"));
                }
                Ok(())
            }
        }
    }

    /// Grid cells along each axis (1 for a constant).
    fn cells(&self) -> (usize, usize) {
        match self {
            Kappa::Constant { .. } => (1, 1),
            Kappa::Grid { nx, ny, .. } => (nx - 1, ny.saturating_sub(1).max(1)),
        }
    }

    /// Value at (u, v) given in cell coordinates scaled to [0, 1].
    fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            Kappa::Constant { value } => *value,
            Kappa::Grid { nx, ny, values } => {
                let fx = (u * (*nx - 1) as f64).clamp(0.0, (*nx - 1) as f64);
                let i = (fx.floor() as usize).min(nx - 2);
                let tx = fx - i as f64;
                if *ny == 1 {
                    return values[i] * (1.0 - tx) + values[i + 1] * tx;
                }
                let fy = (v * (*ny - 1) as f64).clamp(0.0, (*ny - 1) as f64);
                let j = (fy.floor() as usize).min(ny - 2);
                let ty = fy - j as f64;
                let at = |i: usize, j: usize| values[j * nx + i];
                (1.0 - ty) * ((1.0 - tx) * at(i, j) + tx * at(i + 1, j))
                    + ty * ((1.0 - tx) * at(i, j + 1) + tx * at(i + 1, j + 1))
            }
        }
    }
}

/// Panels so that every grid cell is split evenly and the highest mode gets at
/// least 64 nodes per wavelength.
fn panels_for(cells: usize, max_wavenumber: u32) -> usize {
    let needed = (32 * max_wavenumber as usize).div_ceil(quad::NODES_PER_PANEL).max(1);
    cells * needed.div_ceil(cells).max(1)
}

pub fn observation_weights(obs: &Observation, spec: &Spectrum) -> Result<ObservationWeights> {
    let dom = spec.domain;
    dom.validate()?;
    let (gammas, kind) = match obs {
        Observation::Point { x0 } => {
            if x0.len() != dom.dim() || !dom.contains_strictly(x0) {
                return Err(Error::Geometry(format!("observation point {x0:?} is not inside {dom:?}")));
            }
            let g = (0..spec.len()).map(|k| spec.eigenfunction(k, x0)).collect();
            (g, ObservationKind::Point)
        }
        Observation::BoundaryTrace { sides } => match dom {
            DomainSpec::Interval { .. } => {
                return Err(Error::Geometry(
                    "boundary trace observation is not defined on the interval: Dirichlet traces vanish".into(),
                ));
            }
            DomainSpec::Rectangle { .. } => {
                if sides.is_empty() {
                    return Err(Error::Geometry("boundary trace needs at least one side".into()));
                }
                // Dirichlet eigenfunctions vanish on every side.
                (vec![0.0; spec.len()], ObservationKind::BoundaryTrace)
            }
        },
        Observation::Integral { kappa } => {
            kappa.validate(dom.dim())?;
            let mmax = spec.modes.iter().map(|m| m.m).max().unwrap_or(1);
            let nmax = spec.modes.iter().map(|m| m.n).max().unwrap_or(1);
            let (cx, cy) = kappa.cells();
            let g = match dom {
                DomainSpec::Interval { x1 } => {
                    let nodes = quad::composite(0.0, x1, panels_for(cx, mmax));
                    let kv: Vec<f64> = nodes.iter().map(|&(x, w)| w * kappa.eval(x / x1, 0.0)).collect();
                    (0..spec.len())
                        .map(|k| {
                            nodes
                                .iter()
                                .zip(&kv)
                                .map(|(&(x, _), kw)| kw * spec.eigenfunction(k, &[x]))
                                .sum()
                        })
                        .collect()
                }
                DomainSpec::Rectangle { x1, x2 } => {
                    let xs = quad::composite(0.0, x1, panels_for(cx, mmax));
                    let ys = quad::composite(0.0, x2, panels_for(cy, nmax));
                    let kv: Vec<f64> = ys
                        .iter()
                        .flat_map(|&(y, wy)| xs.iter().map(move |&(x, wx)| (x, y, wx * wy)))
                        .map(|(x, y, w)| w * kappa.eval(x / x1, y / x2))
                        .collect();
                    // The eigenfunctions factor, so tabulate the 1-d sines once.
                    let sx = sine_table(&xs, x1, mmax);
                    let sy = sine_table(&ys, x2, nmax);
                    let norm = 2.0 / (x1 * x2).sqrt();
                    spec.modes
                        .iter()
                        .map(|&Mode { m, n }| {
                            let (rx, ry) = (&sx[m as usize - 1], &sy[n as usize - 1]);
                            let mut acc = 0.0;
                            for (j, syj) in ry.iter().enumerate() {
                                let row = &kv[j * xs.len()..(j + 1) * xs.len()];
                                acc += syj * row.iter().zip(rx).map(|(a, b)| a * b).sum::<f64>();
                            }
                            norm * acc
                        })
                        .collect()
                }
            };
            (g, ObservationKind::Integral)
        }
    };
    Ok(ObservationWeights { gammas, kind })
}

fn sine_table(nodes: &[(f64, f64)], len: f64, max: u32) -> Vec<Vec<f64>> {
    (1..=max.max(1))
        .map(|m| nodes.iter().map(|&(x, _)| (m as f64 * PI * x / len).sin()).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeylFit {
    pub c1: f64,
    pub c2: f64,
    pub residual: f64,
}

/// Least-squares fit of the counting function N(λ) ≈ c₁λ^{d/2}(1 + c₂λ^{-1/2})
/// over the upper half of the spectrum. N is sampled at the top of each group.
pub fn weyl_fit(spec: &Spectrum) -> Result<WeylFit> {
    if spec.len() < 50 {
        return Err(Error::Fit(format!("Weyl fit needs at least 50 eigenvalues, got {}", spec.len())));
    }
    let d = spec.dim() as f64;
    let half = spec.len() / 2;
    let pts: Vec<(f64, f64)> = spec
        .groups
        .iter()
        .filter(|g| g.start >= half)
        .map(|g| (spec.lambdas[g.start], g.end as f64))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Fit("too few distinct eigenvalues in the upper half of the spectrum".into()));
    }
    // N = A λ^{d/2} + B λ^{(d-1)/2}; normal equations on columns scaled by N.
    let (mut saa, mut sab, mut sbb, mut sya, mut syb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(l, n) in &pts {
        let a = l.powf(d / 2.0) / n;
        let b = l.powf((d - 1.0) / 2.0) / n;
        saa += a * a;
        sab += a * b;
        sbb += b * b;
        sya += a;
        syb += b;
    }
    let det = saa * sbb - sab * sab;
    if !(det.abs() > 0.0) {
        return Err(Error::Fit("degenerate Weyl fit".into()));
    }
    let ca = (sya * sbb - syb * sab) / det;
    let cb = (saa * syb - sab * sya) / det;
    let mut num = 0.0;
    let mut den = 0.0;
    for &(l, n) in &pts {
        let fit = ca * l.powf(d / 2.0) + cb * l.powf((d - 1.0) / 2.0);
        num += (fit - n).powi(2);
        den += n * n;
    }
    if !(ca > 0.0) {
        return Err(Error::Fit(format!("Weyl fit produced a non-positive leading constant {ca}")));
    }
    Ok(WeylFit {
        c1: ca,
        c2: cb / ca,
        residual: (num / den).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlasReport {
    pub theta: f64,
    pub zeta: f64,
    pub lbar: usize,
    pub holds: bool,
}

/// Checks the growth condition on the first indices kₗ of the groups:
/// k_{l+i}^{2/d} - k_l^{2/d} ≤ θᵢ k_l^{1/d} and k_{l-i} ≥ ζᵢ k_l for l ≥ l̄ᵢ
/// (1-based k and l, as in the condition itself).
///
/// Simple spectra are checked against the fixed parameters l̄ = 2i,
/// θ = (2i/d)(3/2)^{2/d-1}, ζ = 1/2. Otherwise θ and ζ are measured on the
/// available window and the condition is reported as holding when ζ > 0 and
/// the θ ratio does not grow towards the end of the window.
pub fn klas_check(spec: &Spectrum, i: usize) -> Result<KlasReport> {
    let l_count = spec.num_groups();
    if i == 0 || l_count < 4 * i {
        return Err(Error::Sampling(format!(
            "condition check with i = {i} needs at least {} distinct eigenvalues, got {l_count}",
            4 * i
        )));
    }
    let d = spec.dim() as f64;
    let k = |l: usize| (spec.distinct_index[l - 1] + 1) as f64;
    let lbar = 2 * i;
    let ratio = |l: usize| (k(l + i).powf(2.0 / d) - k(l).powf(2.0 / d)) / k(l).powf(1.0 / d);
    let back = |l: usize| k(l - i) / k(l);
    let ls: Vec<usize> = (lbar..=l_count - i).collect();
    let simple = spec.groups.iter().all(|g| g.len() == 1);
    if simple {
        let theta = (2.0 * i as f64 / d) * 1.5f64.powf(2.0 / d - 1.0);
        let zeta = 0.5;
        let holds = ls.iter().all(|&l| ratio(l) <= theta * (1.0 + 1e-12) && back(l) >= zeta);
        return Ok(KlasReport { theta, zeta, lbar, holds });
    }
    let ratios: Vec<f64> = ls.iter().map(|&l| ratio(l)).collect();
    let theta = ratios.iter().copied().fold(0.0, f64::max);
    let zeta = ls.iter().map(|&l| back(l)).fold(f64::INFINITY, f64::min);
    let cut = ratios.len() * 3 / 4;
    let head = ratios[..cut.max(1)].iter().copied().fold(0.0, f64::max);
    let tail = ratios[cut.max(1)..].iter().copied().fold(0.0, f64::max);
    let holds = zeta > 0.0 && theta.is_finite() && tail <= head;
    Ok(KlasReport { theta, zeta, lbar, holds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_closed_form() {
        let s = eigen_interval(PI, 3).unwrap();
        for (l, want) in s.lambdas.iter().zip([1.0, 4.0, 9.0]) {
            assert!((l - want).abs() < 1e-13);
        }
        assert_eq!(s.distinct_index, vec![0, 1, 2]);
        let s = eigen_interval(1.0, 1).unwrap();
        assert!((s.lambdas[0] - PI * PI).abs() < 1e-13);
        assert_eq!(eigen_interval(1.0, 0), Err(Error::EmptySpectrum));
    }

    #[test]
    fn square_multiplicities() {
        let s = eigen_rectangle(1.0, 1.0, 4).unwrap();
        let want = [2.0, 5.0, 5.0, 8.0];
        for (l, w) in s.lambdas.iter().zip(want) {
            assert!((l / (PI * PI) - w).abs() < 1e-12);
        }
        assert_eq!(s.groups[1], 1..3);
        assert_eq!(s.modes[1], Mode { m: 1, n: 2 });
        assert_eq!(s.modes[2], Mode { m: 2, n: 1 });
        let r = eigen_rectangle(1.0, 2.0, 1).unwrap();
        assert!((r.lambdas[0] - PI * PI * 1.25).abs() < 1e-12);
    }

    #[test]
    fn grouping_rules() {
        let (k, g) = group_distinct(&[1.0, 4.0, 4.0, 9.0], 1e-10).unwrap();
        assert_eq!(k, vec![0, 1, 3]);
        assert_eq!(g[1], 1..3);
        let (k, _) = group_distinct(&[1.0, 1.0 + 1e-15, 2.0], 1e-12).unwrap();
        assert_eq!(k, vec![0, 2]);
        assert!(matches!(group_distinct(&[-1.0, 2.0], 1e-10), Err(Error::Domain(_))));
    }

    #[test]
    fn point_weights_are_sine_values() {
        let s = eigen_interval(2.0, 5).unwrap();
        let w = observation_weights(&Observation::Point { x0: vec![0.3] }, &s).unwrap();
        for (k, g) in w.gammas.iter().enumerate() {
            let want = (2.0f64 / 2.0).sqrt() * (PI * (k + 1) as f64 * 0.3 / 2.0).sin();
            assert!((g - want).abs() < 1e-15);
        }
        assert!(matches!(
            observation_weights(&Observation::Point { x0: vec![2.5] }, &s),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn boundary_trace_resolution() {
        let s = eigen_interval(1.0, 3).unwrap();
        let obs = Observation::BoundaryTrace { sides: vec![Side::Left] };
        assert!(matches!(observation_weights(&obs, &s), Err(Error::Geometry(_))));
        let r = eigen_rectangle(1.0, 1.0, 6).unwrap();
        let w = observation_weights(&obs, &r).unwrap();
        assert!(w.gammas.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn klas_on_interval() {
        let s = eigen_interval(1.0, 40).unwrap();
        assert!(klas_check(&s, 1).unwrap().holds);
        assert!(klas_check(&s, 3).unwrap().holds);
        assert!(klas_check(&s, 11).is_err());
    }
}
