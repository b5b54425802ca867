//! Utilities on uniformly sampled signals: exact Laplace transforms of the
//! piecewise-linear interpolant, endpoint derivatives, noise level.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// ∫₀^Δ e^{-sτ}dτ and ∫₀^Δ τe^{-sτ}dτ.
fn segment_moments(s: Complex64, dt: f64) -> (Complex64, Complex64) {
    let x = s * dt;
    if x.norm() < 0.5 {
        let mut i0 = Complex64::new(0.0, 0.0);
        let mut i1 = Complex64::new(0.0, 0.0);
        let mut p = Complex64::new(1.0, 0.0);
        let mut fact = 1.0;
        for k in 0..24 {
            // (-x)^k / k!
            i0 += p / (fact * (k + 1) as f64);
            i1 += p / (fact * (k + 2) as f64);
            p *= -x;
            fact *= (k + 1) as f64;
        }
        (i0 * dt, i1 * dt * dt)
    } else {
        let e = (-x).exp();
        ((1.0 - e) / s, (1.0 - e * (1.0 + x)) / (s * s))
    }
}

/// Weights wᵢ(s) with ∫₀^{nΔ} e^{-st} p(t) dt = Σ wᵢ pᵢ for the piecewise-linear p.
pub fn laplace_weights(s: Complex64, dt: f64, n_samples: usize) -> Vec<Complex64> {
    let mut w = vec![Complex64::new(0.0, 0.0); n_samples];
    if n_samples < 2 {
        return w;
    }
    let (i0, i1) = segment_moments(s, dt);
    let left = i0 - i1 / dt;
    let right = i1 / dt;
    let step = (-s * dt).exp();
    let mut e = Complex64::new(1.0, 0.0);
    for i in 0..n_samples - 1 {
        // Re-anchor the running exponential now and then.
        if i % 256 == 0 {
            e = (-s * (i as f64 * dt)).exp();
        }
        w[i] += e * left;
        w[i + 1] += e * right;
        e *= step;
    }
    w
}

pub fn laplace_samples(samples: &[f64], dt: f64, s: Complex64) -> Complex64 {
    laplace_weights(s, dt, samples.len())
        .iter()
        .zip(samples)
        .map(|(w, p)| w * p)
        .sum()
}

/// Derivative of the given order at the first (`at_end = false`) or last
/// sample, from a least-squares polynomial fit to the nearest samples.
pub fn endpoint_derivative(samples: &[f64], dt: f64, order: usize, at_end: bool) -> Result<f64> {
    let degree = (order + 3).max(5);
    let width = (2 * degree + 1).min(samples.len());
    if width <= order + 1 {
        return Err(Error::Sampling(format!(
            "{} samples are too few for a derivative of order {order}",
            samples.len()
        )));
    }
    let degree = degree.min(width - 1);
    let span = (width - 1) as f64 * dt;
    let pick: Vec<f64> = if at_end {
        samples[samples.len() - width..].iter().rev().copied().collect()
    } else {
        samples[..width].to_vec()
    };
    // x = distance from the endpoint in units of the window, oriented inwards.
    let a = DMatrix::from_fn(width, degree + 1, |i, j| (i as f64 / (width - 1) as f64).powi(j as i32));
    let b = DVector::from_vec(pick);
    let c = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::Fit(format!("endpoint fit failed: {e}")))?;
    let fact: f64 = (1..=order).map(|k| k as f64).product();
    let sign = if at_end && order % 2 == 1 { -1.0 } else { 1.0 };
    Ok(sign * c[order] * fact / span.powi(order as i32))
}

/// Derivative of the given order at every sample from sliding least-squares
/// polynomial fits, plus the largest RMS fit residual relative to max|samples|.
pub fn derivative_profile(samples: &[f64], dt: f64, order: usize) -> Result<(Vec<f64>, f64)> {
    let degree = (order + 3).max(5);
    let width = (2 * degree + 1).min(samples.len());
    if width <= order + 1 {
        return Err(Error::Sampling(format!(
            "{} samples are too few for a derivative of order {order}",
            samples.len()
        )));
    }
    let degree = degree.min(width - 1);
    let span = (width - 1) as f64 * dt;
    let fact: f64 = (1..=order).map(|k| k as f64).product();
    // One pseudo-inverse per position of the evaluation point in the window.
    let mut rows = Vec::with_capacity(width);
    for c in 0..width {
        let a = DMatrix::from_fn(width, degree + 1, |i, j| ((i as f64 - c as f64) / (width - 1) as f64).powi(j as i32));
        let pinv = a
            .clone()
            .pseudo_inverse(1e-14)
            .map_err(|e| Error::Fit(format!("derivative fit failed: {e}")))?;
        rows.push((a, pinv));
    }
    let scale = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = Vec::with_capacity(samples.len());
    let mut worst = 0.0f64;
    for i in 0..samples.len() {
        let start = i.saturating_sub(width / 2).min(samples.len() - width);
        let (a, pinv) = &rows[i - start];
        let y = DVector::from_column_slice(&samples[start..start + width]);
        let coef = pinv * &y;
        out.push(coef[order] * fact / span.powi(order as i32));
        let res = (a * &coef - &y).norm() / (width as f64).sqrt();
        if scale > 0.0 {
            worst = worst.max(res / scale);
        }
    }
    Ok((out, worst))
}

/// Robust white-noise level from sixth differences (variance 924σ² for pure
/// noise; a smooth signal contributes only O(Δt⁶)).
pub fn noise_sigma(samples: &[f64]) -> f64 {
    const C: [f64; 7] = [1.0, -6.0, 15.0, -20.0, 15.0, -6.0, 1.0];
    if samples.len() < 14 {
        return 0.0;
    }
    let mut d: Vec<f64> = samples
        .windows(7)
        .map(|w| w.iter().zip(C).map(|(a, b)| a * b).sum::<f64>().abs())
        .collect();
    d.sort_by(f64::total_cmp);
    1.482_602_218_505_602 * d[d.len() / 2] / 924f64.sqrt()
}
