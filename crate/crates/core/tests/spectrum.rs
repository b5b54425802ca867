use std::f64::consts::PI;

use fracpole::quad;
use fracpole::spectrum::*;
use proptest::prelude::*;

#[test]
fn orthonormal_on_interval() {
    let s = eigen_interval(1.7, 20).unwrap();
    let nodes = quad::composite(0.0, 1.7, 40);
    for j in 0..20 {
        for k in 0..20 {
            let ip: f64 = nodes
                .iter()
                .map(|&(x, w)| w * s.eigenfunction(j, &[x]) * s.eigenfunction(k, &[x]))
                .sum();
            let want = if j == k { 1.0 } else { 0.0 };
            assert!((ip - want).abs() < 1e-8, "({j},{k}) -> {ip}");
        }
    }
}

#[test]
fn orthonormal_on_rectangle() {
    let s = eigen_rectangle(1.0, 0.6, 20).unwrap();
    let xs = quad::composite(0.0, 1.0, 12);
    let ys = quad::composite(0.0, 0.6, 12);
    for j in 0..20 {
        for k in j..20 {
            let mut ip = 0.0;
            for &(y, wy) in &ys {
                for &(x, wx) in &xs {
                    ip += wx * wy * s.eigenfunction(j, &[x, y]) * s.eigenfunction(k, &[x, y]);
                }
            }
            let want = if j == k { 1.0 } else { 0.0 };
            assert!((ip - want).abs() < 1e-8, "({j},{k}) -> {ip}");
        }
    }
}

#[test]
fn constant_kappa_matches_symbolic_integral() {
    let s = eigen_interval(PI, 30).unwrap();
    let w = observation_weights(&Observation::Integral { kappa: Kappa::Constant { value: 1.0 } }, &s).unwrap();
    for (k, g) in w.gammas.iter().enumerate() {
        let kk = (k + 1) as f64;
        let want = (2.0 / PI).sqrt() * (1.0 - (kk * PI).cos()) / kk;
        assert!((g - want).abs() < 1e-12, "k={kk}: {g} vs {want}");
    }
}

#[test]
fn sampled_first_mode_picks_out_first_weight() {
    let s = eigen_interval(1.0, 10).unwrap();
    let nx = 4001;
    let values = (0..nx).map(|i| s.eigenfunction(0, &[i as f64 / (nx - 1) as f64])).collect();
    let w = observation_weights(&Observation::Integral { kappa: Kappa::Grid { nx, ny: 1, values } }, &s).unwrap();
    assert!((w.gammas[0] - 1.0).abs() < 1e-6);
    for g in &w.gammas[1..] {
        assert!(g.abs() < 1e-6);
    }
}

#[test]
fn rectangle_integral_weights() {
    // κ ≡ 1 on the unit square: γ_{mn} = 2·(1-cos mπ)(1-cos nπ)/(mnπ²).
    let s = eigen_rectangle(1.0, 1.0, 30).unwrap();
    let w = observation_weights(&Observation::Integral { kappa: Kappa::Constant { value: 1.0 } }, &s).unwrap();
    for (mode, g) in s.modes.iter().zip(&w.gammas) {
        let (m, n) = (mode.m as f64, mode.n as f64);
        let want = 2.0 * (1.0 - (m * PI).cos()) * (1.0 - (n * PI).cos()) / (m * n * PI * PI);
        assert!((g - want).abs() < 1e-12);
    }
}

#[test]
fn weyl_constants_on_interval() {
    let s = eigen_interval(PI, 500).unwrap();
    let f = weyl_fit(&s).unwrap();
    assert!((f.c1 - 1.0).abs() < 0.01, "{f:?}");
    for x1 in [0.3, 1.0, 4.5] {
        let f = weyl_fit(&eigen_interval(x1, 200).unwrap()).unwrap();
        assert!((f.c1 / (x1 / PI) - 1.0).abs() < 0.01, "x1={x1}: {f:?}");
    }
    assert!(weyl_fit(&eigen_interval(1.0, 49).unwrap()).is_err());
}

/// Lattice-point count of {m, n ≥ 1 : π²(m² + n²) ≤ λ}, by brute force.
fn square_count(lambda: f64) -> f64 {
    let r = (lambda / (PI * PI)).sqrt().floor() as i64 + 1;
    let mut n = 0;
    for i in 1..=r {
        for j in 1..=r {
            if PI * PI * ((i * i + j * j) as f64) <= lambda {
                n += 1;
            }
        }
    }
    n as f64
}

#[test]
fn weyl_constant_on_square_matches_count_slope() {
    let s = eigen_rectangle(1.0, 1.0, 500).unwrap();
    let f = weyl_fit(&s).unwrap();
    let lo = s.lambdas[250];
    let hi = s.lambdas[499];
    let pts: Vec<(f64, f64)> = (0..=100)
        .map(|i| lo + (hi - lo) * i as f64 / 100.0)
        .map(|l| (l, square_count(l)))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((f.c1 / slope - 1.0).abs() < 0.05, "c1 {} slope {}", f.c1, slope);
}

#[test]
fn klas_on_square() {
    let s = eigen_rectangle(1.0, 1.0, 600).unwrap();
    assert!(s.num_groups() >= 200);
    let s = s.truncate_groups(200);
    let r = klas_check(&s, 1).unwrap();
    assert!(r.holds, "{r:?}");
}

#[test]
fn groups_partition_square_modes() {
    let s = eigen_rectangle(1.0, 1.0, 50).unwrap();
    assert_eq!(s.groups.first().unwrap().start, 0);
    assert_eq!(s.groups.last().unwrap().end, 50);
    for w in s.groups.windows(2) {
        assert_eq!(w[0].end, w[1].start);
        assert!(s.lambdas[w[0].start] < s.lambdas[w[1].start]);
    }
}

proptest! {
    #[test]
    fn grouping_is_idempotent_and_convex(raw in prop::collection::vec(1u32..40, 1..60)) {
        let mut lambdas: Vec<f64> = raw.iter().map(|v| *v as f64).collect();
        lambdas.sort_by(f64::total_cmp);
        let (k, g) = group_distinct(&lambdas, 1e-10).unwrap();
        for (l, r) in g.iter().enumerate() {
            prop_assert_eq!(r.start, k[l]);
            prop_assert!(lambdas[r.clone()].iter().all(|v| *v == lambdas[r.start]));
        }
        let reps: Vec<f64> = k.iter().map(|&i| lambdas[i]).collect();
        let (k2, _) = group_distinct(&reps, 1e-10).unwrap();
        prop_assert_eq!(k2, (0..reps.len()).collect::<Vec<_>>());
        let (k3, g3) = group_distinct(&lambdas, 1e-10).unwrap();
        prop_assert_eq!(k3, k);
        prop_assert_eq!(g3, g);
    }
}
