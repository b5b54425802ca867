use fracpole::forward::*;
use fracpole::mlf::{ml_real, MlParams};
use fracpole::spectrum::{eigen_interval, observation_weights, Observation};

fn ps(alpha: f64) -> ProblemSpec {
    ProblemSpec {
        a: 0.7,
        alpha,
        terms: vec![Term { b: 1.0, beta: 0.8 }, Term { b: 0.5, beta: 0.3 }],
        domain: fracpole::spectrum::DomainSpec::Interval { x1: 1.0 },
        t_src: 1.0,
        t_obs: 2.0,
    }
}

fn e(alpha: f64, theta: f64, x: f64) -> f64 {
    ml_real(MlParams::new(alpha, theta).unwrap(), x).unwrap()
}

/// ∫₀ᵗ τE_{α,2}(-μτ^α) t²(T-t)² convolution for t ≤ T, from the moments
/// ∫₀ᵗ K(t-τ)τʲ dτ = j! t^{j+2} E_{α,j+3}(-μt^α).
fn bump_oracle(alpha: f64, mu: f64, t: f64, tt: f64) -> f64 {
    let w = -mu * t.powf(alpha);
    2.0 * tt * tt * t.powi(4) * e(alpha, 5.0, w) - 12.0 * tt * t.powi(5) * e(alpha, 6.0, w)
        + 24.0 * t.powi(6) * e(alpha, 7.0, w)
}

#[test]
fn rates_match_extended_precision() {
    // mpmath, 50 digits: (1/0.7)(10^0.8 + 0.5*10^0.3)
    let want = 10.438863717551960_f64;
    let got = rate(0.7, &ps(1.4).terms, 10.0);
    assert!((got - want).abs() < 1e-13 * want, "{got}");
}

#[test]
fn rates_on_the_interval() {
    let spec = eigen_interval(1.0, 5).unwrap();
    let p = ProblemSpec {
        a: 1.0,
        terms: vec![Term { b: 1.0, beta: 1.0 }],
        ..ps(1.5)
    };
    let mus = mode_rates(&p, &spec).unwrap();
    for (k, mu) in mus.iter().enumerate() {
        let want = (std::f64::consts::PI * (k + 1) as f64).powi(2);
        assert!((mu - want).abs() < 1e-12 * want);
    }
}

#[test]
fn constant_source_is_integrated_exactly() {
    let (alpha, mu, a) = (1.5, 3.0, 0.7);
    let grid = TimeGrid::new(1.0, 2.0, 0.02).unwrap();
    let chi = vec![1.0; grid.n_src + 1];
    let u = ModeKernel::convolution_only(alpha, mu, &grid).unwrap().convolution(a, &chi, &grid);
    let k1 = |t: f64| t * t * e(alpha, 3.0, -mu * t.powf(alpha));
    for (i, v) in u.iter().enumerate() {
        let t = grid.t(i);
        let want = if t <= 1.0 { k1(t) } else { k1(t) - k1(t - 1.0) } / a;
        assert!((v - want).abs() < 1e-12, "t={t}: {v} vs {want}");
    }
}

#[test]
fn bump_source_against_moment_oracle() {
    let (alpha, mu) = (1.4, 10.0);
    let grid = TimeGrid::new(1.0, 1.5, 1e-3).unwrap();
    let chi = Profile::bump(2).sample(&grid);
    let u = ModeKernel::convolution_only(alpha, mu, &grid).unwrap().convolution(1.0, &chi, &grid);
    let scale = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in (0..=grid.n_src).step_by(50) {
        let want = bump_oracle(alpha, mu, grid.t(i), 1.0);
        assert!((u[i] - want).abs() <= 1e-5 * scale, "i={i}: {} vs {want}", u[i]);
    }
}

#[test]
fn halving_the_step_reduces_the_error() {
    let (alpha, mu) = (1.6, 20.0);
    let err = |dt: f64| {
        let grid = TimeGrid::new(1.0, 1.5, dt).unwrap();
        let chi = Profile::bump(2).sample(&grid);
        let u = ModeKernel::convolution_only(alpha, mu, &grid).unwrap().convolution(1.0, &chi, &grid);
        (0..=grid.n_src)
            .map(|i| (u[i] - bump_oracle(alpha, mu, grid.t(i), 1.0)).abs())
            .fold(0.0, f64::max)
    };
    let (e1, e2) = (err(0.02), err(0.01));
    assert!(e1 / e2 >= 1.7, "{e1} / {e2}");
}

#[test]
fn linear_in_data() {
    let grid = TimeGrid::new(1.0, 2.0, 0.01).unwrap();
    let k = ModeKernel::new(1.3, 7.0, &grid).unwrap();
    let c1 = Profile::bump(1).sample(&grid);
    let c2 = Profile::Poly { p: 3, q: 2 }.sample(&grid);
    let sum: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a + b).collect();
    let u1 = k.solve(0.5, 0.3, 0.0, &c1, &grid).unwrap();
    let u2 = k.solve(0.5, 0.0, -1.2, &c2, &grid).unwrap();
    let u = k.solve(0.5, 0.3, -1.2, &sum, &grid).unwrap();
    for i in 0..u.len() {
        assert!((u[i] - u1[i] - u2[i]).abs() < 1e-14 * (1.0 + u[i].abs()));
    }
}

#[test]
fn scaling_the_source_scales_the_response() {
    let grid = TimeGrid::new(1.0, 2.0, 0.01).unwrap();
    let k = ModeKernel::convolution_only(1.7, 3.0, &grid).unwrap();
    let c = Profile::bump(2).sample(&grid);
    let c4: Vec<f64> = c.iter().map(|v| 4.0 * v).collect();
    let u = k.convolution(1.0, &c, &grid);
    let u4 = k.convolution(1.0, &c4, &grid);
    for (a, b) in u.iter().zip(&u4) {
        assert_eq!(4.0 * a, *b);
    }
}

#[test]
fn modes_without_data_do_not_change_the_trace() {
    let p = ps(1.4);
    let grid = TimeGrid::new(1.0, 2.0, 0.01).unwrap();
    let obs = Observation::Point { x0: vec![0.37] };
    let big = eigen_interval(1.0, 100).unwrap();
    let small = eigen_interval(1.0, 3).unwrap();
    let src = |modes: usize| SourceSpec {
        g: Profile::bump(2).sample(&grid),
        f: (0..modes).map(|k| if k < 3 { 1.0 / (k + 1) as f64 } else { 0.0 }).collect(),
        z: Vec::new(),
        n: 2,
    };
    let run = |spec: &fracpole::spectrum::Spectrum| {
        let w = observation_weights(&obs, spec).unwrap();
        solve(&p, spec, &w.gammas, &InitialData::zeros(spec.len()), &src(spec.len()), &grid).unwrap()
    };
    let (h100, h3) = (run(&big), run(&small));
    for (a, b) in h100.values.iter().zip(&h3.values) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn single_mode_observation() {
    let grid = TimeGrid::new(1.0, 2.0, 0.01).unwrap();
    let u1: Vec<f64> = (0..=grid.n_obs).map(|i| (i as f64).sin()).collect();
    let u = vec![u1.clone(), vec![3.0; u1.len()]];
    let h = observe(&u, &[1.0, 0.0], grid.dt).unwrap();
    assert_eq!(h.values, u1);
    let h0 = observe(&u, &[0.0, 0.0], grid.dt).unwrap();
    assert!(h0.values.iter().all(|v| *v == 0.0));
}

#[test]
fn residual_of_the_solver_halves_with_the_step() {
    for alpha in [1.2, 1.5, 1.8] {
        let res = |dt: f64| {
            let grid = TimeGrid::new(1.0, 2.0, dt).unwrap();
            let chi = Profile::bump(2).sample(&grid);
            let u = mode_solution(&ps(alpha), 12.0, 0.0, 0.0, &chi, &grid).unwrap();
            residual_oracle(alpha, 0.7, 12.0, 0.0, &chi, &u, &grid).unwrap()
        };
        let ratio = res(0.01) / res(0.005);
        assert!((1.7..=2.3).contains(&ratio), "alpha={alpha}: ratio {ratio}");
    }
}

#[test]
fn corrupted_solution_has_a_visible_residual() {
    let grid = TimeGrid::new(1.0, 2.0, 0.001).unwrap();
    let chi = Profile::bump(2).sample(&grid);
    let u = mode_solution(&ps(1.5), 12.0, 0.0, 0.0, &chi, &grid).unwrap();
    let good = residual_oracle(1.5, 0.7, 12.0, 0.0, &chi, &u, &grid).unwrap();
    let bad: Vec<f64> = u.iter().map(|v| 1.01 * v).collect();
    let worse = residual_oracle(1.5, 0.7, 12.0, 0.0, &chi, &bad, &grid).unwrap();
    assert!(worse > 3.0 * good, "{worse} vs {good}");
}

#[test]
fn solver_output_obeys_the_exponential_bound() {
    let p = ps(1.4);
    let grid = TimeGrid::new(1.0, 2.0, 0.01).unwrap();
    let spec = eigen_interval(1.0, 20).unwrap();
    let w = observation_weights(&Observation::Point { x0: vec![0.37] }, &spec).unwrap();
    let init = InitialData {
        phi: (1..=20).map(|k| 0.2 / (k * k) as f64).collect(),
        psi: (1..=20).map(|k| 0.1 / (k * k) as f64).collect(),
    };
    let src = SourceSpec {
        g: Profile::bump(2).sample(&grid),
        f: (1..=20).map(|k| 1.0 / (k * k) as f64).collect(),
        z: Vec::new(),
        n: 2,
    };
    let h = solve(&p, &spec, &w.gammas, &init, &src, &grid).unwrap();
    assert!(exp_bound_check(&h, 0.1).unwrap());
    assert!(h.tail_estimate < 1e-2, "{}", h.tail_estimate);
}

#[test]
fn mismatched_source_is_rejected() {
    let grid = TimeGrid::new(1.0, 2.0, 0.01).unwrap();
    let k = ModeKernel::new(1.5, 1.0, &grid).unwrap();
    assert!(k.solve(1.0, 0.0, 0.0, &[0.0; 7], &grid).is_err());
}
