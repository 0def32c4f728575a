use proptest::prelude::*;
use vlab::volterra::{check_complete_positivity, solve_r, solve_s, solve_second_kind, solve_scalar, Verdict};
use vlab::{Grid, GridFunction, Kernel, OperatorModel};

/// Closed-form `s` for `s + mu (a * s) = 1`.
fn s_exact(k: &Kernel, mu: f64, t: f64) -> f64 {
    match k {
        Kernel::Constant => (-mu * t).exp(),
        Kernel::Linear => (mu.sqrt() * t).cos(),
        Kernel::Exponential { gamma } => {
            let g = *gamma;
            (g + mu * (-(g + mu) * t).exp()) / (g + mu)
        }
        _ => unreachable!(),
    }
}

#[test]
fn second_order_convergence_for_smooth_kernels() {
    let mu = 2.0;
    for k in [Kernel::Constant, Kernel::Linear, Kernel::exponential(1.5).unwrap()] {
        let err = |dt: f64| {
            let g = Grid::with_horizon(1.0, dt).unwrap();
            (solve_s(&k, mu, g).unwrap().last() - s_exact(&k, mu, 1.0)).abs()
        };
        let (e1, e2, e3) = (err(0.02), err(0.01), err(0.005));
        for ratio in [e1 / e2, e2 / e3] {
            assert!((3.2..=4.8).contains(&ratio), "{k:?}: errors {e1:e} {e2:e} {e3:e}");
        }
    }
}

#[test]
fn zero_coefficient_returns_forcing_exactly() {
    let g = Grid::with_horizon(1.0, 0.01).unwrap();
    let f = GridFunction::from_fn(g, |t| (3.0 * t).sin() + t * t);
    let u = solve_scalar(&Kernel::power_law(0.4, 0.0).unwrap(), 0.0, &f).unwrap();
    assert_eq!(u.values, f.values);
    let fv = GridFunction::from_fn(g, |t| nalgebra::DVector::from_vec(vec![t, 1.0 - t]));
    let zero = OperatorModel::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let uv = solve_second_kind(&Kernel::Linear, &zero, &fv).unwrap();
    assert_eq!(uv.values, fv.values);
}

#[test]
fn s_satisfies_its_equation_under_independent_quadrature() {
    // mu (a * s)(t) = 1 - s(t), with the convolution done by trapezoid
    let g = Grid::with_horizon(1.0, 1e-3).unwrap();
    for k in [Kernel::Constant, Kernel::Linear, Kernel::exponential(1.0).unwrap()] {
        let mu = 3.0;
        let s = solve_s(&k, mu, g).unwrap();
        for i in [250usize, 500, 1000] {
            let f: Vec<f64> = (0..=i).map(|j| k.eval(g.t(i - j)).unwrap() * s.values[j]).collect();
            let trap = g.dt * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[i]));
            assert!((mu * trap - (1.0 - s.values[i])).abs() < 1e-5, "{k:?} at node {i}");
        }
    }
}

#[test]
fn r_is_minus_derivative_of_s_over_mu() {
    let dt = 1e-3;
    let g = Grid::with_horizon(1.0, dt).unwrap();
    for k in [Kernel::Constant, Kernel::Linear, Kernel::exponential(1.0).unwrap()] {
        let mu = 2.0;
        let s = solve_s(&k, mu, g).unwrap();
        let r = solve_r(&k, mu, g).unwrap();
        for i in (10..g.n).step_by(97) {
            let ds = (s.values[i + 1] - s.values[i - 1]) / (2.0 * dt);
            assert!((r.values[i] + ds / mu).abs() < 10.0 * dt, "{k:?} at node {i}");
        }
    }
}

#[test]
fn power_law_s_matches_mittag_leffler() {
    // E_{1/2}(-sqrt t) = e^t erfc(sqrt t)
    let g = Grid::with_horizon(1.0, 1e-3).unwrap();
    let s = solve_s(&Kernel::power_law(0.5, 0.0).unwrap(), 1.0, g).unwrap();
    for t in [0.1f64, 0.5, 1.0] {
        let oracle = t.exp() * statrs::function::erf::erfc(t.sqrt());
        assert!((s.values[g.index_of(t)] - oracle).abs() < 1e-4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn constant_kernel_is_always_completely_positive(mus in proptest::collection::vec(0.0f64..200.0, 1..5)) {
        let g = Grid::with_horizon(2.0, 1e-2).unwrap();
        let rep = check_complete_positivity(&Kernel::Constant, &mus, g, None).unwrap();
        prop_assert_eq!(rep.verdict, Verdict::Pass);
    }

    #[test]
    fn linear_kernel_fails_past_quarter_period(mu in 0.5f64..50.0) {
        let t_end = 1.2 * std::f64::consts::PI / (2.0 * mu.sqrt());
        let g = Grid::with_horizon((t_end * 1000.0).ceil() / 1000.0, 1e-3).unwrap();
        let rep = check_complete_positivity(&Kernel::Linear, &[mu], g, None).unwrap();
        prop_assert_eq!(rep.verdict, Verdict::Fail);
    }
}
