use num_complex::Complex64;
use proptest::prelude::*;
use statrs::function::gamma::{gamma, gamma_lr};
use vlab::Kernel;

/// Composite Gauss-Legendre (5 points) on `n` equal panels of [lo, hi].
fn gauss(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    const X: [f64; 5] = [0.0, -0.5384693101056831, 0.5384693101056831, -0.906179845938664, 0.906179845938664];
    const W: [f64; 5] = [0.5688888888888889, 0.47862867049936647, 0.47862867049936647, 0.23692688505618908, 0.23692688505618908];
    let h = (hi - lo) / n as f64;
    (0..n)
        .map(|p| {
            let mid = lo + (p as f64 + 0.5) * h;
            X.iter().zip(&W).map(|(x, w)| w * f(mid + 0.5 * h * x)).sum::<f64>() * 0.5 * h
        })
        .sum()
}

/// `int_0^T e^{-lam t} a(t) dt`, with the substitution `t = u^{1/beta}`
/// removing the singularity of power-law kernels at 0.
fn laplace_by_quadrature(k: &Kernel, lam: f64) -> f64 {
    let t_max = 40.0 / lam;
    match k {
        Kernel::PowerLaw { beta, eta } if *beta < 1.0 => {
            let (b, e) = (*beta, *eta);
            let split = t_max.min(1.0);
            // int_0^split t^{b-1} e^{-(lam+eta)t} dt / Gamma(b) = int_0^{split^b} e^{-(lam+eta)u^{1/b}} du / (b Gamma(b))
            let head = gauss(|u| (-(lam + e) * u.powf(1.0 / b)).exp(), 0.0, split.powf(b), 400) / (b * gamma(b));
            let tail = if t_max > split { gauss(|t| (-lam * t).exp() * k.eval(t).unwrap(), split, t_max, 2000) } else { 0.0 };
            head + tail
        }
        _ => {
            // dyadic panels toward 0 resolve derivative singularities there
            let f = |t: f64| (-lam * t).exp() * k.eval(t).unwrap();
            let split = t_max.min(1.0);
            let head: f64 = (0..60).map(|j| gauss(f, split * 0.5f64.powi(j + 1), split * 0.5f64.powi(j), 4)).sum();
            let tail = if t_max > split { gauss(f, split, t_max, 2000) } else { 0.0 };
            head + tail
        }
    }
}

fn closed_form_integral(k: &Kernel, t: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    match k {
        Kernel::Constant => t,
        Kernel::Linear => t * t / 2.0,
        Kernel::Exponential { gamma } => (1.0 - (-gamma * t).exp()) / gamma,
        Kernel::PowerLaw { beta, eta } if *eta == 0.0 => t.powf(*beta) / gamma(beta + 1.0),
        Kernel::PowerLaw { beta, eta } => gamma_lr(*beta, eta * t) / eta.powf(*beta),
        Kernel::Mixture { terms } => terms.iter().map(|(w, k)| w * closed_form_integral(k, t)).sum(),
    }
}

fn kernel_strategy() -> impl Strategy<Value = Kernel> {
    prop_oneof![
        Just(Kernel::Constant),
        Just(Kernel::Linear),
        (0.1f64..5.0).prop_map(|g| Kernel::exponential(g).unwrap()),
        (0.2f64..1.9, 0.0f64..2.0).prop_map(|(b, e)| Kernel::power_law(b, e).unwrap()),
        (0.1f64..2.0, 0.3f64..0.9).prop_map(|(w, b)| Kernel::mixture(vec![
            (w, Kernel::Constant),
            (1.0, Kernel::power_law(b, 0.0).unwrap())
        ])
        .unwrap()),
    ]
}

#[test]
fn laplace_matches_quadrature_of_eval() {
    let kernels = [
        Kernel::Constant,
        Kernel::Linear,
        Kernel::exponential(2.0).unwrap(),
        Kernel::power_law(0.5, 0.0).unwrap(),
        Kernel::power_law(0.3, 1.0).unwrap(),
        Kernel::power_law(1.5, 0.5).unwrap(),
        Kernel::mixture(vec![(0.5, Kernel::Constant), (2.0, Kernel::power_law(0.7, 0.0).unwrap())]).unwrap(),
    ];
    for k in &kernels {
        for lam in [1.0, 2.5, 10.0, 40.0] {
            let exact = k.laplace_real(lam).unwrap();
            let quad = laplace_by_quadrature(k, lam);
            assert!((exact - quad).abs() <= 1e-6 * exact.abs(), "{k:?} at {lam}: {exact} vs {quad}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weight_rows_integrate_the_kernel(k in kernel_strategy(), dt in 1e-3f64..0.1, n in 1usize..60) {
        let w = k.moment_weights(dt, n).unwrap();
        for i in 0..=n {
            let want = closed_form_integral(&k, i as f64 * dt);
            prop_assert!((w.row_sum(i) - want).abs() <= 1e-12 * want.abs().max(1.0), "row {i}: {} vs {want}", w.row_sum(i));
        }
    }

    #[test]
    fn mixture_laplace_is_weighted_sum(w1 in 0.0f64..3.0, w2 in 0.0f64..3.0, b in 0.2f64..1.8,
                                      g in 0.1f64..4.0, re in 0.5f64..20.0, im in -20.0f64..20.0) {
        let c1 = Kernel::power_law(b, 0.0).unwrap();
        let c2 = Kernel::exponential(g).unwrap();
        let m = Kernel::mixture(vec![(w1, c1.clone()), (w2, c2.clone())]).unwrap();
        let lam = Complex64::new(re, im);
        let lhs = m.laplace(lam).unwrap();
        let rhs = c1.laplace(lam).unwrap() * w1 + c2.laplace(lam).unwrap() * w2;
        prop_assert!((lhs - rhs).norm() <= 1e-14 * rhs.norm().max(1.0));
    }
}
