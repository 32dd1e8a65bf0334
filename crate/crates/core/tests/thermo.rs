use meanfield_core::chebyshev;
use meanfield_core::rng::{CounterRng, Purpose};
use meanfield_core::stats;
use meanfield_core::thermo::*;

fn random_density(rng: &mut CounterRng) -> DensityRep {
    let n = 4 + (rng.uniform() * 20.0) as usize;
    let mut c = vec![0.5];
    for k in 1..n {
        c.push((rng.uniform() - 0.5) * 0.4 / (k * k) as f64);
    }
    let m = chebyshev::integral(&c);
    DensityRep::from_coeffs(c.into_iter().map(|x| x / m).collect()).unwrap()
}

#[test]
fn mass_is_conserved_for_random_densities() {
    let mut rng = CounterRng::new(7, 0, Purpose::Synthetic);
    for _ in 0..1000 {
        let rho = random_density(&mut rng);
        let k = (rng.uniform() * 2.0 - 1.0) * 0.99;
        let out = transfer_step(&rho, k).unwrap();
        assert!(
            (out.renorm - 1.0).abs() <= 1e-10,
            "K={k} factor {}",
            out.renorm
        );
        assert!((out.rho.mass() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn order_doubling_does_not_move_phi() {
    let fp = solve_fixed_point(15.0, 1e-12).unwrap();
    let k = (15.0 * fp.phi_bar - 2.0).tanh();
    let a = TransferMatrix::new(k, 256).unwrap().stationary().unwrap();
    let b = TransferMatrix::new(k, 512).unwrap().stationary().unwrap();
    let pa = chebyshev::product_integral(&a, &meanfield_core::maps::PHI_EXPANDING_CHEB);
    let pb = chebyshev::product_integral(&b, &meanfield_core::maps::PHI_EXPANDING_CHEB);
    assert!((pa - pb).abs() <= 1e-10, "{pa} vs {pb}");
}

#[test]
fn invariant_density_is_nonnegative() {
    for &a in &[-6.0f64, -2.0, 0.5, 3.0] {
        let rho = invariant_density(a.tanh(), 1e-13).unwrap();
        for i in 0..1000 {
            let x = -1.0 + 2.0 * i as f64 / 999.0;
            assert!(rho.eval(x) >= -1e-8, "arg {a} x {x}");
        }
    }
}

#[test]
fn fixed_point_at_19_is_unstable_and_repels_to_a_two_cycle() {
    let fp = solve_fixed_point(19.0, 1e-12).unwrap();
    assert!(!fp.stable);
    let t = run_macro(19.0, 4000, &fp.density).unwrap();
    let n = t.phi.len();
    let tail = &t.phi[n - 10..];
    assert!(tail.iter().all(|p| (p - fp.phi_bar).abs() > 1e-3));
    assert!((t.phi[n - 1] - t.phi[n - 3]).abs() < 1e-8);
    assert!((t.phi[n - 1] - t.phi[n - 2]).abs() > 1e-3);
}

#[test]
fn threshold_lies_in_the_expected_window() {
    let e = stability_threshold(18.3, 18.6, 1e-3).unwrap();
    assert!((18.3..=18.6).contains(&e), "{e}");
}

#[test]
fn bifurcation_scan_sees_period_doubling() {
    let rows = bifurcation_scan(18.0, 19.0, 3, 6000, 5800).unwrap();
    assert_eq!(rows[0].distinct(1e-6), 1);
    assert_eq!(rows[2].distinct(1e-6), 2);
}

#[test]
fn lyapunov_independent_of_qr_interval() {
    let run = |q| {
        lyapunov_spectrum(
            30.0,
            3,
            2000,
            500,
            LyapunovConfig {
                order: Some(128),
                qr_interval: q,
            },
        )
        .unwrap()
    };
    let a = run(5);
    let b = run(10);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-3, "{a:?} vs {b:?}");
    }
}

#[test]
fn response_formula_matches_finite_differences_at_15() {
    let r = fixed_point_response(15.0, 1e-12).unwrap();
    let up = solve_fixed_point(15.0 + 1e-3, 1e-13).unwrap().phi_bar;
    let down = solve_fixed_point(15.0 - 1e-3, 1e-13).unwrap().phi_bar;
    let fd = (up - down) / 2e-3;
    assert!(
        (r.dphibar_deps - fd).abs() <= 0.01 * fd.abs(),
        "{} vs {fd}",
        r.dphibar_deps
    );
}

#[test]
fn noisy_macro_bias_scales_like_inverse_m() {
    let fp = solve_fixed_point(15.0, 1e-12).unwrap();
    let k = (15.0 * fp.phi_bar - 2.0).tanh();
    let acv = phi_autocovariance(k, 30).unwrap();
    let ms = [1e3, 1e4, 1e5];
    let mut bias = Vec::new();
    for &m in &ms {
        let (a, b) = run_macro_noisy_antithetic(15.0, 6000, m, &acv, 11, &fp.density).unwrap();
        let s: f64 = a.phi[1000..].iter().chain(&b.phi[1000..]).sum();
        bias.push((s / 10_000.0 - fp.phi_bar).abs());
    }
    let slope = stats::log_log_slope(&ms, &bias).unwrap();
    assert!((slope + 1.0).abs() <= 0.3, "{bias:?} slope {slope}");
}
