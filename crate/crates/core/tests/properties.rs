use proptest::prelude::*;

use qprdc::closed_form::{european_call, european_prdc};
use qprdc::gaussian::{bivar_rect_prob, norm_cdf, norm_interval_mass, norm_inv_cdf, Correlation};
use qprdc::model::ModelParams;
use qprdc::payoff::{prdc_payoff, ProductSpec};
use qprdc::pricer::{price_bermudan, PricerOptions};
use qprdc::quantizer::{build_std_grid, rescale, GridCache};
use qprdc::tree::{allocate_sizes, build_tree, Mode, TreeOptions};

fn market(sigma_s: f64, sigma_r: f64, rho_df: f64) -> ModelParams {
    ModelParams {
        sigma_s,
        rho_df,
        ..ModelParams::reference(sigma_r)
    }
}

proptest! {
    #[test]
    fn cdf_is_symmetric_and_inverts(x in -7.5f64..7.5) {
        prop_assert!((norm_cdf(x) + norm_cdf(-x) - 1.0).abs() < 2e-16);
        // the upper tail of p carries too few bits to recover x
        let z = -x.abs();
        let back = norm_inv_cdf(norm_cdf(z)).unwrap();
        prop_assert!((back - z).abs() < 1e-9 * (1.0 + x.abs()), "{z} -> {back}");
    }

    #[test]
    fn interval_masses_add(a in -8.0f64..8.0, d1 in 0.0f64..4.0, d2 in 0.0f64..4.0) {
        let (b, c) = (a + d1, a + d1 + d2);
        let split = norm_interval_mass(a, b) + norm_interval_mass(b, c);
        prop_assert!((split - norm_interval_mass(a, c)).abs() < 1e-15);
        prop_assert!(norm_interval_mass(a, c) >= 0.0);
    }

    #[test]
    fn rectangles_are_bounded_and_symmetric(
        u1 in -4.0f64..4.0, du in 0.0f64..3.0,
        v1 in -4.0f64..4.0, dv in 0.0f64..3.0,
        rho in -0.99f64..0.99,
    ) {
        let (u2, v2) = (u1 + du, v1 + dv);
        let r = Correlation::new(rho).unwrap();
        let p = bivar_rect_prob(u1, u2, v1, v2, r);
        let bound = norm_interval_mass(u1, u2).min(norm_interval_mass(v1, v2));
        prop_assert!(p >= -1e-15 && p <= bound + 1e-14, "{p} vs {bound}");
        let swapped = bivar_rect_prob(v1, v2, u1, u2, r);
        prop_assert!((p - swapped).abs() < 1e-13);
        let neg = Correlation::new(-rho).unwrap();
        let reflected = bivar_rect_prob(u1, u2, -v2, -v1, neg);
        prop_assert!((p - reflected).abs() < 1e-13);
    }

    #[test]
    fn call_decomposition_reproduces_payoff(
        cd in 0.0f64..0.3, cf in 0.01f64..0.5,
        floor in 0.0f64..0.05, width in 0.001f64..0.2,
        s in 0.0f64..400.0,
    ) {
        let spec = ProductSpec::uniform(vec![1.0], cd, cf, floor + width, floor, 88.17).unwrap();
        let direct = prdc_payoff(&spec, 0, s);
        let split = spec.call_decomposition(0).eval(s);
        prop_assert!((direct - split).abs() <= 1e-14 * (1.0 + direct.abs()), "{direct} {split}");
    }

    #[test]
    fn calls_decrease_in_strike_within_no_arbitrage_bounds(
        k in 1.0f64..300.0, dk in 0.01f64..50.0, t in 0.1f64..15.0,
        sigma_s in 0.05f64..0.8, sigma_r in 0.0f64..0.03,
    ) {
        let p = market(sigma_s, sigma_r, 0.0);
        let lo = european_call(&p, k, t).unwrap();
        let hi = european_call(&p, k + dk, t).unwrap();
        let fwd = p.s0 * p.discount_f(t);
        prop_assert!(hi <= lo + 1e-12);
        prop_assert!(lo - hi <= dk * p.discount_d(t) + 1e-12);
        prop_assert!(lo <= fwd + 1e-12);
        prop_assert!(lo >= (fwd - k * p.discount_d(t)).max(0.0) - 1e-12);
    }

    #[test]
    fn rescaled_grids_keep_weights(n in 1usize..60, mu in -3.0f64..3.0, sigma in 0.01f64..5.0) {
        let g = build_std_grid(n).unwrap();
        let r = rescale(&g, mu, sigma).unwrap();
        prop_assert_eq!(g.weights(), r.weights());
        prop_assert!((r.distortion() - sigma * sigma * g.distortion()).abs() < 1e-14 * sigma * sigma);
        prop_assert!(r.points().windows(2).all(|w| w[0] < w[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transition_rows_are_stochastic(
        sigma_s in 0.05f64..0.8, sigma_r in 0.0005f64..0.03,
        rho_df in -0.9f64..0.9, n in 20usize..400, steps in 1usize..4,
    ) {
        let p = market(sigma_s, sigma_r, rho_df);
        let dates: Vec<f64> = (1..=steps).map(|k| 2.0 * k as f64).collect();
        let sizes = allocate_sizes(n, Mode::TwoD).unwrap();
        let tree = build_tree(&p, &dates, &sizes, &GridCache::in_memory(), TreeOptions::default()).unwrap();
        for k in 0..steps {
            let tr = tree.transition(k).unwrap();
            prop_assert!(tr.max_row_sum_error() < 1e-12);
            for i in 0..tr.rows() {
                prop_assert!(tr.row(i).iter().all(|&q| q >= 0.0));
            }
        }
    }

    #[test]
    fn bermudan_dominates_each_coupon_and_respects_bounds(
        sigma_s in 0.1f64..0.7, sigma_r in 0.001f64..0.02,
        floor in 0.0f64..0.02, n_dates in 1usize..5,
    ) {
        let p = market(sigma_s, sigma_r, 0.0);
        let dates: Vec<f64> = (1..=n_dates).map(|k| k as f64).collect();
        let spec = ProductSpec::uniform(dates.clone(), 0.15, 0.189, 0.0555, floor, p.s0).unwrap();
        let sizes = allocate_sizes(3000, Mode::TwoD).unwrap();
        let tree = build_tree(&p, &dates, &sizes, &GridCache::in_memory(), TreeOptions::default()).unwrap();
        let v0 = price_bermudan(&tree, &spec, PricerOptions::default()).unwrap().v0;
        let cap_pv = (0..n_dates).map(|k| 0.0555 * p.discount_d(dates[k])).fold(0.0, f64::max);
        let floor_pv = (0..n_dates).map(|k| floor * p.discount_d(dates[k])).fold(0.0, f64::max);
        prop_assert!(v0 <= cap_pv + 1e-12);
        prop_assert!(v0 >= floor_pv - 1e-12);
        for k in 0..n_dates {
            let euro = european_prdc(&p, &spec, k).unwrap();
            prop_assert!(v0 >= euro * (1.0 - 5e-3), "v0 {v0} below coupon {k}: {euro}");
        }
    }
}
