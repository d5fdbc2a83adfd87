//! Backward dynamic programming on a quantization tree.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::payoff::{ObstacleFactors, Payoff};
use crate::sum::pairwise_dot;
use crate::tree::{Mode, QuantTree};

#[derive(Clone, Copy, Debug, Default)]
pub struct PricerOptions {
    /// Keep the value vector of every layer (needed by `exercise_boundary`).
    pub retain_layers: bool,
    /// Allow exercise at `t_0 = 0` with the first date's coupon terms.
    pub exercise_at_t0: bool,
}

#[derive(Clone, Debug, Default)]
pub struct PriceMeta {
    pub mode: Option<Mode>,
    pub nodes_per_date: Vec<usize>,
    /// Wall time spent building transition operators.
    pub transition_ms: f64,
    /// Wall time of the backward induction (includes on-demand kernel rows).
    pub induction_ms: f64,
    /// Steps whose kernels were evaluated row by row during induction.
    pub lazy_steps: usize,
}

#[derive(Clone, Debug)]
pub struct PriceResult {
    /// Price per unit notional.
    pub v0: f64,
    /// `values[k][i]`, retained on request.
    pub values: Option<Vec<Vec<f64>>>,
    /// `exercise_flags[k][i]`: obstacle ≥ continuation. Layer 0 is empty
    /// unless exercise at `t_0` is allowed.
    pub exercise_flags: Vec<Vec<bool>>,
    pub meta: PriceMeta,
}

fn check_dates<P: Payoff + ?Sized>(tree: &QuantTree, payoff: &P) -> Result<()> {
    let dates = payoff.dates();
    if dates.len() != tree.n_steps() {
        return Err(Error::Dimension(format!(
            "payoff has {} exercise dates, tree has {}",
            dates.len(),
            tree.n_steps()
        )));
    }
    for (k, (a, b)) in dates.iter().zip(&tree.dates[1..]).enumerate() {
        if (a - b).abs() > 1e-12 * b.max(1.0) {
            return Err(Error::Dimension(format!(
                "exercise date {k} is {a}, tree date is {b}"
            )));
        }
    }
    Ok(())
}

/// `h_k` at every node of layer `k ≥ 1`.
pub fn obstacle_layer<P: Payoff + ?Sized>(tree: &QuantTree, payoff: &P, k: usize) -> Vec<f64> {
    let layer = &tree.layers[k];
    let f = ObstacleFactors::new(&tree.params, layer.t);
    (0..layer.len())
        .into_par_iter()
        .map(|i| {
            let s = layer.state(tree.mode, i);
            f.eval(payoff, k - 1, s[0], s[2])
        })
        .collect()
}

/// Snell envelope of the discounted payoff on the tree:
/// `v_n = h_n`, `v_k = max(h_k, π_k v_{k+1})`, `v_0 = π_0 v_1`.
pub fn price_bermudan<P: Payoff + ?Sized>(
    tree: &QuantTree,
    payoff: &P,
    opts: PricerOptions,
) -> Result<PriceResult> {
    check_dates(tree, payoff)?;
    let n = tree.n_steps();
    let mut meta = PriceMeta {
        mode: Some(tree.mode),
        nodes_per_date: tree.layers.iter().map(|l| l.len()).collect(),
        ..Default::default()
    };
    let mut flags = vec![Vec::new(); n + 1];
    let mut retained = opts.retain_layers.then(|| vec![Vec::new(); n + 1]);

    let start = Instant::now();
    let mut v = obstacle_layer(tree, payoff, n);
    flags[n] = vec![true; v.len()];
    let mut transition_ms = 0.0;
    for k in (0..n).rev() {
        let t0 = Instant::now();
        let tr = tree.transition(k)?;
        transition_ms += t0.elapsed().as_secs_f64() * 1e3;
        if tr.is_lazy() {
            meta.lazy_steps += 1;
        }
        let cont = tr.apply(&v)?;
        if let Some(r) = retained.as_mut() {
            r[k + 1] = std::mem::take(&mut v);
        }
        v = if k >= 1 {
            let h = obstacle_layer(tree, payoff, k);
            flags[k] = h.iter().zip(&cont).map(|(h, c)| h >= c).collect();
            h.iter().zip(&cont).map(|(h, c)| h.max(*c)).collect()
        } else if opts.exercise_at_t0 {
            let h0 = ObstacleFactors::new(&tree.params, 0.0).eval(payoff, 0, 0.0, 0.0);
            flags[0] = vec![h0 >= cont[0]];
            vec![h0.max(cont[0])]
        } else {
            cont
        };
    }
    meta.transition_ms = transition_ms;
    meta.induction_ms = start.elapsed().as_secs_f64() * 1e3 - transition_ms;
    let v0 = v[0];
    if let Some(r) = retained.as_mut() {
        r[0] = v;
    }
    Ok(PriceResult {
        v0,
        values: retained,
        exercise_flags: flags,
        meta,
    })
}

/// Quantization cubature `Σ_j p_j h(z_j)` of a single-date payoff, with the
/// joint cell masses `p_j` taken from the root's transition row.
pub fn european_cubature<P: Payoff + ?Sized>(tree: &QuantTree, payoff: &P) -> Result<PriceResult> {
    if tree.n_steps() != 1 {
        return Err(Error::Dimension(format!(
            "european cubature needs a tree with dates {{t_0, T}}, got {} steps",
            tree.n_steps()
        )));
    }
    check_dates(tree, payoff)?;
    let t0 = Instant::now();
    let tr = tree.transition(0)?;
    let transition_ms = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    let h = obstacle_layer(tree, payoff, 1);
    let v0 = pairwise_dot(&tr.row(0), &h);
    Ok(PriceResult {
        v0,
        values: None,
        exercise_flags: vec![Vec::new(), vec![true; h.len()]],
        meta: PriceMeta {
            mode: Some(tree.mode),
            nodes_per_date: tree.layers.iter().map(|l| l.len()).collect(),
            transition_ms,
            induction_ms: t1.elapsed().as_secs_f64() * 1e3,
            lazy_steps: 0,
        },
    })
}

/// State coordinates `(x, w^f, y, w^d)` of the nodes of layer `k` where
/// exercising is optimal (ties count as exercise).
pub fn exercise_boundary(
    tree: &QuantTree,
    result: &PriceResult,
    k: usize,
) -> Result<Vec<[f64; 4]>> {
    if result.values.is_none() {
        return Err(Error::InvalidParameter(
            "exercise_boundary needs a result priced with retain_layers".into(),
        ));
    }
    let flags = result
        .exercise_flags
        .get(k)
        .ok_or_else(|| Error::Dimension(format!("no layer {k}")))?;
    Ok(flags
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(i, _)| tree.layers[k].state(tree.mode, i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{phi_d, ModelParams};
    use crate::payoff::{obstacle_h, ProductSpec};
    use crate::quantizer::GridCache;
    use crate::tree::{allocate_sizes, build_tree, GridSizes, TreeOptions};

    fn build(p: &ModelParams, dates: &[f64], sizes: GridSizes) -> QuantTree {
        build_tree(
            p,
            dates,
            &sizes,
            &GridCache::in_memory(),
            TreeOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn single_date_bermudan_is_the_cubature() {
        for mode in [Mode::TwoD, Mode::FourD] {
            let p = ModelParams::reference(0.05);
            let spec = ProductSpec::reference(5.0, 1, p.s0).unwrap();
            let t = build(
                &p,
                &spec.exercise_dates,
                allocate_sizes(4000, mode).unwrap(),
            );
            let b = price_bermudan(&t, &spec, PricerOptions::default())
                .unwrap()
                .v0;
            let e = european_cubature(&t, &spec).unwrap().v0;
            assert!((b / e - 1.0).abs() <= 1e-12, "{mode:?}: {b} vs {e}");
        }
    }

    #[test]
    fn one_node_tree_is_the_hand_recursion() {
        let p = ModelParams::reference(0.005);
        let spec = ProductSpec::reference(3.0, 3, p.s0).unwrap();
        for mode in [Mode::TwoD, Mode::FourD] {
            let t = build(&p, &spec.exercise_dates, allocate_sizes(1, mode).unwrap());
            let h: Vec<f64> = (0..3).map(|k| obstacle_h(&p, &spec, k, 0.0, 0.0)).collect();
            let want = h[0].max(h[1].max(h[2]));
            let got = price_bermudan(&t, &spec, PricerOptions::default())
                .unwrap()
                .v0;
            assert_eq!(got, want);
        }
    }

    #[test]
    fn constant_floor_coupon_is_a_discount() {
        let p = ModelParams::reference(0.005);
        let spec = ProductSpec::uniform(vec![2.0], 0.15, 0.189, 1.0, 1.0, p.s0).unwrap();
        let t = build(
            &p,
            &spec.exercise_dates,
            allocate_sizes(2000, Mode::TwoD).unwrap(),
        );
        let v = european_cubature(&t, &spec).unwrap().v0;
        assert!((v / p.discount_d(2.0) - 1.0).abs() < 1e-6, "{v}");
        // all dates: earliest discount wins when rates are positive
        let spec = ProductSpec::uniform(vec![1.0, 2.0], 0.15, 0.189, 1.0, 1.0, p.s0).unwrap();
        let t = build(
            &p,
            &spec.exercise_dates,
            allocate_sizes(2000, Mode::TwoD).unwrap(),
        );
        let r = price_bermudan(&t, &spec, PricerOptions::default()).unwrap();
        assert!((r.v0 / p.discount_d(1.0) - 1.0).abs() < 1e-5, "{}", r.v0);
        assert!(r.exercise_flags[1].iter().all(|&f| f));
    }

    #[test]
    fn bermudan_dominates_and_grows_with_dates() {
        let p = ModelParams::reference(0.05);
        let sizes = allocate_sizes(3000, Mode::TwoD).unwrap();
        let price = |dates: Vec<f64>| {
            let spec = ProductSpec::uniform(dates, 0.15, 0.189, 0.0555, 0.0, p.s0).unwrap();
            let t = build(&p, &spec.exercise_dates, sizes.clone());
            price_bermudan(&t, &spec, PricerOptions::default())
                .unwrap()
                .v0
        };
        let eu = price(vec![4.0]);
        let two = price(vec![2.0, 4.0]);
        let four = price(vec![1.0, 2.0, 3.0, 4.0]);
        assert!(two >= eu - 1e-6 && four >= two - 1e-6, "{eu} {two} {four}");
        assert!(four > eu);
    }

    #[test]
    fn monotone_in_payoff() {
        let p = ModelParams::reference_correlated(0.05);
        let dates = vec![1.0, 2.0, 3.0];
        let t = build(&p, &dates, allocate_sizes(2000, Mode::TwoD).unwrap());
        let mut last = 0.0;
        for cap in [0.02, 0.04, 0.0555, 0.08] {
            let spec = ProductSpec::uniform(dates.clone(), 0.15, 0.189, cap, 0.0, p.s0).unwrap();
            let v = price_bermudan(&t, &spec, PricerOptions::default())
                .unwrap()
                .v0;
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn exercise_set_is_an_upper_set_in_x() {
        let p = ModelParams::reference(0.05);
        let spec = ProductSpec::reference(3.0, 3, p.s0).unwrap();
        let t = build(
            &p,
            &spec.exercise_dates,
            GridSizes::new(Mode::TwoD, vec![20, 2]).unwrap(),
        );
        let r = price_bermudan(
            &t,
            &spec,
            PricerOptions {
                retain_layers: true,
                exercise_at_t0: false,
            },
        )
        .unwrap();
        for k in 1..=2 {
            let flags = &r.exercise_flags[k];
            for iy in 0..2 {
                let col: Vec<bool> = (0..20).map(|ix| flags[ix * 2 + iy]).collect();
                let first = col.iter().position(|&f| f).unwrap_or(20);
                assert!(col[first..].iter().all(|&f| f), "k={k} y={iy}: {col:?}");
            }
            let b = exercise_boundary(&t, &r, k).unwrap();
            assert_eq!(b.len(), flags.iter().filter(|&&f| f).count());
        }
        let without = price_bermudan(&t, &spec, PricerOptions::default()).unwrap();
        assert!(exercise_boundary(&t, &without, 1).is_err());
    }

    #[test]
    fn deep_cap_exercises_everywhere_and_floor_nowhere() {
        let p = ModelParams::reference(0.005);
        // always at the cap: exercising as early as possible is optimal
        let capped = ProductSpec::uniform(vec![1.0, 2.0], -1.0, 0.189, 0.0555, 0.0, p.s0).unwrap();
        let t = build(
            &p,
            &capped.exercise_dates,
            allocate_sizes(500, Mode::TwoD).unwrap(),
        );
        let r = price_bermudan(
            &t,
            &capped,
            PricerOptions {
                retain_layers: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(
            exercise_boundary(&t, &r, 1).unwrap().len(),
            t.layers[1].len()
        );
        // always at a zero floor: nothing is worth exercising early
        let floored = ProductSpec::uniform(vec![1.0, 2.0], 10.0, 0.189, 0.0555, 0.0, p.s0).unwrap();
        let r = price_bermudan(
            &t,
            &floored,
            PricerOptions {
                retain_layers: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.v0, 0.0);
        // ties count as exercise
        assert!(r.exercise_flags[1].iter().all(|&f| f));
    }

    #[test]
    fn exercise_at_t0_flag() {
        let p = ModelParams::reference(0.005);
        let spec = ProductSpec::reference(2.0, 2, p.s0).unwrap();
        let t = build(
            &p,
            &spec.exercise_dates,
            allocate_sizes(500, Mode::TwoD).unwrap(),
        );
        let off = price_bermudan(&t, &spec, PricerOptions::default()).unwrap();
        let on = price_bermudan(
            &t,
            &spec,
            PricerOptions {
                exercise_at_t0: true,
                ..Default::default()
            },
        )
        .unwrap();
        let h0 = phi_d(&p, 0.0) * 0.039;
        assert!((on.v0 - off.v0.max(h0)).abs() < 1e-15);
        assert!(off.exercise_flags[0].is_empty() && on.exercise_flags[0].len() == 1);
    }

    #[test]
    fn dimension_checks_and_determinism() {
        let p = ModelParams::reference(0.05);
        let spec = ProductSpec::reference(2.0, 2, p.s0).unwrap();
        let t = build(&p, &[1.0, 2.5], allocate_sizes(200, Mode::TwoD).unwrap());
        assert!(matches!(
            price_bermudan(&t, &spec, PricerOptions::default()),
            Err(Error::Dimension(_))
        ));
        assert!(european_cubature(&t, &spec).is_err());
        let t = build(
            &p,
            &spec.exercise_dates,
            allocate_sizes(2000, Mode::FourD).unwrap(),
        );
        let a = price_bermudan(&t, &spec, PricerOptions::default())
            .unwrap()
            .v0;
        let b = price_bermudan(&t, &spec, PricerOptions::default())
            .unwrap()
            .v0;
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
