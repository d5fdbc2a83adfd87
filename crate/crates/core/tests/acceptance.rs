//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use qprdc::closed_form::{european_call, european_prdc};
use qprdc::mc::{mc_european, mc_transition_row};
use qprdc::model::ModelParams;
use qprdc::payoff::{Payoff, ProductSpec};
use qprdc::pricer::{european_cubature, price_bermudan, PricerOptions};
use qprdc::quantizer::{GridCache, CACHE_DIR_ENV};
use qprdc::tree::{
    allocate_sizes, build_tree, mc_transitions_4d, GridSizes, McConfig, Mode, QuantTree,
    TreeOptions,
};

const CLOSED_FORM_TOL: f64 = 1e-6;
const EUROPEAN_TOL: f64 = 1e-4;
const BERMUDAN_50BP_TOL: f64 = 5e-4;
const BERMUDAN_500BP_10Y_TOL: f64 = 2e-2;
const COLLAPSE_TOL: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-8;
const MC_SIGMAS: f64 = 4.0;

const N_2D: usize = 32_000;
const N_2D_CORRELATED: usize = 128_000;
const N_4D_EUROPEAN: usize = 512_000;
const N_2D_BERMUDAN: usize = 128_000;
const N_4D_BERMUDAN: usize = 512_000;

const MATURITIES: [f64; 3] = [2.0, 5.0, 10.0];
const VOLS: [f64; 2] = [0.005, 0.05];

// Published percent-of-notional closed-form prices for the European tables.
const TABLE_ZERO: [(f64, f64, f64); 6] = [
    (2.0, 0.005, 2.171945242),
    (5.0, 0.005, 1.630435483),
    (10.0, 0.005, 1.127330259),
    (2.0, 0.05, 2.159404007),
    (5.0, 0.05, 1.539295559),
    (10.0, 0.05, 0.8013151892),
];
const TABLE_CORRELATED: [(f64, f64, f64); 6] = [
    (2.0, 0.005, 2.173803852),
    (5.0, 0.005, 1.636518082),
    (10.0, 0.005, 1.141944391),
    (2.0, 0.05, 2.185536786),
    (5.0, 0.05, 1.652226813),
    (10.0, 0.05, 1.103531914),
];

struct Fixed<F: Fn(f64) -> f64 + Sync>(Vec<f64>, F);

impl<F: Fn(f64) -> f64 + Sync> Payoff for Fixed<F> {
    fn dates(&self) -> &[f64] {
        &self.0
    }
    fn value(&self, _: usize, s: f64) -> f64 {
        (self.1)(s)
    }
}

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!(
            "{} [{id}] {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
    }
}

fn cache() -> GridCache {
    match std::env::var_os(CACHE_DIR_ENV) {
        Some(d) if !d.is_empty() => GridCache::with_dir(d),
        _ => GridCache::with_dir(concat!(env!("CARGO_TARGET_TMPDIR"), "/qgrid-cache")),
    }
}

fn rel(got: f64, want: f64) -> f64 {
    (got / want - 1.0).abs()
}

fn tree(params: &ModelParams, dates: &[f64], n: usize, mode: Mode) -> QuantTree {
    let sizes = allocate_sizes(n, mode).unwrap();
    build_tree(params, dates, &sizes, &cache(), TreeOptions::default()).unwrap()
}

fn warm(n: usize, mode: Mode) {
    for &l in &allocate_sizes(n, mode).unwrap().levels {
        cache().get(l).unwrap();
    }
}

fn criterion_1(r: &mut Report) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (table, params) in [
        (
            &TABLE_ZERO,
            ModelParams::reference as fn(f64) -> ModelParams,
        ),
        (&TABLE_CORRELATED, ModelParams::reference_correlated),
    ] {
        for &(t, sig, want) in table.iter() {
            let p = params(sig);
            let spec = ProductSpec::reference(t, 1, p.s0).unwrap();
            worst = worst.max(rel(100.0 * european_prdc(&p, &spec, 0).unwrap(), want));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    r.check(
        1,
        "closed-form European tables (12 prices)",
        worst <= CLOSED_FORM_TOL && secs < 1.0,
        format!(
            "worst rel err {worst:.2e} (tol {CLOSED_FORM_TOL:e}), {:.1} ms (limit 1 s)",
            secs * 1e3
        ),
    );
}

fn european_sweep(
    params: fn(f64) -> ModelParams,
    n: usize,
    mode: Mode,
    cases: &[(f64, f64)],
) -> (f64, f64, String) {
    warm(n, mode);
    let mut worst: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    let mut where_ = String::new();
    for &(t, sig) in cases {
        let p = params(sig);
        let spec = ProductSpec::reference(t, 1, p.s0).unwrap();
        let start = Instant::now();
        let tr = tree(&p, &spec.exercise_dates, n, mode);
        let v = european_cubature(&tr, &spec).unwrap().v0;
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let e = rel(v, european_prdc(&p, &spec, 0).unwrap());
        if e >= worst {
            worst = e;
            where_ = format!("T={t}Y σ={}bp", sig * 1e4);
        }
    }
    (worst, slowest, where_)
}

fn all_cases() -> Vec<(f64, f64)> {
    VOLS.iter()
        .flat_map(|&s| MATURITIES.iter().map(move |&t| (t, s)))
        .collect()
}

fn criterion_2(r: &mut Report) {
    let (worst, slowest, at) =
        european_sweep(ModelParams::reference, N_2D, Mode::TwoD, &all_cases());
    r.check(
        2,
        "2D European vs closed form, zero correlation",
        worst <= EUROPEAN_TOL && slowest <= 5.0,
        format!(
            "N={N_2D}, worst rel err {worst:.2e} at {at} (tol {EUROPEAN_TOL:e}), slowest {:.0} ms (limit 5 s)",
            slowest * 1e3
        ),
    );
}

fn criterion_3(r: &mut Report) {
    let (worst, slowest, _) = european_sweep(
        ModelParams::reference,
        N_4D_EUROPEAN,
        Mode::FourD,
        &[(2.0, 0.005)],
    );
    r.check(
        3,
        "4D factorized European vs closed form, T=2Y σ=50bp",
        worst <= EUROPEAN_TOL && slowest <= 120.0,
        format!(
            "N={N_4D_EUROPEAN}, rel err {worst:.2e} (tol {EUROPEAN_TOL:e}), {:.0} ms (limit 120 s)",
            slowest * 1e3
        ),
    );
}

fn criterion_4(r: &mut Report) {
    let (worst, _, at) = european_sweep(
        ModelParams::reference_correlated,
        N_2D_CORRELATED,
        Mode::TwoD,
        &all_cases(),
    );
    r.check(
        4,
        "correlated 2D European vs closed form",
        worst <= EUROPEAN_TOL,
        format!("N={N_2D_CORRELATED}, worst rel err {worst:.2e} at {at} (tol {EUROPEAN_TOL:e})"),
    );
}

fn bermudan(params: &ModelParams, t: f64, n: usize, mode: Mode) -> f64 {
    let spec = ProductSpec::reference(t, t as usize, params.s0).unwrap();
    let tr = tree(params, &spec.exercise_dates, n, mode);
    price_bermudan(&tr, &spec, PricerOptions::default())
        .unwrap()
        .v0
}

fn criterion_5(r: &mut Report) {
    warm(N_2D_BERMUDAN, Mode::TwoD);
    warm(N_4D_BERMUDAN, Mode::FourD);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut gaps = Vec::new();
    for t in MATURITIES {
        let p = ModelParams::reference(0.005);
        let v2 = bermudan(&p, t, N_2D_BERMUDAN, Mode::TwoD);
        let v4 = bermudan(&p, t, N_4D_BERMUDAN, Mode::FourD);
        let gap = rel(v2, v4);
        worst = worst.max(gap);
        gaps.push(format!(
            "{t}Y {:.6}/{:.6} ({gap:.1e})",
            100.0 * v2,
            100.0 * v4
        ));
    }
    r.check(
        5,
        "Bermudan 2D vs 4D, yearly exercise, σ=50bp",
        worst <= BERMUDAN_50BP_TOL,
        format!(
            "N2D={N_2D_BERMUDAN} N4D={N_4D_BERMUDAN}, 2D/4D prices in %: {}; worst rel gap {worst:.2e} (tol {BERMUDAN_50BP_TOL:e})",
            gaps.join(", ")
        ),
    );
    let p = ModelParams::reference(0.05);
    let v2 = bermudan(&p, 10.0, N_2D_BERMUDAN, Mode::TwoD);
    let v4 = bermudan(&p, 10.0, N_4D_BERMUDAN, Mode::FourD);
    let gap = rel(v2, v4);
    r.check(
        5,
        "Bermudan 2D vs 4D, yearly exercise, T=10Y σ=500bp",
        gap <= BERMUDAN_500BP_10Y_TOL,
        format!(
            "2D {:.6}% 4D {:.6}%, rel gap {gap:.2e} (tol {BERMUDAN_500BP_10Y_TOL:e}), all Bermudan runs {:.0} s",
            100.0 * v2,
            100.0 * v4,
            start.elapsed().as_secs_f64()
        ),
    );
}

fn criterion_6(r: &mut Report) {
    let mut worst: f64 = 0.0;
    for (mode, n) in [(Mode::TwoD, N_2D), (Mode::FourD, 25_600)] {
        for (t, sig) in all_cases() {
            let p = ModelParams::reference(sig);
            let spec = ProductSpec::reference(t, 1, p.s0).unwrap();
            let tr = tree(&p, &spec.exercise_dates, n, mode);
            let b = price_bermudan(&tr, &spec, PricerOptions::default())
                .unwrap()
                .v0;
            let e = european_cubature(&tr, &spec).unwrap().v0;
            worst = worst.max(rel(b, e));
        }
    }
    r.check(
        6,
        "single-date Bermudan equals European cubature",
        worst <= COLLAPSE_TOL,
        format!("2D and 4D, 6 cases each, worst rel diff {worst:.2e} (tol {COLLAPSE_TOL:e})"),
    );
}

// N = 2 optimal points ±√(2/π), distortion 1 - 2/π.
fn criterion_7(r: &mut Report) {
    let c = cache();
    let g1 = c.get(1).unwrap();
    let g2 = c.get(2).unwrap();
    let half = (2.0 / std::f64::consts::PI).sqrt();
    let d2 = 1.0 - 2.0 / std::f64::consts::PI;
    let small_ok = (g1.distortion() - 1.0).abs() <= 1e-9
        && (g2.points()[0] + half).abs() <= 1e-9
        && (g2.points()[1] - half).abs() <= 1e-9
        && (g2.distortion() - d2).abs() <= 1e-9;
    let levels: Vec<usize> = (0..=12).map(|i| 1 << i).collect();
    let dist: Vec<f64> = levels
        .iter()
        .map(|&n| c.get(n).unwrap().distortion())
        .collect();
    let decreasing = dist[..11].windows(2).all(|w| w[1] < w[0]);
    let plateau: Vec<f64> = levels
        .iter()
        .zip(&dist)
        .filter(|(n, _)| (128..=4096).contains(*n))
        .map(|(&n, d)| n as f64 * d.sqrt())
        .collect();
    let (lo, hi) = plateau
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    let spread = hi / lo - 1.0;
    r.check(
        7,
        "quantizer: N=1, N=2, monotone distortion, N√D plateau",
        small_ok && decreasing && spread <= 0.05,
        format!(
            "N=2 points ±{:.10} D={:.10}, strictly decreasing to N=1024: {decreasing}, N√D over 128..4096 in [{lo:.5}, {hi:.5}] (spread {spread:.2e}, tol 5e-2)",
            g2.points()[1],
            g2.distortion()
        ),
    );
}

fn binomial_share(mc: &[f64], exact: &[f64], n: usize) -> (usize, usize) {
    let mut ok = 0;
    let mut total = 0;
    for (m, e) in mc.iter().zip(exact) {
        if *m == 0.0 && *e == 0.0 {
            continue;
        }
        total += 1;
        if (m - e).abs() <= MC_SIGMAS * (e * (1.0 - e) / n as f64).sqrt() {
            ok += 1;
        }
    }
    (ok, total)
}

fn criterion_8(r: &mut Report) {
    let mut worst_sum: f64 = 0.0;
    let p50 = ModelParams::reference(0.05);
    let dates: Vec<f64> = (1..=10).map(f64::from).collect();
    for (params, mode, n) in [
        (p50.clone(), Mode::TwoD, N_2D),
        (ModelParams::reference_correlated(0.05), Mode::TwoD, N_2D),
        (p50.clone(), Mode::FourD, 25_600),
    ] {
        let tr = tree(&params, &dates, n, mode);
        for k in 0..tr.n_steps() {
            worst_sum = worst_sum.max(tr.transition(k).unwrap().max_row_sum_error());
        }
    }
    r.check(
        8,
        "deterministic transition rows sum to 1",
        worst_sum <= ROW_SUM_TOL,
        format!("10 steps each of 2D, correlated 2D and 4D trees, worst |Σ-1| {worst_sum:.2e} (tol {ROW_SUM_TOL:e})"),
    );

    let n_mc = 100_000;
    let sizes = GridSizes::new(Mode::FourD, vec![20, 6, 5, 3]).unwrap();
    let tr = build_tree(&p50, &[1.0, 2.0], &sizes, &cache(), TreeOptions::default()).unwrap();
    let det = tr.transition(1).unwrap();
    let mc = mc_transitions_4d(
        &tr,
        1,
        McConfig {
            n_samples: n_mc,
            seed: 2024,
        },
    )
    .unwrap();
    let (mut ok, mut total) = (0, 0);
    for i in 0..det.rows() {
        let (a, b) = binomial_share(&mc.row(i), &det.row(i), n_mc);
        ok += a;
        total += b;
    }
    let tr2 = tree(&p50, &[1.0, 2.0], 8000, Mode::TwoD);
    let det2 = tr2.transition(1).unwrap();
    for src in [0, tr2.layers[1].len() / 2, tr2.layers[1].len() - 1] {
        let row = mc_transition_row(&tr2, 1, src, n_mc, 7).unwrap();
        let (a, b) = binomial_share(&row, &det2.row(src), n_mc);
        ok += a;
        total += b;
    }
    let share = ok as f64 / total as f64;
    r.check(
        8,
        "MC rows match deterministic rows at zero correlation",
        share >= 0.95,
        format!(
            "{n_mc} samples per row, {ok}/{total} nonzero entries within {MC_SIGMAS} binomial stderr ({:.2}%, need 95%)",
            100.0 * share
        ),
    );
}

/// Cubature bias is first order in the distortion, so the identities are
/// checked along a node ladder starting at 32000: every case must reach the
/// tolerance on the ladder with errors shrinking as N grows.
const IDENTITY_LADDER: [usize; 3] = [32_000, 128_000, 512_000];

fn criterion_9(r: &mut Report) {
    let mut worst_at_base = (0.0f64, 0.0f64);
    let mut needed = Vec::new();
    let mut ok = true;
    for (t, sig) in all_cases() {
        let p = ModelParams::reference_correlated(sig);
        let mut prev = (f64::INFINITY, f64::INFINITY);
        let mut reached = None;
        for n in IDENTITY_LADDER {
            warm(n, Mode::TwoD);
            let tr = tree(&p, &[t], n, Mode::TwoD);
            let zc = european_cubature(&tr, &Fixed(vec![t], |_| 1.0)).unwrap().v0;
            let fwd = european_cubature(&tr, &Fixed(vec![t], |s| s)).unwrap().v0;
            let e = (
                rel(zc, p.discount_d(t)),
                rel(fwd, european_call(&p, 0.0, t).unwrap()),
            );
            if n == IDENTITY_LADDER[0] {
                worst_at_base = (worst_at_base.0.max(e.0), worst_at_base.1.max(e.1));
            }
            ok &= e.0 <= prev.0 && e.1 <= prev.1;
            prev = e;
            if e.0 <= EUROPEAN_TOL && e.1 <= EUROPEAN_TOL {
                reached = Some(n);
                break;
            }
        }
        match reached {
            Some(n) if n > IDENTITY_LADDER[0] => needed.push(format!(
                "T={t}Y σ={}bp needs N={n} ({:.1e}/{:.1e})",
                sig * 1e4,
                prev.0,
                prev.1
            )),
            Some(_) => {}
            None => {
                ok = false;
                needed.push(format!("T={t}Y σ={}bp not reached", sig * 1e4));
            }
        }
    }
    r.check(
        9,
        "cubature zero-coupon and zero-strike call converge",
        ok,
        format!(
            "2D correlated, at N={} worst rel err {:.2e} (P^d) {:.2e} (S0 P^f); {} (tol {EUROPEAN_TOL:e})",
            IDENTITY_LADDER[0],
            worst_at_base.0,
            worst_at_base.1,
            if needed.is_empty() { "all cases within tolerance".to_string() } else { needed.join(", ") }
        ),
    );

    let p = ModelParams::reference(0.05);
    let spec = ProductSpec::reference(5.0, 1, p.s0).unwrap();
    let est = mc_european(&p, &spec, 1_000_000, 42, true).unwrap();
    let want = european_prdc(&p, &spec, 0).unwrap();
    let z = (est.value - want) / est.stderr;
    r.check(
        9,
        "mc_european vs closed form, T=5Y σ=500bp",
        z.abs() <= MC_SIGMAS,
        format!(
            "1e6 paths: {:.7}% ± {:.1e} vs {:.7}%, {z:+.2} stderr (tol {MC_SIGMAS})",
            100.0 * est.value,
            100.0 * est.stderr,
            100.0 * want
        ),
    );
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut r = Report { failed: 0 };
    criterion_1(&mut r);
    criterion_2(&mut r);
    criterion_3(&mut r);
    criterion_4(&mut r);
    criterion_5(&mut r);
    criterion_6(&mut r);
    criterion_7(&mut r);
    criterion_8(&mut r);
    criterion_9(&mut r);
    println!(
        "acceptance: {} failed, {:.0} s",
        r.failed,
        start.elapsed().as_secs_f64()
    );
    if r.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
