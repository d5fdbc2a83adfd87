//! Quantization trees: per-date product quantizers of the state and the
//! transition probabilities between consecutive dates.
//!
//! Two trees are supported. `TwoD` quantizes `(X, Y)` only and treats the
//! one-step innovations as independent of the current node, which is the
//! non-Markovian approximation. `FourD` quantizes the Markov state
//! `(X, W^f, Y, W^d)`.
//!
//! Every deterministic transition is a "Gaussian shift" kernel: from a source
//! node `(a, b)` the next pair is `(a + α b + Z_A, b + Z_B)` for a centred
//! Gaussian pair `Z`, and `π[i][j]` is the mass of target cell `j`. Such
//! kernels are cheap to evaluate row by row, so large steps are never stored
//! densely; they are recomputed when applied. Large correlated kernels use a
//! truncated Mehler expansion of the bivariate normal density, which turns
//! them into a short sum of separable terms.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{
    bivar_cdf, norm_cdf, norm_interval_mass, norm_inv_cdf, norm_pdf, Correlation,
};
use crate::model::{
    drift_state, increment_cov, state_cov, substream, IncrementSampler, ModelParams, WD, WF, X, Y,
};
use crate::quantizer::{rescale, Grid1D, GridCache};
use crate::sum::{lane_dot, pairwise_dot};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    TwoD,
    FourD,
}

impl Mode {
    /// State coordinates quantized by this mode, in layer order.
    pub fn state_dims(self) -> &'static [usize] {
        match self {
            Mode::TwoD => &[X, Y],
            Mode::FourD => &[X, WF, Y, WD],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::TwoD => "2d",
            Mode::FourD => "4d",
        }
    }
}

/// Per-dimension grid levels, `[N^X, N^Y]` or `[N^X, N^{W^f}, N^Y, N^{W^d}]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridSizes {
    pub mode: Mode,
    pub levels: Vec<usize>,
}

impl GridSizes {
    pub fn new(mode: Mode, levels: Vec<usize>) -> Result<Self> {
        if levels.len() != mode.state_dims().len() {
            return Err(Error::Dimension(format!(
                "{} tree needs {} levels, got {}",
                mode.label(),
                mode.state_dims().len(),
                levels.len()
            )));
        }
        if levels.contains(&0) {
            return Err(Error::InvalidParameter("grid levels must be >= 1".into()));
        }
        Ok(Self { mode, levels })
    }

    pub fn total(&self) -> usize {
        self.levels.iter().product()
    }
}

fn round_level(x: f64) -> usize {
    (x.round() as usize).max(1)
}

/// Splits a node budget across dimensions: `N^X ≈ 10 N^Y` in 2D; in 4D
/// additionally `N^X ≈ 4 N^{W^f}` and `N^Y ≈ 4 N^{W^d}`.
pub fn allocate_sizes(n_total: usize, mode: Mode) -> Result<GridSizes> {
    if n_total == 0 {
        return Err(Error::InvalidParameter("N_total must be >= 1".into()));
    }
    let n = n_total as f64;
    let levels = match mode {
        Mode::TwoD => {
            let ny = round_level((n / 10.0).sqrt());
            vec![round_level(n / ny as f64), ny]
        }
        Mode::FourD => {
            // N = 40m · 10m · 4m · m
            let m = (n / 1600.0).powf(0.25);
            let nwd = round_level(m);
            let ny = round_level(4.0 * m);
            let nwf = round_level(10.0 * m);
            let nx = round_level(n / (nwf * ny * nwd) as f64);
            vec![nx, nwf, ny, nwd]
        }
    };
    GridSizes::new(mode, levels)
}

/// Product quantizer of the state at one date.
#[derive(Clone, Debug)]
pub struct DateLayer {
    pub t: f64,
    /// One rescaled grid per dimension, in `Mode::state_dims` order.
    pub grids: Vec<Grid1D>,
    bounds: Vec<Vec<f64>>,
    strides: Vec<usize>,
}

impl DateLayer {
    fn new(t: f64, grids: Vec<Grid1D>) -> Self {
        let bounds = grids.iter().map(Grid1D::boundaries).collect();
        let mut strides = vec![1; grids.len()];
        for d in (0..grids.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * grids[d + 1].level();
        }
        Self {
            t,
            grids,
            bounds,
            strides,
        }
    }

    pub fn len(&self) -> usize {
        self.grids.iter().map(Grid1D::level).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        self.grids.iter().map(Grid1D::level).collect()
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        self.strides
            .iter()
            .zip(&self.grids)
            .map(|(s, g)| (node / s) % g.level())
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Node coordinates as a full state `(x, w^f, y, w^d)`; coordinates not
    /// carried by the tree are 0.
    pub fn state(&self, mode: Mode, node: usize) -> [f64; 4] {
        let mut s = [0.0; 4];
        for ((d, &dim), g) in self
            .multi_index(node)
            .iter()
            .zip(mode.state_dims())
            .zip(&self.grids)
        {
            s[dim] = g.points()[*d];
        }
        s
    }

    /// Product of the marginal cell weights.
    pub fn product_weight(&self, node: usize) -> f64 {
        self.multi_index(node)
            .iter()
            .zip(&self.grids)
            .map(|(i, g)| g.weights()[*i])
            .product()
    }

    /// Cell containing a state, by nearest neighbour in each dimension.
    pub fn locate(&self, mode: Mode, state: &[f64; 4]) -> usize {
        mode.state_dims()
            .iter()
            .zip(&self.grids)
            .zip(&self.strides)
            .map(|((&dim, g), s)| g.locate(state[dim]) * s)
            .sum()
    }

    pub fn bounds(&self, d: usize) -> &[f64] {
        &self.bounds[d]
    }
}

/// Sampling budget for Monte-Carlo transition estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct McConfig {
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TreeOptions {
    /// Average the transition over the source Voronoi cell instead of
    /// conditioning on the cell's point (3×3 Gauss-Legendre).
    pub cell_averaged: bool,
    /// Required for 4D trees unless `(X, W^f)` and `(Y, W^d)` are
    /// independent.
    pub mc: Option<McConfig>,
}

#[derive(Clone, Debug)]
pub struct QuantTree {
    pub mode: Mode,
    pub params: ModelParams,
    pub sizes: GridSizes,
    /// `t_0 = 0` followed by the tree dates.
    pub dates: Vec<f64>,
    pub layers: Vec<DateLayer>,
    pub options: TreeOptions,
}

/// Grids of all dates `0, t_1, …, t_n`; dimensions with zero variance
/// (every dimension at `t_0`) collapse to the single point 0.
pub fn build_tree(
    params: &ModelParams,
    dates: &[f64],
    sizes: &GridSizes,
    cache: &GridCache,
    options: TreeOptions,
) -> Result<QuantTree> {
    params.validate()?;
    if dates.is_empty() || !(dates[0] > 0.0) || dates.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidParameter(
            "tree dates must be positive and strictly increasing".into(),
        ));
    }
    if sizes.mode == Mode::FourD && !params.rates_decoupled() && options.mc.is_none() {
        return Err(Error::McRequired);
    }
    let mut all_dates = vec![0.0];
    all_dates.extend_from_slice(dates);
    let mut layers = Vec::with_capacity(all_dates.len());
    for &t in &all_dates {
        let cov = state_cov(params, t)?.0;
        let mut grids = Vec::new();
        for (&dim, &level) in sizes.mode.state_dims().iter().zip(&sizes.levels) {
            let var = cov[(dim, dim)];
            grids.push(if var > 0.0 {
                rescale(cache.get(level)?.as_ref(), 0.0, var.sqrt())?
            } else {
                Grid1D::point_mass(0.0)
            });
        }
        layers.push(DateLayer::new(t, grids));
    }
    Ok(QuantTree {
        mode: sizes.mode,
        params: params.clone(),
        sizes: sizes.clone(),
        dates: all_dates,
        layers,
        options,
    })
}

impl QuantTree {
    pub fn n_steps(&self) -> usize {
        self.layers.len() - 1
    }

    /// Transition of step `k` (layer `k` to `k + 1`) under the tree options.
    pub fn transition(&self, k: usize) -> Result<Transition> {
        match self.mode {
            Mode::TwoD => transitions_2d(self, k),
            Mode::FourD => transitions_4d(self, k, self.options.mc),
        }
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.n_steps() {
            return Err(Error::MissingTransition(k));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Deterministic2D,
    DeterministicFactorized4D,
    MonteCarlo4D { n_samples: usize, seed: u64 },
}

/// Below this many entries a kernel is tabulated once; above it, rows are
/// recomputed on each use.
const DENSE_LIMIT: usize = 1 << 22;

/// Standardized bounds beyond this are treated as infinite when filling
/// bivariate corner grids (the neglected mass is below 1e-23).
const TAIL_CUT: f64 = 10.0;

/// Cell-averaging nodes of one source dimension: per cell, up to three
/// `(point, probability weight)` pairs.
#[derive(Clone, Debug)]
struct AverageNodes {
    nodes: Vec<Vec<(f64, f64)>>,
}

const GL3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

impl AverageNodes {
    fn point_nodes(points: &[f64]) -> Self {
        Self {
            nodes: points.iter().map(|&p| vec![(p, 1.0)]).collect(),
        }
    }

    /// Gauss-Legendre nodes in probability space of each cell of `grid`;
    /// upper-half cells use the mirrored tail so tiny masses stay accurate.
    fn new(grid: &Grid1D) -> Result<Self> {
        let sd = grid.stdev();
        if sd == 0.0 {
            return Ok(Self::point_nodes(grid.points()));
        }
        let b = grid.boundaries();
        let mut nodes = Vec::with_capacity(grid.level());
        for (i, &p) in grid.points().iter().enumerate() {
            let (lo, hi) = (b[i] / sd, b[i + 1] / sd);
            let (sign, u0, u1) = if p > 0.0 {
                (-1.0, norm_cdf(-hi), norm_cdf(-lo))
            } else {
                (1.0, norm_cdf(lo), norm_cdf(hi))
            };
            let (mid, half) = (0.5 * (u0 + u1), 0.5 * (u1 - u0));
            let mut cell = Vec::with_capacity(3);
            for (xi, w) in GL3 {
                let z = norm_inv_cdf(mid + half * xi)?;
                cell.push((sign * z * sd, half * w));
            }
            nodes.push(cell);
        }
        Ok(Self { nodes })
    }
}

/// Cell-average data of a source pair: nodes per dimension and the Gaussian
/// copula linking them.
#[derive(Clone, Debug)]
struct CellAverage {
    a: AverageNodes,
    b: AverageNodes,
    sd_a: f64,
    sd_b: f64,
    rho: f64,
}

impl CellAverage {
    /// Copula density of the source pair at standardized coordinates.
    fn copula(&self, x: f64, y: f64) -> f64 {
        if self.rho == 0.0 || self.sd_a == 0.0 || self.sd_b == 0.0 || self.rho.abs() >= 1.0 {
            return 1.0;
        }
        let (u, v, r) = (x / self.sd_a, y / self.sd_b, self.rho);
        let one_m = 1.0 - r * r;
        (-(r * r * (u * u + v * v) - 2.0 * r * u * v) / (2.0 * one_m)).exp() / one_m.sqrt()
    }
}

/// Gaussian shift kernel on a product of two target grids.
#[derive(Clone, Debug)]
pub struct PairKernel {
    src_a: Vec<f64>,
    src_b: Vec<f64>,
    tgt_a: Vec<f64>,
    tgt_b: Vec<f64>,
    alpha: f64,
    sig_a: f64,
    sig_b: f64,
    rho: f64,
    average: Option<CellAverage>,
}

#[derive(Default)]
struct Scratch {
    mass_a: Vec<f64>,
    mass_b: Vec<f64>,
    za: Vec<f64>,
    zb: Vec<f64>,
    corners: Vec<f64>,
    point_row: Vec<f64>,
}

fn interval_masses(bounds: &[f64], mean: f64, sd: f64, out: &mut Vec<f64>) {
    let n = bounds.len() - 1;
    out.clear();
    if sd == 0.0 {
        out.resize(n, 0.0);
        // ties go to the upper cell, as in Grid1D::locate
        let cell = bounds[1..n].partition_point(|&b| b <= mean);
        out[cell] = 1.0;
        return;
    }
    out.extend(
        bounds
            .windows(2)
            .map(|w| norm_interval_mass((w[0] - mean) / sd, (w[1] - mean) / sd)),
    );
}

fn standardize(bounds: &[f64], mean: f64, sd: f64, out: &mut Vec<f64>) {
    out.clear();
    out.extend(bounds.iter().map(|&b| {
        let z = (b - mean) / sd;
        if z > TAIL_CUT {
            f64::INFINITY
        } else if z < -TAIL_CUT {
            f64::NEG_INFINITY
        } else {
            z
        }
    }));
}

impl PairKernel {
    pub fn rows(&self) -> usize {
        self.src_a.len() * self.src_b.len()
    }

    pub fn cols(&self) -> usize {
        (self.tgt_a.len() - 1) * (self.tgt_b.len() - 1)
    }

    fn point_row(&self, a: f64, b: f64, out: &mut [f64], s: &mut Scratch) {
        let ma = a + self.alpha * b;
        let mb = b;
        let nb = self.tgt_b.len() - 1;
        if self.rho == 0.0 || self.sig_a == 0.0 || self.sig_b == 0.0 {
            interval_masses(&self.tgt_a, ma, self.sig_a, &mut s.mass_a);
            interval_masses(&self.tgt_b, mb, self.sig_b, &mut s.mass_b);
            for (p, &pa) in s.mass_a.iter().enumerate() {
                let row = &mut out[p * nb..(p + 1) * nb];
                for (o, &pb) in row.iter_mut().zip(&s.mass_b) {
                    *o = pa * pb;
                }
            }
            return;
        }
        let rho = Correlation::new(self.rho).expect("kernel correlation validated at build");
        standardize(&self.tgt_a, ma, self.sig_a, &mut s.za);
        standardize(&self.tgt_b, mb, self.sig_b, &mut s.zb);
        let w = nb + 1;
        s.corners.clear();
        s.corners.resize(s.za.len() * w, 0.0);
        for (p, &u) in s.za.iter().enumerate() {
            for (q, &v) in s.zb.iter().enumerate() {
                s.corners[p * w + q] = bivar_cdf(u, v, rho);
            }
        }
        let c = &s.corners;
        for p in 0..s.za.len() - 1 {
            for q in 0..nb {
                let m =
                    c[(p + 1) * w + q + 1] - c[p * w + q + 1] - c[(p + 1) * w + q] + c[p * w + q];
                out[p * nb + q] = m.max(0.0);
            }
        }
    }

    fn row_into(&self, i: usize, out: &mut [f64], s: &mut Scratch) {
        let nsb = self.src_b.len();
        let (ia, ib) = (i / nsb, i % nsb);
        match &self.average {
            None => self.point_row(self.src_a[ia], self.src_b[ib], out, s),
            Some(avg) => {
                let mut pts = Vec::with_capacity(9);
                let mut total = 0.0;
                for &(a, wa) in &avg.a.nodes[ia] {
                    for &(b, wb) in &avg.b.nodes[ib] {
                        let w = wa * wb * avg.copula(a, b);
                        total += w;
                        pts.push((a, b, w));
                    }
                }
                out.iter_mut().for_each(|o| *o = 0.0);
                let mut buf = std::mem::take(&mut s.point_row);
                buf.resize(out.len(), 0.0);
                for (a, b, w) in pts {
                    self.point_row(a, b, &mut buf, s);
                    let w = w / total;
                    for (o, &x) in out.iter_mut().zip(&buf) {
                        *o += w * x;
                    }
                }
                s.point_row = buf;
            }
        }
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cols()];
        self.row_into(i, &mut out, &mut Scratch::default());
        out
    }

    fn tabulate(&self) -> Vec<f64> {
        let cols = self.cols();
        let mut data = vec![0.0; self.rows() * cols];
        data.par_chunks_mut(cols)
            .enumerate()
            .for_each_init(Scratch::default, |s, (i, out)| self.row_into(i, out, s));
        data
    }
}

/// Largest `|ρ|` for which kernels are expanded; beyond it the series needs
/// hundreds of terms and exact corner grids are used instead.
const MEHLER_MAX_RHO: f64 = 0.9;

/// Bound on the neglected tail of the expansion, per entry.
const MEHLER_TOL: f64 = 1e-17;

/// Number of expansion terms (including the product term) for correlation
/// `rho`. With `H_m = He_m φ / √m!` one has `|H_m| ≤ 1`, so term `n` is at
/// most `4 |ρ|ⁿ / n`.
fn mehler_terms(rho: f64) -> usize {
    let r = rho.abs();
    if r == 0.0 {
        return 1;
    }
    let mut n = 1;
    while 4.0 * r.powi(n as i32 + 1) / ((n + 1) as f64 * (1.0 - r)) > MEHLER_TOL {
        n += 1;
    }
    n + 1
}

/// Per-interval factors of the expansion along one dimension, term-major:
/// `out[n * cells + j]`. Term 0 is the interval mass; term `n ≥ 1` is
/// `H_{n-1}(u_j) - H_{n-1}(u_{j+1})` at the standardized bounds.
fn expansion_factors(
    bounds: &[f64],
    mean: f64,
    sd: f64,
    terms: usize,
    out: &mut Vec<f64>,
    h: &mut Vec<f64>,
) {
    let nb = bounds.len();
    let cells = nb - 1;
    out.clear();
    out.resize(terms * cells, 0.0);
    let u: Vec<f64> = bounds.iter().map(|&b| (b - mean) / sd).collect();
    for j in 0..cells {
        out[j] = norm_interval_mass(u[j], u[j + 1]);
    }
    if terms == 1 {
        return;
    }
    // h[m * nb + j] = H_m(u_j)
    h.clear();
    h.resize((terms - 1) * nb, 0.0);
    for (j, &x) in u.iter().enumerate() {
        let mut prev = 0.0;
        let mut cur = norm_pdf(x);
        if cur == 0.0 {
            continue;
        }
        h[j] = cur;
        for m in 1..terms - 1 {
            let next = (x * cur - (m as f64 - 1.0).sqrt() * prev) / (m as f64).sqrt();
            prev = cur;
            cur = next;
            h[m * nb + j] = cur;
        }
    }
    for n in 1..terms {
        let hm = &h[(n - 1) * nb..n * nb];
        for j in 0..cells {
            out[n * cells + j] = hm[j] - hm[j + 1];
        }
    }
}

/// Separable form of a correlated pair kernel:
/// `π[(ia, ib)][(ja, jb)] = Σ_n c_n A_n[ja] B_n[jb]`, with `c_0 = 1`,
/// `c_n = ρⁿ / n`, `A_n` evaluated at the shifted mean `a + α b` of the row
/// and `B_n` at `b`.
#[derive(Clone, Debug)]
struct Expansion {
    kernel: PairKernel,
    coef: Vec<f64>,
    /// `[ib][n][jb]`
    b_terms: Vec<f64>,
}

#[derive(Default)]
struct ExpansionScratch {
    a: Vec<f64>,
    h: Vec<f64>,
}

impl Expansion {
    fn new(kernel: &PairKernel) -> Option<Self> {
        let k = kernel;
        if k.average.is_some() || k.sig_a == 0.0 || k.sig_b == 0.0 || k.rho.abs() > MEHLER_MAX_RHO {
            return None;
        }
        let terms = mehler_terms(k.rho);
        let coef = (0..terms)
            .map(|n| {
                if n == 0 {
                    1.0
                } else {
                    k.rho.powi(n as i32) / n as f64
                }
            })
            .collect();
        let nb = k.tgt_b.len() - 1;
        let mut b_terms = Vec::with_capacity(k.src_b.len() * terms * nb);
        let (mut buf, mut h) = (Vec::new(), Vec::new());
        for &b in &k.src_b {
            expansion_factors(&k.tgt_b, b, k.sig_b, terms, &mut buf, &mut h);
            b_terms.extend_from_slice(&buf);
        }
        Some(Self {
            kernel: kernel.clone(),
            coef,
            b_terms,
        })
    }

    fn terms(&self) -> usize {
        self.coef.len()
    }

    /// Row factors `c_n A_n[ja]` of source `(ia, ib)` into `s.a`, term-major.
    fn weighted_a(&self, ia: usize, ib: usize, s: &mut ExpansionScratch) {
        let k = &self.kernel;
        let na = k.tgt_a.len() - 1;
        let mean = k.src_a[ia] + k.alpha * k.src_b[ib];
        expansion_factors(&k.tgt_a, mean, k.sig_a, self.terms(), &mut s.a, &mut s.h);
        for (n, c) in self.coef.iter().enumerate().skip(1) {
            s.a[n * na..(n + 1) * na].iter_mut().for_each(|x| *x *= c);
        }
    }

    fn row_into(&self, i: usize, out: &mut [f64], s: &mut ExpansionScratch) {
        let k = &self.kernel;
        let nsb = k.src_b.len();
        let (ia, ib) = (i / nsb, i % nsb);
        let (na, nb, nt) = (k.tgt_a.len() - 1, k.tgt_b.len() - 1, self.terms());
        self.weighted_a(ia, ib, s);
        out.iter_mut().for_each(|o| *o = 0.0);
        for n in 0..nt {
            let bn = &self.b_terms[(ib * nt + n) * nb..][..nb];
            for ja in 0..na {
                let f = s.a[n * na + ja];
                if f != 0.0 {
                    for (o, &b) in out[ja * nb..(ja + 1) * nb].iter_mut().zip(bn) {
                        *o += f * b;
                    }
                }
            }
        }
    }

    /// `out = π w` for a `cols × m` block `w`, row-major.
    fn apply_block(&self, w: &[f64], m: usize, out: &mut [f64]) {
        let k = &self.kernel;
        let (na, nb, nt, nsb) = (
            k.tgt_a.len() - 1,
            k.tgt_b.len() - 1,
            self.terms(),
            k.src_b.len(),
        );
        let span = nt * na * m;
        // t[ib][n][ja][c] = Σ_jb B_n(ib)[jb] w[(ja, jb)][c]
        let mut t = vec![0.0; nsb * span];
        t.par_chunks_mut(span).enumerate().for_each(|(ib, tb)| {
            for n in 0..nt {
                let bn = &self.b_terms[(ib * nt + n) * nb..][..nb];
                for ja in 0..na {
                    if m == 1 {
                        tb[n * na + ja] = lane_dot(bn, &w[ja * nb..(ja + 1) * nb]);
                        continue;
                    }
                    let dst = &mut tb[(n * na + ja) * m..][..m];
                    for (jb, &b) in bn.iter().enumerate() {
                        if b != 0.0 {
                            for (d, &x) in dst.iter_mut().zip(&w[(ja * nb + jb) * m..][..m]) {
                                *d += b * x;
                            }
                        }
                    }
                }
            }
        });
        let shared_a = k.alpha == 0.0;
        out.par_chunks_mut(nsb * m).enumerate().for_each_init(
            ExpansionScratch::default,
            |s, (ia, block)| {
                for (ib, o) in block.chunks_mut(m).enumerate() {
                    if ib == 0 || !shared_a {
                        self.weighted_a(ia, ib, s);
                    }
                    let tb = &t[ib * span..(ib + 1) * span];
                    if m == 1 {
                        o[0] = lane_dot(&s.a, tb);
                        continue;
                    }
                    o.iter_mut().for_each(|x| *x = 0.0);
                    for (q, &f) in s.a.iter().enumerate() {
                        if f != 0.0 {
                            for (x, &y) in o.iter_mut().zip(&tb[q * m..(q + 1) * m]) {
                                *x += f * y;
                            }
                        }
                    }
                }
            },
        );
    }
}

/// A kernel either tabulated or evaluated on demand.
#[derive(Clone, Debug)]
enum Factor {
    Dense {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    },
    Lazy(PairKernel),
    Expanded(Expansion),
}

impl Factor {
    fn new(kernel: PairKernel) -> Self {
        if kernel.rows() * kernel.cols() <= DENSE_LIMIT {
            Factor::Dense {
                rows: kernel.rows(),
                cols: kernel.cols(),
                data: kernel.tabulate(),
            }
        } else if let Some(e) = Expansion::new(&kernel) {
            Factor::Expanded(e)
        } else {
            Factor::Lazy(kernel)
        }
    }

    fn dense(kernel: &PairKernel) -> Self {
        Factor::Dense {
            rows: kernel.rows(),
            cols: kernel.cols(),
            data: kernel.tabulate(),
        }
    }

    fn rows(&self) -> usize {
        match self {
            Factor::Dense { rows, .. } => *rows,
            Factor::Lazy(k) => k.rows(),
            Factor::Expanded(e) => e.kernel.rows(),
        }
    }

    fn cols(&self) -> usize {
        match self {
            Factor::Dense { cols, .. } => *cols,
            Factor::Lazy(k) => k.cols(),
            Factor::Expanded(e) => e.kernel.cols(),
        }
    }

    fn with_row<R>(
        &self,
        i: usize,
        buf: &mut Vec<f64>,
        s: &mut Scratch,
        f: impl FnOnce(&[f64]) -> R,
    ) -> R {
        match self {
            Factor::Dense { cols, data, .. } => f(&data[i * cols..(i + 1) * cols]),
            Factor::Lazy(k) => {
                buf.resize(k.cols(), 0.0);
                k.row_into(i, buf, s);
                f(buf)
            }
            Factor::Expanded(e) => {
                buf.resize(e.kernel.cols(), 0.0);
                e.row_into(i, buf, &mut ExpansionScratch::default());
                f(buf)
            }
        }
    }

    fn is_lazy(&self) -> bool {
        !matches!(self, Factor::Dense { .. })
    }

    /// `out = F w` for a `cols × m` block `w`, row-major. Single columns are
    /// reduced pairwise per row.
    fn apply_block(&self, w: &[f64], m: usize, out: &mut [f64]) {
        if let Factor::Expanded(e) = self {
            return e.apply_block(w, m, out);
        }
        out.par_chunks_mut(m).enumerate().for_each_init(
            || (Vec::new(), Scratch::default()),
            |(buf, s), (i, acc)| {
                self.with_row(i, buf, s, |row| {
                    if m == 1 {
                        acc[0] = pairwise_dot(row, w);
                        return;
                    }
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for (p, &lp) in row.iter().enumerate() {
                        if lp != 0.0 {
                            for (a, &x) in acc.iter_mut().zip(&w[p * m..(p + 1) * m]) {
                                *a += lp * x;
                            }
                        }
                    }
                })
            },
        );
    }
}

/// Sparse row-stochastic matrix from counted Monte-Carlo arrivals.
#[derive(Clone, Debug)]
struct Csr {
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Op {
    Single(Factor),
    /// `π[(l, r)][(l', r')] = L[l][l'] · R[r][r']`
    Kron(Factor, Factor),
    Sparse(Csr),
}

/// Transition probabilities from layer `step` to layer `step + 1`.
#[derive(Clone, Debug)]
pub struct Transition {
    pub step: usize,
    pub provenance: Provenance,
    op: Op,
}

impl Transition {
    pub fn rows(&self) -> usize {
        match &self.op {
            Op::Single(f) => f.rows(),
            Op::Kron(l, r) => l.rows() * r.rows(),
            Op::Sparse(c) => c.indptr.len() - 1,
        }
    }

    pub fn cols(&self) -> usize {
        match &self.op {
            Op::Single(f) => f.cols(),
            Op::Kron(l, r) => l.cols() * r.cols(),
            Op::Sparse(c) => c.cols,
        }
    }

    /// True when some rows are recomputed on every use.
    pub fn is_lazy(&self) -> bool {
        match &self.op {
            Op::Single(f) => f.is_lazy(),
            Op::Kron(l, r) => l.is_lazy() || r.is_lazy(),
            Op::Sparse(_) => false,
        }
    }

    pub fn is_kronecker(&self) -> bool {
        matches!(self.op, Op::Kron(..))
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        let mut s = Scratch::default();
        let mut buf = Vec::new();
        match &self.op {
            Op::Single(f) => f.with_row(i, &mut buf, &mut s, |r| r.to_vec()),
            Op::Kron(l, r) => {
                let (il, ir) = (i / r.rows(), i % r.rows());
                let right =
                    r.with_row(ir, &mut Vec::new(), &mut Scratch::default(), |x| x.to_vec());
                l.with_row(il, &mut buf, &mut s, |left| {
                    let mut out = Vec::with_capacity(left.len() * right.len());
                    for &a in left {
                        out.extend(right.iter().map(|&b| a * b));
                    }
                    out
                })
            }
            Op::Sparse(c) => {
                let mut out = vec![0.0; c.cols];
                for n in c.indptr[i]..c.indptr[i + 1] {
                    out[c.indices[n] as usize] = c.values[n];
                }
                out
            }
        }
    }

    /// Nonzero entries of row `i` as `(column, probability)`.
    pub fn row_entries(&self, i: usize) -> Vec<(usize, f64)> {
        match &self.op {
            Op::Sparse(c) => (c.indptr[i]..c.indptr[i + 1])
                .map(|n| (c.indices[n] as usize, c.values[n]))
                .collect(),
            _ => self
                .row(i)
                .into_iter()
                .enumerate()
                .filter(|(_, p)| *p != 0.0)
                .collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        (0..self.rows()).flat_map(|i| self.row(i)).collect()
    }

    /// `(π v)[i] = Σ_j π[i][j] v[j]`, each row reduced in a fixed order.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols() {
            return Err(Error::Dimension(format!(
                "step {} maps onto {} nodes, got a vector of {}",
                self.step,
                self.cols(),
                v.len()
            )));
        }
        let mut out = vec![0.0; self.rows()];
        match &self.op {
            Op::Single(f) => f.apply_block(v, 1, &mut out),
            Op::Kron(l, r) => {
                let (nr, nrc) = (r.rows(), r.cols());
                let right: Vec<Vec<f64>> = (0..nr)
                    .map(|i| {
                        r.with_row(i, &mut Vec::new(), &mut Scratch::default(), |x| x.to_vec())
                    })
                    .collect();
                // w[p][r] = Σ_q v[p][q] R[r][q]
                let mut w = vec![0.0; l.cols() * nr];
                w.par_chunks_mut(nr).enumerate().for_each(|(p, wp)| {
                    let vp = &v[p * nrc..(p + 1) * nrc];
                    for (x, rr) in wp.iter_mut().zip(&right) {
                        *x = pairwise_dot(vp, rr);
                    }
                });
                l.apply_block(&w, nr, &mut out);
            }
            Op::Sparse(c) => {
                out.par_iter_mut().enumerate().for_each(|(i, o)| {
                    *o = (c.indptr[i]..c.indptr[i + 1])
                        .map(|n| c.values[n] * v[c.indices[n] as usize])
                        .sum();
                });
            }
        }
        Ok(out)
    }

    /// Largest `|Σ_j π[i][j] - 1|` over rows.
    pub fn max_row_sum_error(&self) -> f64 {
        let ones = vec![1.0; self.cols()];
        self.apply(&ones)
            .expect("dimensions match by construction")
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Tabulates every lazily evaluated factor.
    pub fn materialize(self) -> Self {
        let fix = |f: Factor| match f {
            Factor::Lazy(k) => Factor::dense(&k),
            Factor::Expanded(e) => Factor::dense(&e.kernel),
            d => d,
        };
        let op = match self.op {
            Op::Single(f) => Op::Single(fix(f)),
            Op::Kron(l, r) => Op::Kron(fix(l), fix(r)),
            s => s,
        };
        Self { op, ..self }
    }
}

/// Law of the 2D innovation `(Z¹, Z²) = (σ_f δ W^f_k + G¹, -σ_d δ W^d_k + G³)`
/// as `(sd₁, sd₂, covariance)`.
pub fn innovation_law_2d(params: &ModelParams, t_k: f64, t_k1: f64) -> Result<(f64, f64, f64)> {
    let s = state_cov(params, t_k)?.0;
    let inc = increment_cov(params, t_k, t_k1)?;
    let (cf, cd) = (params.sigma_f * inc.delta, -params.sigma_d * inc.delta);
    let v1 = cf * cf * s[(WF, WF)] + inc.cov[(X, X)];
    let v2 = cd * cd * s[(WD, WD)] + inc.cov[(Y, Y)];
    let c12 = cf * cd * s[(WF, WD)] + inc.cov[(X, Y)];
    Ok((v1.max(0.0).sqrt(), v2.max(0.0).sqrt(), c12))
}

fn correlation_of(sa: f64, sb: f64, c: f64) -> f64 {
    if sa == 0.0 || sb == 0.0 || c == 0.0 {
        0.0
    } else {
        (c / (sa * sb)).clamp(-1.0, 1.0)
    }
}

fn single_dim_kernel(
    src: &Grid1D,
    tgt_bounds: &[f64],
    sig: f64,
    averaged: bool,
) -> Result<PairKernel> {
    let average = if averaged {
        Some(CellAverage {
            a: AverageNodes::new(src)?,
            b: AverageNodes::point_nodes(&[0.0]),
            sd_a: src.stdev(),
            sd_b: 0.0,
            rho: 0.0,
        })
    } else {
        None
    };
    Ok(PairKernel {
        src_a: src.points().to_vec(),
        src_b: vec![0.0],
        tgt_a: tgt_bounds.to_vec(),
        tgt_b: vec![f64::NEG_INFINITY, f64::INFINITY],
        alpha: 0.0,
        sig_a: sig,
        sig_b: 0.0,
        rho: 0.0,
        average,
    })
}

#[allow(clippy::too_many_arguments)]
fn pair_kernel(
    src_a: &Grid1D,
    src_b: &Grid1D,
    src_cov: f64,
    tgt_a: &[f64],
    tgt_b: &[f64],
    alpha: f64,
    (sig_a, sig_b, cov): (f64, f64, f64),
    averaged: bool,
) -> Result<PairKernel> {
    let average = if averaged {
        Some(CellAverage {
            a: AverageNodes::new(src_a)?,
            b: AverageNodes::new(src_b)?,
            sd_a: src_a.stdev(),
            sd_b: src_b.stdev(),
            rho: correlation_of(src_a.stdev(), src_b.stdev(), src_cov),
        })
    } else {
        None
    };
    Ok(PairKernel {
        src_a: src_a.points().to_vec(),
        src_b: src_b.points().to_vec(),
        tgt_a: tgt_a.to_vec(),
        tgt_b: tgt_b.to_vec(),
        alpha,
        sig_a,
        sig_b,
        rho: correlation_of(sig_a, sig_b, cov),
        average,
    })
}

/// Transition of the 2D tree: bivariate rectangle masses of the innovation
/// shifted to each source point, or a Kronecker product of two 1D kernels
/// when the innovation components are uncorrelated.
pub fn transitions_2d(tree: &QuantTree, k: usize) -> Result<Transition> {
    if tree.mode != Mode::TwoD {
        return Err(Error::InvalidParameter(
            "transitions_2d needs a 2D tree".into(),
        ));
    }
    tree.check_step(k)?;
    let (src, tgt) = (&tree.layers[k], &tree.layers[k + 1]);
    let (s1, s2, c12) = innovation_law_2d(&tree.params, src.t, tgt.t)?;
    let averaged = tree.options.cell_averaged;
    let src_cov = state_cov(&tree.params, src.t)?.0[(X, Y)];
    let op = if c12 == 0.0 && src_cov == 0.0 {
        Op::Kron(
            Factor::new(single_dim_kernel(
                &src.grids[0],
                tgt.bounds(0),
                s1,
                averaged,
            )?),
            Factor::new(single_dim_kernel(
                &src.grids[1],
                tgt.bounds(1),
                s2,
                averaged,
            )?),
        )
    } else {
        Op::Single(Factor::new(pair_kernel(
            &src.grids[0],
            &src.grids[1],
            src_cov,
            tgt.bounds(0),
            tgt.bounds(1),
            0.0,
            (s1, s2, c12),
            averaged,
        )?))
    };
    Ok(Transition {
        step: k,
        provenance: Provenance::Deterministic2D,
        op,
    })
}

/// Transition of the 4D tree. When `(X, W^f)` and `(Y, W^d)` are
/// independent the matrix is the Kronecker product of two exact pair
/// kernels; otherwise it is estimated by Monte Carlo.
pub fn transitions_4d(tree: &QuantTree, k: usize, mc: Option<McConfig>) -> Result<Transition> {
    if tree.mode != Mode::FourD {
        return Err(Error::InvalidParameter(
            "transitions_4d needs a 4D tree".into(),
        ));
    }
    tree.check_step(k)?;
    if !tree.params.rates_decoupled() {
        return match mc {
            Some(mc) => mc_transitions_4d(tree, k, mc),
            None => Err(Error::McRequired),
        };
    }
    let p = &tree.params;
    let (src, tgt) = (&tree.layers[k], &tree.layers[k + 1]);
    let inc = increment_cov(p, src.t, tgt.t)?;
    let g = &inc.cov;
    let sd = |i: usize| g[(i, i)].max(0.0).sqrt();
    let s_cov = state_cov(p, src.t)?.0;
    let averaged = tree.options.cell_averaged;
    let left = pair_kernel(
        &src.grids[0],
        &src.grids[1],
        s_cov[(X, WF)],
        tgt.bounds(0),
        tgt.bounds(1),
        p.sigma_f * inc.delta,
        (sd(X), sd(WF), g[(X, WF)]),
        averaged,
    )?;
    let right = pair_kernel(
        &src.grids[2],
        &src.grids[3],
        s_cov[(Y, WD)],
        tgt.bounds(2),
        tgt.bounds(3),
        -p.sigma_d * inc.delta,
        (sd(Y), sd(WD), g[(Y, WD)]),
        averaged,
    )?;
    Ok(Transition {
        step: k,
        provenance: Provenance::DeterministicFactorized4D,
        op: Op::Kron(Factor::new(left), Factor::dense(&right)),
    })
}

const MC_BATCH: usize = 4096;

/// Seed of step `k`, so that each step draws its own sample set.
fn step_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `n` exact increment draws for step `k`, in batches with their own
/// substreams.
pub(crate) fn step_samples(
    tree: &QuantTree,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<[f64; 4]>> {
    let (t0, t1) = (tree.layers[k].t, tree.layers[k + 1].t);
    let sampler = IncrementSampler::new(&increment_cov(&tree.params, t0, t1)?)?;
    let seed = step_seed(seed, k);
    let mut out = vec![[0.0; 4]; n];
    out.par_chunks_mut(MC_BATCH)
        .enumerate()
        .for_each(|(b, chunk)| {
            let mut rng = substream(seed, b as u64);
            for g in chunk {
                *g = sampler.sample(&mut rng);
            }
        });
    Ok(out)
}

/// Arrival frequencies over target cells for one source state.
pub(crate) fn count_arrivals(
    tree: &QuantTree,
    k: usize,
    source: &[f64; 4],
    samples: &[[f64; 4]],
) -> Vec<(usize, f64)> {
    let tgt = &tree.layers[k + 1];
    let delta = tgt.t - tree.layers[k].t;
    let base = drift_state(&tree.params, delta, *source);
    let mut hits: Vec<u32> = samples
        .iter()
        .map(|g| {
            let s = [
                base[0] + g[0],
                base[1] + g[1],
                base[2] + g[2],
                base[3] + g[3],
            ];
            tgt.locate(tree.mode, &s) as u32
        })
        .collect();
    hits.sort_unstable();
    let n = samples.len() as f64;
    let mut out: Vec<(usize, f64)> = Vec::new();
    let mut start = 0;
    while start < hits.len() {
        let j = hits[start];
        let end = start + hits[start..].partition_point(|&h| h == j);
        out.push((j as usize, (end - start) as f64 / n));
        start = end;
    }
    out
}

/// Monte-Carlo transition of the 4D tree with common random numbers: one
/// sample set of increments is pushed from every source node.
pub fn mc_transitions_4d(tree: &QuantTree, k: usize, mc: McConfig) -> Result<Transition> {
    if tree.mode != Mode::FourD {
        return Err(Error::InvalidParameter(
            "mc_transitions_4d needs a 4D tree".into(),
        ));
    }
    tree.check_step(k)?;
    if mc.n_samples == 0 {
        return Err(Error::InvalidParameter("mc n_samples must be >= 1".into()));
    }
    let samples = step_samples(tree, k, mc.n_samples, mc.seed)?;
    let src = &tree.layers[k];
    let rows: Vec<Vec<(usize, f64)>> = (0..src.len())
        .into_par_iter()
        .map(|i| count_arrivals(tree, k, &src.state(tree.mode, i), &samples))
        .collect();
    let mut indptr = Vec::with_capacity(rows.len() + 1);
    indptr.push(0);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for r in rows {
        for (j, p) in r {
            indices.push(j as u32);
            values.push(p);
        }
        indptr.push(indices.len());
    }
    Ok(Transition {
        step: k,
        provenance: Provenance::MonteCarlo4D {
            n_samples: mc.n_samples,
            seed: mc.seed,
        },
        op: Op::Sparse(Csr {
            cols: tree.layers[k + 1].len(),
            indptr,
            indices,
            values,
        }),
    })
}

/// Writes `layer_<k>.csv` (node, coordinates, product weight) and
/// `transition_<k>.csv` (nonzero `i, j, p`) for every date and step.
pub fn dump_tree(tree: &QuantTree, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let names: Vec<&str> = tree
        .mode
        .state_dims()
        .iter()
        .map(|&d| ["x", "wf", "y", "wd"][d])
        .collect();
    for (k, layer) in tree.layers.iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(format!("layer_{k}.csv")))?;
        let mut header = vec!["node".to_string()];
        header.extend(names.iter().map(|s| s.to_string()));
        header.push("product_weight".into());
        w.write_record(&header)?;
        for i in 0..layer.len() {
            let s = layer.state(tree.mode, i);
            let mut rec = vec![i.to_string()];
            rec.extend(tree.mode.state_dims().iter().map(|&d| s[d].to_string()));
            rec.push(layer.product_weight(i).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    for k in 0..tree.n_steps() {
        let tr = tree.transition(k)?;
        let mut body = String::from("i,j,p\n");
        for i in 0..tr.rows() {
            for (j, p) in tr.row_entries(i) {
                writeln!(body, "{i},{j},{p}").expect("writing to a String");
            }
        }
        fs::write(dir.join(format!("transition_{k}.csv")), body)?;
    }
    Ok(())
}
