//! Optimal quadratic quantizers of one-dimensional Gaussian laws.
//!
//! Grids are built once for N(0, 1) and rescaled: if `Γ` is optimal for
//! N(0, 1) then `μ + σΓ` is optimal for N(μ, σ²), with the same weights and
//! a distortion scaled by `σ²`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::gaussian::{norm_interval_mass, norm_inv_cdf, norm_pdf, partial_moments};

/// A one-dimensional quantizer of N(mean, stdev²).
///
/// Points are strictly increasing, weights are the Gaussian masses of the
/// Voronoi cells delimited by the midpoints (the outer cells extend to ±∞).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid1D {
    points: Vec<f64>,
    weights: Vec<f64>,
    distortion: f64,
    mean: f64,
    stdev: f64,
}

impl Grid1D {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Squared L² quantization error.
    pub fn distortion(&self) -> f64 {
        self.distortion
    }

    pub fn level(&self) -> usize {
        self.points.len()
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn stdev(&self) -> f64 {
        self.stdev
    }

    /// A single point carrying all the mass, used for dimensions whose
    /// variance vanishes (e.g. every state coordinate at t = 0).
    pub fn point_mass(at: f64) -> Self {
        Self {
            points: vec![at],
            weights: vec![1.0],
            distortion: 0.0,
            mean: at,
            stdev: 0.0,
        }
    }

    /// Cell boundaries `z_{1/2} = -∞ < z_{3/2} < … < z_{N+1/2} = +∞`.
    pub fn boundaries(&self) -> Vec<f64> {
        cell_boundaries(&self.points)
    }

    /// Index of the Voronoi cell containing `x` (ties go to the upper cell).
    pub fn locate(&self, x: f64) -> usize {
        let pts = &self.points;
        // number of midpoints <= x
        let mut lo = 0usize;
        let mut hi = pts.len() - 1;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if x < 0.5 * (pts[mid] + pts[mid + 1]) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    }
}

fn cell_boundaries(points: &[f64]) -> Vec<f64> {
    let mut b = Vec::with_capacity(points.len() + 1);
    b.push(f64::NEG_INFINITY);
    b.extend(points.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    b.push(f64::INFINITY);
    b
}

/// `φ(a) - φ(b)` without cancellation for nearby finite bounds.
fn pdf_difference(a: f64, b: f64) -> f64 {
    if a.is_finite() && b.is_finite() {
        if a.abs() <= b.abs() {
            -norm_pdf(a) * (-(b - a) * (b + a) * 0.5).exp_m1()
        } else {
            norm_pdf(b) * (-(a - b) * (a + b) * 0.5).exp_m1()
        }
    } else {
        norm_pdf(a) - norm_pdf(b)
    }
}

/// Cell masses and centroids of N(0, 1) for the given points.
fn cells(points: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let b = cell_boundaries(points);
    let mut mass = Vec::with_capacity(points.len());
    let mut centroid = Vec::with_capacity(points.len());
    for w in b.windows(2) {
        let m0 = norm_interval_mass(w[0], w[1]);
        if m0 < crate::gaussian::EMPTY_CELL_MASS {
            return Err(Error::EmptyCell {
                lower: w[0],
                upper: w[1],
            });
        }
        mass.push(m0);
        centroid.push(pdf_difference(w[0], w[1]) / m0);
    }
    Ok((mass, centroid))
}

/// Quadratic distortion of the standard normal against `points`, summed cell
/// by cell from the closed-form partial moments.
fn std_distortion(points: &[f64]) -> f64 {
    let b = cell_boundaries(points);
    points
        .iter()
        .zip(b.windows(2))
        .map(|(&z, w)| {
            let pm = partial_moments(w[0], w[1]);
            let m1 = pdf_difference(w[0], w[1]);
            (pm.m2 - 2.0 * z * m1 + z * z * pm.m0).max(0.0)
        })
        .sum()
}

/// Iteration budget and tolerances of the quantizer construction.
#[derive(Clone, Copy, Debug)]
pub struct BuildOptions {
    pub lloyd_tol: f64,
    pub lloyd_max_iter: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            lloyd_tol: 1e-8,
            lloyd_max_iter: 10_000,
            newton_tol: 1e-12,
            newton_max_iter: 100,
        }
    }
}

const NEWTON_NOISE_FLOOR: f64 = 1e-9;

/// Tolerance on `|z_i - E[Z | Z ∈ C_i]|` accepted for a finished grid.
pub const STATIONARITY_TOL: f64 = 1e-10;

/// Optimal quadratic quantizer of N(0, 1) with `level` points.
pub fn build_std_grid(level: usize) -> Result<Grid1D> {
    build_std_grid_with(level, BuildOptions::default())
}

pub fn build_std_grid_with(level: usize, opts: BuildOptions) -> Result<Grid1D> {
    if level == 0 {
        return Err(Error::InvalidParameter(
            "quantizer level must be >= 1".into(),
        ));
    }
    if level == 1 {
        return Ok(Grid1D {
            points: vec![0.0],
            weights: vec![1.0],
            distortion: 1.0,
            mean: 0.0,
            stdev: 1.0,
        });
    }
    let n = level as f64;
    let mut z = (1..=level)
        .map(|i| norm_inv_cdf((2 * i - 1) as f64 / (2.0 * n)))
        .collect::<Result<Vec<_>>>()?;

    // Lloyd's fixed point: move every point to the centroid of its cell. It
    // is a warm start; the Newton phase below decides convergence.
    let mut prev_distortion = f64::INFINITY;
    for _ in 0..opts.lloyd_max_iter {
        let (_, c) = cells(&z)?;
        let moved = z
            .iter()
            .zip(&c)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        z = c;
        if cfg!(debug_assertions) {
            let d = std_distortion(&z);
            debug_assert!(
                d <= prev_distortion * (1.0 + 1e-12),
                "Lloyd step increased distortion: {prev_distortion} -> {d}"
            );
            prev_distortion = d;
        }
        if moved < opts.lloyd_tol {
            break;
        }
    }

    newton_polish(&mut z, opts)?;
    symmetrize(&mut z);

    let (weights, centroids) = cells(&z)?;
    let worst = z
        .iter()
        .zip(&centroids)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if worst > STATIONARITY_TOL {
        return Err(Error::Convergence {
            level,
            reason: format!("stationarity residual {worst:e} above {STATIONARITY_TOL:e}"),
        });
    }
    if z.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Convergence {
            level,
            reason: "points lost their ordering".into(),
        });
    }
    let distortion = std_distortion(&z);
    Ok(Grid1D {
        points: z,
        weights,
        distortion,
        mean: 0.0,
        stdev: 1.0,
    })
}

/// Newton iterations on the distortion gradient `p_i (z_i - c_i)`, whose
/// Jacobian is tridiagonal.
fn newton_polish(z: &mut [f64], opts: BuildOptions) -> Result<()> {
    let level = z.len();
    let mut diag = vec![0.0; level];
    let mut off = vec![0.0; level - 1];
    let mut rhs = vec![0.0; level];
    let mut last_step = f64::INFINITY;
    for _ in 0..opts.newton_max_iter {
        let (mass, cent) = cells(z)?;
        for i in 0..level {
            rhs[i] = -mass[i] * (z[i] - cent[i]);
            diag[i] = mass[i];
        }
        for i in 0..level - 1 {
            let gap = z[i + 1] - z[i];
            let t = 0.25 * norm_pdf(0.5 * (z[i] + z[i + 1])) * gap;
            off[i] = -t;
            diag[i] -= t;
            diag[i + 1] -= t;
        }
        let step = solve_tridiagonal(&diag, &off, &rhs);
        let max_step = step.iter().fold(0.0_f64, |m, s| m.max(s.abs()));

        // damp until the ordering survives
        let mut scale = 1.0;
        loop {
            let ordered =
                (0..level - 1).all(|i| z[i] + scale * step[i] < z[i + 1] + scale * step[i + 1]);
            if ordered || scale < 1e-6 {
                break;
            }
            scale *= 0.5;
        }
        for (zi, si) in z.iter_mut().zip(&step) {
            *zi += scale * si;
        }
        if max_step * scale < opts.newton_tol {
            return Ok(());
        }
        // Past quadratic convergence the step is rounding noise in the cell
        // centroids (a few 1e-12 at N ~ 1000); stationarity is checked by the
        // caller.
        if max_step < NEWTON_NOISE_FLOOR && max_step >= 0.5 * last_step {
            return Ok(());
        }
        last_step = max_step;
    }
    Err(Error::Convergence {
        level,
        reason: format!(
            "Newton did not reach a step below {:e} in {} iterations",
            opts.newton_tol, opts.newton_max_iter
        ),
    })
}

/// The optimal grid of a symmetric law is symmetric.
fn symmetrize(z: &mut [f64]) {
    let n = z.len();
    for i in 0..n / 2 {
        let half = 0.5 * (z[n - 1 - i] - z[i]);
        z[i] = -half;
        z[n - 1 - i] = half;
    }
    if n % 2 == 1 {
        z[n / 2] = 0.0;
    }
}

/// Thomas algorithm for a symmetric tridiagonal system.
fn solve_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = if n > 1 { off[0] / diag[0] } else { 0.0 };
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - off[i - 1] * c[i - 1];
        if i < n - 1 {
            c[i] = off[i] / m;
        }
        d[i] = (rhs[i] - off[i - 1] * d[i - 1]) / m;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    x
}

/// Maps a standard-normal grid onto N(mu, sigma²).
pub fn rescale(grid: &Grid1D, mu: f64, sigma: f64) -> Result<Grid1D> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "rescale needs sigma > 0, got {sigma}"
        )));
    }
    if grid.mean != 0.0 || grid.stdev != 1.0 {
        return Err(Error::InvalidParameter(
            "rescale expects a standard-normal grid".into(),
        ));
    }
    Ok(Grid1D {
        points: grid.points.iter().map(|z| mu + sigma * z).collect(),
        weights: grid.weights.clone(),
        distortion: grid.distortion * sigma * sigma,
        mean: mu,
        stdev: sigma,
    })
}

/// `E[min_i (Z - z_i)²]` for `Z` distributed as the grid's law.
pub fn distortion_of(grid: &Grid1D) -> f64 {
    if grid.stdev == 0.0 {
        return 0.0;
    }
    let std_points: Vec<f64> = grid
        .points
        .iter()
        .map(|x| (x - grid.mean) / grid.stdev)
        .collect();
    std_distortion(&std_points) * grid.stdev * grid.stdev
}

/// Weights recomputed from the midpoints of the points.
pub fn cell_weights(grid: &Grid1D) -> Vec<f64> {
    if grid.stdev == 0.0 {
        return vec![1.0];
    }
    let b = grid.boundaries();
    b.windows(2)
        .map(|w| {
            norm_interval_mass(
                (w[0] - grid.mean) / grid.stdev,
                (w[1] - grid.mean) / grid.stdev,
            )
        })
        .collect()
}

const HEADER_TAG: &str = "QGRID1D v1 N=";

fn format_real(x: f64) -> String {
    // shortest representation that parses back to the same bits
    if x == 0.0 {
        "0".to_string()
    } else {
        format!("{x}")
    }
}

/// Writes a standard grid as `QGRID1D v1 N=<N>` followed by `<point> <weight>`
/// lines. The temp-file-then-rename dance keeps concurrent writers safe.
pub fn save_grid(grid: &Grid1D, path: &Path) -> Result<()> {
    let mut text = format!("{HEADER_TAG}{}\n", grid.level());
    for (z, w) in grid.points.iter().zip(&grid.weights) {
        text.push_str(&format_real(*z));
        text.push(' ');
        text.push_str(&format_real(*w));
        text.push('\n');
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a standard grid written by [`save_grid`]; the distortion is
/// recomputed from the points.
pub fn load_grid(path: &Path) -> Result<Grid1D> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty grid file".into()))??;
    let level: usize = header
        .trim()
        .strip_prefix(HEADER_TAG)
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad header {header:?}")))?;
    let mut points = Vec::with_capacity(level);
    let mut weights = Vec::with_capacity(level);
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Format(format!("line {}: {line:?}", lineno + 2)))
        };
        points.push(parse(it.next())?);
        weights.push(parse(it.next())?);
        if it.next().is_some() {
            return Err(Error::Format(format!(
                "line {}: trailing fields",
                lineno + 2
            )));
        }
    }
    if points.len() != level {
        return Err(Error::Format(format!(
            "header announces {level} points, file has {}",
            points.len()
        )));
    }
    if level == 0 {
        return Err(Error::Format("grid with zero points".into()));
    }
    if points.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Format("points are not strictly increasing".into()));
    }
    if weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::Format("non-positive weight".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Format(format!("weights sum to {total}")));
    }
    let distortion = std_distortion(&points);
    Ok(Grid1D {
        points,
        weights,
        distortion,
        mean: 0.0,
        stdev: 1.0,
    })
}

/// Environment variable overriding the default on-disk cache location.
pub const CACHE_DIR_ENV: &str = "QPRDC_CACHE_DIR";

/// Source of standard grids: an in-process memo plus an optional directory of
/// `QGRID1D` files keyed by level. Both layers are pure optimisations.
#[derive(Clone, Debug, Default)]
pub struct GridCache {
    dir: Option<PathBuf>,
}

fn memo() -> &'static Mutex<HashMap<usize, Arc<Grid1D>>> {
    static MEMO: OnceLock<Mutex<HashMap<usize, Arc<Grid1D>>>> = OnceLock::new();
    MEMO.get_or_init(|| Mutex::new(HashMap::new()))
}

impl GridCache {
    /// Memory-only cache.
    pub fn in_memory() -> Self {
        Self { dir: None }
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
        }
    }

    /// Directory from `QPRDC_CACHE_DIR` when set, memory-only otherwise.
    pub fn from_env() -> Self {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(d) if !d.is_empty() => Self::with_dir(d),
            _ => Self::in_memory(),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn file_for(dir: &Path, level: usize) -> PathBuf {
        dir.join(format!("qgrid1d_N{level}.txt"))
    }

    pub fn get(&self, level: usize) -> Result<Arc<Grid1D>> {
        if let Some(g) = memo().lock().unwrap().get(&level) {
            return Ok(Arc::clone(g));
        }
        let grid = match &self.dir {
            Some(dir) => {
                let file = Self::file_for(dir, level);
                match load_grid(&file) {
                    Ok(g) if g.level() == level => g,
                    _ => {
                        let g = build_std_grid(level)?;
                        save_grid(&g, &file)?;
                        g
                    }
                }
            }
            None => build_std_grid(level)?,
        };
        let grid = Arc::new(grid);
        memo()
            .lock()
            .unwrap()
            .entry(level)
            .or_insert_with(|| Arc::clone(&grid));
        Ok(grid)
    }
}
