//! Three-factor Gaussian model: FX spot with Ho-Lee type domestic and foreign
//! zero-coupon curves, all driven by correlated Brownian motions under the
//! domestic risk-neutral measure.
//!
//! The pricing state is the Markov tuple `(X, W^f, Y, W^d)` with
//!
//! ```text
//! X_t = σ_S W^S_t + σ_f ∫_0^t (t - s) dW^f_s
//! Y_t = -σ_d ∫_0^t (t - s) dW^d_s
//! ```
//!
//! and the one-step recursion over `δ = t_{k+1} - t_k`
//!
//! ```text
//! X_{k+1}   = X_k + σ_f δ W^f_k + G¹
//! W^f_{k+1} = W^f_k + G²
//! Y_{k+1}   = Y_k - σ_d δ W^d_k + G³
//! W^d_{k+1} = W^d_k + G⁴
//! ```
//!
//! Every covariance is a sum of terms `c_a c_b ρ_ab ∫ (t - s)^{p+q} ds`, so
//! they are evaluated exactly as polynomials in the step length.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::curve::InitialCurve;
use crate::error::{Error, Result};

/// Index of each state coordinate in 4-vectors and 4×4 matrices.
pub const X: usize = 0;
pub const WF: usize = 1;
pub const Y: usize = 2;
pub const WD: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Spot FX, domestic units per foreign unit.
    pub s0: f64,
    pub sigma_s: f64,
    pub sigma_d: f64,
    pub sigma_f: f64,
    pub rho_sd: f64,
    pub rho_sf: f64,
    pub rho_df: f64,
    pub curve_d: InitialCurve,
    pub curve_f: InitialCurve,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Factor {
    S,
    D,
    F,
}

/// `coef · (t_end - s)^power dW^factor`
#[derive(Clone, Copy, Debug)]
struct Term {
    factor: Factor,
    coef: f64,
    power: i32,
}

impl ModelParams {
    /// Reference market: flat curves, zero correlations,
    /// `σ_d = σ_f = sigma_rates`.
    pub fn reference(sigma_rates: f64) -> Self {
        Self {
            s0: 88.17,
            sigma_s: 0.5,
            sigma_d: sigma_rates,
            sigma_f: sigma_rates,
            rho_sd: 0.0,
            rho_sf: 0.0,
            rho_df: 0.0,
            curve_d: InitialCurve::Flat { rate: 0.015 },
            curve_f: InitialCurve::Flat { rate: 0.01 },
        }
    }

    /// Same market with the correlations used for the correlated tables.
    pub fn reference_correlated(sigma_rates: f64) -> Self {
        Self {
            rho_sf: -0.0272,
            rho_sd: 0.1574,
            rho_df: 0.6558,
            ..Self::reference(sigma_rates)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "s0 must be > 0, got {}",
                self.s0
            )));
        }
        for (name, v) in [
            ("sigma_s", self.sigma_s),
            ("sigma_d", self.sigma_d),
            ("sigma_f", self.sigma_f),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("rho_sd", self.rho_sd),
            ("rho_sf", self.rho_sf),
            ("rho_df", self.rho_df),
        ] {
            if !(v.abs() <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} outside [-1, 1]: {v}"
                )));
            }
        }
        let min_eig = self
            .correlation_matrix()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-12 {
            return Err(Error::InvalidParameter(format!(
                "correlation matrix of (W^S, W^d, W^f) is not positive semidefinite \
                 (smallest eigenvalue {min_eig:e})"
            )));
        }
        Ok(())
    }

    /// Correlation matrix of `(W^S, W^d, W^f)`.
    pub fn correlation_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0,
            self.rho_sd,
            self.rho_sf, //
            self.rho_sd,
            1.0,
            self.rho_df, //
            self.rho_sf,
            self.rho_df,
            1.0,
        )
    }

    /// True when `(X, W^f)` is independent of `(Y, W^d)`.
    pub fn rates_decoupled(&self) -> bool {
        self.rho_sd == 0.0 && self.rho_df == 0.0
    }

    fn rho(&self, a: Factor, b: Factor) -> f64 {
        use Factor::*;
        match (a, b) {
            _ if a == b => 1.0,
            (S, D) | (D, S) => self.rho_sd,
            (S, F) | (F, S) => self.rho_sf,
            (D, F) | (F, D) => self.rho_df,
            _ => unreachable!(),
        }
    }

    /// Stochastic-integral representation of `(X, W^f, Y, W^d)` (or of the
    /// increments `G`) over a window ending at `t_end`.
    fn terms(&self) -> [Vec<Term>; 4] {
        [
            vec![
                Term {
                    factor: Factor::S,
                    coef: self.sigma_s,
                    power: 0,
                },
                Term {
                    factor: Factor::F,
                    coef: self.sigma_f,
                    power: 1,
                },
            ],
            vec![Term {
                factor: Factor::F,
                coef: 1.0,
                power: 0,
            }],
            vec![Term {
                factor: Factor::D,
                coef: -self.sigma_d,
                power: 1,
            }],
            vec![Term {
                factor: Factor::D,
                coef: 1.0,
                power: 0,
            }],
        ]
    }

    /// Covariance of the four integrals over a window of length `len`.
    fn window_cov(&self, len: f64) -> Matrix4<f64> {
        let terms = self.terms();
        let mut m = Matrix4::zeros();
        for i in 0..4 {
            for j in i..4 {
                let mut c = 0.0;
                for a in &terms[i] {
                    for b in &terms[j] {
                        let p = a.power + b.power + 1;
                        c +=
                            self.rho(a.factor, b.factor) * a.coef * b.coef * len.powi(p) / p as f64;
                    }
                }
                m[(i, j)] = c;
                m[(j, i)] = c;
            }
        }
        m
    }

    pub fn discount_d(&self, t: f64) -> f64 {
        self.curve_d.discount(t)
    }

    pub fn discount_f(&self, t: f64) -> f64 {
        self.curve_f.discount(t)
    }
}

/// `φ_d(t) = P^d(0,t) exp(-σ_d² t³ / 6)`, so that
/// `exp(-∫_0^t r^d) = φ_d(t) e^{-Y_t}`.
pub fn phi_d(params: &ModelParams, t: f64) -> f64 {
    params.discount_d(t) * (-params.sigma_d.powi(2) * t.powi(3) / 6.0).exp()
}

/// `φ_f(t) = P^f(0,t) exp(-ρ_Sf σ_S σ_f t²/2 - σ_f² t³/6)`.
pub fn phi_f(params: &ModelParams, t: f64) -> f64 {
    params.discount_f(t)
        * (-params.rho_sf * params.sigma_s * params.sigma_f * t * t / 2.0
            - params.sigma_f.powi(2) * t.powi(3) / 6.0)
            .exp()
}

/// Covariance of the zero-mean state `(X_t, W^f_t, Y_t, W^d_t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateCov(pub Matrix4<f64>);

/// Law of the increments `(G¹, G², G³, G⁴)` over one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IncrementCov {
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
    pub delta: f64,
}

fn check_psd(m: &Matrix4<f64>) -> Result<()> {
    let scale = m.abs().max().max(1e-300);
    let min = m
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min < -1e-12 * scale.max(1.0) {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    Ok(())
}

pub fn state_cov(params: &ModelParams, t: f64) -> Result<StateCov> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("state_cov needs t >= 0, got {t}")));
    }
    let m = params.window_cov(t);
    check_psd(&m)?;
    Ok(StateCov(m))
}

pub fn increment_cov(params: &ModelParams, t_k: f64, t_k1: f64) -> Result<IncrementCov> {
    if !(t_k >= 0.0 && t_k < t_k1) {
        return Err(Error::Domain(format!(
            "increment_cov needs 0 <= t_k < t_k1, got [{t_k}, {t_k1}]"
        )));
    }
    let delta = t_k1 - t_k;
    let cov = params.window_cov(delta);
    check_psd(&cov)?;
    Ok(IncrementCov {
        mean: Vector4::zeros(),
        cov,
        delta,
    })
}

/// Linear part of the one-step recursion: `state_{k+1} = A state_k + G`.
pub fn propagator(params: &ModelParams, delta: f64) -> Matrix4<f64> {
    let mut a = Matrix4::identity();
    a[(X, WF)] = params.sigma_f * delta;
    a[(Y, WD)] = -params.sigma_d * delta;
    a
}

/// Applies the deterministic part of the recursion to a state.
#[inline]
pub fn drift_state(params: &ModelParams, delta: f64, s: [f64; 4]) -> [f64; 4] {
    [
        s[X] + params.sigma_f * delta * s[WF],
        s[WF],
        s[Y] - params.sigma_d * delta * s[WD],
        s[WD],
    ]
}

/// Symmetric square root of a PSD matrix; eigenvalues in `[-1e-12, 0)` are
/// clamped to zero.
pub fn psd_sqrt(m: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    let eig = SymmetricEigen::new(*m);
    let scale = m.abs().max().max(1.0);
    let mut d = Matrix4::zeros();
    for i in 0..4 {
        let l = eig.eigenvalues[i];
        if l < -1e-12 * scale {
            return Err(Error::NotPsd { min_eigenvalue: l });
        }
        d[(i, i)] = l.max(0.0).sqrt();
    }
    Ok(eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Draws exact Gaussian increments for one step length.
#[derive(Clone, Copy, Debug)]
pub struct IncrementSampler {
    root: Matrix4<f64>,
    pub delta: f64,
}

impl IncrementSampler {
    pub fn new(inc: &IncrementCov) -> Result<Self> {
        Ok(Self {
            root: psd_sqrt(&inc.cov)?,
            delta: inc.delta,
        })
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 4] {
        let xi = Vector4::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        self.transform(&[xi[0], xi[1], xi[2], xi[3]])
    }

    /// Maps standard normals to an increment.
    #[inline]
    pub fn transform(&self, xi: &[f64; 4]) -> [f64; 4] {
        let v = self.root * Vector4::new(xi[0], xi[1], xi[2], xi[3]);
        [v[0], v[1], v[2], v[3]]
    }
}

/// Random stream of path (or batch) `stream` under the master `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulated states, path-major: `states[path * dates.len() + k]`.
#[derive(Clone, Debug)]
pub struct StatePaths {
    pub dates: Vec<f64>,
    pub n_paths: usize,
    pub states: Vec<[f64; 4]>,
}

impl StatePaths {
    pub fn state(&self, path: usize, k: usize) -> [f64; 4] {
        self.states[path * self.dates.len() + k]
    }

    pub fn path(&self, path: usize) -> &[[f64; 4]] {
        let n = self.dates.len();
        &self.states[path * n..(path + 1) * n]
    }
}

fn step_samplers(params: &ModelParams, dates: &[f64]) -> Result<Vec<IncrementSampler>> {
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(dates.len());
    for &t in dates {
        if t == prev {
            // zero-length first step (a date at t = 0)
            out.push(IncrementSampler {
                root: Matrix4::zeros(),
                delta: 0.0,
            });
        } else {
            out.push(IncrementSampler::new(&increment_cov(params, prev, t)?)?);
        }
        prev = t;
    }
    Ok(out)
}

/// Exact simulation of `(X, W^f, Y, W^d)` at the given dates, started from
/// the zero state at `t = 0`. Path `p` uses its own random substream, so
/// results do not depend on the number of worker threads.
pub fn simulate_states(
    params: &ModelParams,
    dates: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<StatePaths> {
    if dates.is_empty() || dates[0] < 0.0 || dates.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidParameter(
            "simulation dates must be nonnegative and strictly increasing".into(),
        ));
    }
    if n_paths == 0 {
        return Err(Error::InvalidParameter("n_paths must be >= 1".into()));
    }
    let samplers = step_samplers(params, dates)?;
    let n = dates.len();
    let mut states = vec![[0.0; 4]; n_paths * n];
    states.par_chunks_mut(n).enumerate().for_each(|(p, out)| {
        let mut rng = substream(seed, p as u64);
        let mut s = [0.0; 4];
        for (k, smp) in samplers.iter().enumerate() {
            let g = smp.sample(&mut rng);
            let d = drift_state(params, smp.delta, s);
            s = [d[0] + g[0], d[1] + g[1], d[2] + g[2], d[3] + g[3]];
            out[k] = s;
        }
    });
    Ok(StatePaths {
        dates: dates.to_vec(),
        n_paths,
        states,
    })
}

/// FX spot given the state coordinate `x` and the realised domestic discount
/// factor `exp(-∫_0^t r^d)`:
/// `S_t = S_0 φ_f(t) / discount · exp(-σ_S² t / 2 + x)`.
pub fn spot_from_state(params: &ModelParams, t: f64, x: f64, discount: f64) -> f64 {
    params.s0 * phi_f(params, t) / discount * (-0.5 * params.sigma_s.powi(2) * t + x).exp()
}

/// Spot at state `(x, y)` with the model discount `φ_d(t) e^{-y}`:
/// `S_t = S_0 (φ_f/φ_d)(t) exp(-σ_S² t / 2 + x + y)`.
pub fn spot_from_xy(params: &ModelParams, t: f64, x: f64, y: f64) -> f64 {
    params.s0 * phi_f(params, t) / phi_d(params, t)
        * (-0.5 * params.sigma_s.powi(2) * t + x + y).exp()
}
