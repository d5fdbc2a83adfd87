//! European FX call and European PRDC coupon in closed form (constant
//! volatilities).

use crate::error::{Error, Result};
use crate::gaussian::norm_cdf;
use crate::model::ModelParams;
use crate::payoff::ProductSpec;

/// Half the total variance of `log S_t` under the `t`-forward measure, and
/// its square-root volatility `σ = √(2μ)`.
pub fn mu_sigma(params: &ModelParams, t: f64) -> Result<(f64, f64)> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("mu_sigma needs t > 0, got {t}")));
    }
    let (ss, sd, sf) = (params.sigma_s, params.sigma_d, params.sigma_f);
    let (t2, t3) = (t * t, t * t * t);
    let mu = 0.5 * (ss * ss * t + sf * sf * t3 / 3.0 + sd * sd * t3 / 3.0)
        + params.rho_sf * ss * sf * t2 / 2.0
        - params.rho_sd * ss * sd * t2 / 2.0
        - params.rho_df * sf * sd * t3 / 3.0;
    // relative to the largest term, so rounding of cancelling terms counts as zero
    let scale = 0.5 * (ss * ss * t + (sf * sf + sd * sd) * t3 / 3.0);
    if !(mu > 1e-14 * scale) {
        return Err(Error::Domain(format!(
            "non-positive total variance at t = {t} (μ = {mu:e})"
        )));
    }
    let sigma = (2.0 * mu).sqrt();
    debug_assert!((sigma * sigma - 2.0 * mu).abs() <= 1e-14 * mu);
    Ok((mu, sigma))
}

/// Price at 0 of `(S_t - K)_+` paid at `t`, per unit of foreign notional.
pub fn european_call(params: &ModelParams, strike: f64, t: f64) -> Result<f64> {
    if !(strike >= 0.0) {
        return Err(Error::Domain(format!("strike must be >= 0, got {strike}")));
    }
    let fwd = params.s0 * params.discount_f(t);
    if strike == 0.0 {
        return Ok(fwd);
    }
    let pd = params.discount_d(t);
    let (mu, sigma) = mu_sigma(params, t)?;
    let m = (fwd / (strike * pd)).ln();
    let d_plus = (m + mu) / sigma;
    let d_minus = (m - mu) / sigma;
    Ok(fwd * norm_cdf(d_plus) - strike * pd * norm_cdf(d_minus))
}

/// European PRDC coupon of exercise date `k`, paid at that date.
pub fn european_prdc(params: &ModelParams, spec: &ProductSpec, k: usize) -> Result<f64> {
    let t = *spec
        .exercise_dates
        .get(k)
        .ok_or_else(|| Error::Dimension(format!("no exercise date {k}")))?;
    let d = spec.call_decomposition(k);
    let c2 = european_call(params, d.k2, t)?;
    let c1 = european_call(params, d.k1, t)?;
    Ok(d.floor * params.discount_d(t) + d.a * (c2 - c1))
}
