//! Power-reverse dual-currency coupons and the discounted exercise value on
//! the `(x, y)` state.

use crate::error::{Error, Result};
use crate::model::{phi_d, phi_f, ModelParams};

/// Any exercise payoff that is a function of the spot at an exercise date.
/// Dates are indexed from 0 here (`k = 0` is `t_1`).
pub trait Payoff: Sync {
    fn dates(&self) -> &[f64];
    fn value(&self, k: usize, s: f64) -> f64;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProductSpec {
    pub exercise_dates: Vec<f64>,
    pub cd: Vec<f64>,
    pub cf: Vec<f64>,
    pub cap: Vec<f64>,
    pub floor: Vec<f64>,
    pub s0_ref: f64,
}

/// `ψ = floor - a (s - k1)_+ + a (s - k2)_+`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CallDecomposition {
    pub floor: f64,
    pub a: f64,
    pub k1: f64,
    pub k2: f64,
}

impl ProductSpec {
    /// Same coupon terms on every date.
    pub fn uniform(
        exercise_dates: Vec<f64>,
        cd: f64,
        cf: f64,
        cap: f64,
        floor: f64,
        s0_ref: f64,
    ) -> Result<Self> {
        let n = exercise_dates.len();
        let spec = Self {
            exercise_dates,
            cd: vec![cd; n],
            cf: vec![cf; n],
            cap: vec![cap; n],
            floor: vec![floor; n],
            s0_ref,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Reference PRDC coupon terms, exercisable at `T k / n`.
    pub fn reference(maturity: f64, n_dates: usize, s0_ref: f64) -> Result<Self> {
        let dates = (1..=n_dates)
            .map(|k| maturity * k as f64 / n_dates as f64)
            .collect();
        Self::uniform(dates, 0.15, 0.189, 0.0555, 0.0, s0_ref)
    }

    pub fn n_dates(&self) -> usize {
        self.exercise_dates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.exercise_dates.len();
        if n == 0 {
            return Err(Error::InvalidParameter("no exercise dates".into()));
        }
        for (name, v) in [
            ("Cd", &self.cd),
            ("Cf", &self.cf),
            ("cap", &self.cap),
            ("floor", &self.floor),
        ] {
            if v.len() != n {
                return Err(Error::Dimension(format!(
                    "{name} has {} entries for {n} exercise dates",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be finite")));
            }
        }
        if !(self.exercise_dates[0] > 0.0)
            || self.exercise_dates.windows(2).any(|w| !(w[0] < w[1]))
            || self.exercise_dates.iter().any(|t| !t.is_finite())
        {
            return Err(Error::InvalidParameter(
                "exercise dates must be positive and strictly increasing".into(),
            ));
        }
        if !(self.s0_ref > 0.0 && self.s0_ref.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "s0_ref must be > 0, got {}",
                self.s0_ref
            )));
        }
        for k in 0..n {
            if self.floor[k] > self.cap[k] {
                return Err(Error::InvalidParameter(format!(
                    "floor {} above cap {} at date {k}",
                    self.floor[k], self.cap[k]
                )));
            }
            if !(self.cf[k] > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "Cf must be > 0 at date {k}"
                )));
            }
        }
        Ok(())
    }

    pub fn call_decomposition(&self, k: usize) -> CallDecomposition {
        let cf = self.cf[k];
        CallDecomposition {
            floor: self.floor[k],
            a: cf / self.s0_ref,
            k1: (self.cap[k] + self.cd[k]) / cf * self.s0_ref,
            k2: (self.floor[k] + self.cd[k]) / cf * self.s0_ref,
        }
    }
}

impl CallDecomposition {
    pub fn eval(&self, s: f64) -> f64 {
        self.floor - self.a * (s - self.k1).max(0.0) + self.a * (s - self.k2).max(0.0)
    }
}

/// `min(max(Cf/s0_ref · s - Cd, floor), cap)` at exercise date `k`.
pub fn prdc_payoff(spec: &ProductSpec, k: usize, s: f64) -> f64 {
    (spec.cf[k] / spec.s0_ref * s - spec.cd[k])
        .max(spec.floor[k])
        .min(spec.cap[k])
}

impl Payoff for ProductSpec {
    fn dates(&self) -> &[f64] {
        &self.exercise_dates
    }

    fn value(&self, k: usize, s: f64) -> f64 {
        prdc_payoff(self, k, s)
    }
}

/// Date-dependent constants of the obstacle, precomputed once per date.
#[derive(Clone, Copy, Debug)]
pub struct ObstacleFactors {
    pub t: f64,
    pub phi_d: f64,
    /// `S_0 φ_f/φ_d e^{-σ_S² t/2}`
    pub spot_scale: f64,
}

impl ObstacleFactors {
    pub fn new(params: &ModelParams, t: f64) -> Self {
        let pd = phi_d(params, t);
        Self {
            t,
            phi_d: pd,
            spot_scale: params.s0 * phi_f(params, t) / pd
                * (-0.5 * params.sigma_s.powi(2) * t).exp(),
        }
    }

    #[inline]
    pub fn spot(&self, x: f64, y: f64) -> f64 {
        self.spot_scale * (x + y).exp()
    }

    #[inline]
    pub fn eval<P: Payoff + ?Sized>(&self, payoff: &P, k: usize, x: f64, y: f64) -> f64 {
        self.phi_d * (-y).exp() * payoff.value(k, self.spot(x, y))
    }
}

/// `h_k(x, y) = φ_d(t_k) e^{-y} ψ_k(S_0 (φ_f/φ_d)(t_k) e^{-σ_S² t_k/2 + x + y})`,
/// the exercise value discounted to time 0.
pub fn obstacle_h<P: Payoff + ?Sized>(
    params: &ModelParams,
    payoff: &P,
    k: usize,
    x: f64,
    y: f64,
) -> f64 {
    ObstacleFactors::new(params, payoff.dates()[k]).eval(payoff, k, x, y)
}
