//! Initial discount curves `t ↦ P(0, t)`.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum InitialCurve {
    /// `P(0, t) = exp(-rate * t)`
    Flat { rate: f64 },
    /// Log-linear interpolation between quoted discounts; flat forward
    /// extrapolation past the last tenor.
    Tabulated {
        tenors: Vec<f64>,
        discounts: Vec<f64>,
    },
}

impl InitialCurve {
    pub fn flat(rate: f64) -> Result<Self> {
        if !rate.is_finite() || rate < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "flat rate must be finite and >= 0 (nonincreasing curve), got {rate}"
            )));
        }
        Ok(Self::Flat { rate })
    }

    pub fn tabulated(tenors: Vec<f64>, discounts: Vec<f64>) -> Result<Self> {
        if tenors.len() != discounts.len() || tenors.len() < 2 {
            return Err(Error::InvalidParameter(
                "curve needs at least two (tenor, discount) pairs".into(),
            ));
        }
        if tenors[0] != 0.0 || discounts[0] != 1.0 {
            return Err(Error::InvalidParameter(
                "curve must start at tenor 0 with discount 1".into(),
            ));
        }
        if tenors.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParameter(
                "curve tenors must be strictly increasing".into(),
            ));
        }
        if discounts.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
            return Err(Error::InvalidParameter(
                "discounts must lie in (0, 1]".into(),
            ));
        }
        if discounts.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidParameter(
                "discounts must be nonincreasing".into(),
            ));
        }
        Ok(Self::Tabulated { tenors, discounts })
    }

    /// Reads a `tenor_years,discount` CSV file.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "tenor_years" || &headers[1] != "discount" {
            return Err(Error::Format(format!(
                "{}: expected header `tenor_years,discount`",
                path.display()
            )));
        }
        let mut tenors = Vec::new();
        let mut discounts = Vec::new();
        for record in reader.records() {
            let record = record?;
            let field = |i: usize| -> Result<f64> {
                record[i].trim().parse::<f64>().map_err(|e| {
                    Error::Format(format!("{}: {:?}: {e}", path.display(), &record[i]))
                })
            };
            tenors.push(field(0)?);
            discounts.push(field(1)?);
        }
        Self::tabulated(tenors, discounts)
    }

    pub fn discount(&self, t: f64) -> f64 {
        match self {
            Self::Flat { rate } => (-rate * t).exp(),
            Self::Tabulated { tenors, discounts } => {
                let n = tenors.len();
                let seg = match tenors.iter().position(|&x| x > t) {
                    Some(0) => return 1.0,
                    Some(i) => i - 1,
                    None => n - 2,
                };
                let (t0, t1) = (tenors[seg], tenors[seg + 1]);
                let (l0, l1) = (discounts[seg].ln(), discounts[seg + 1].ln());
                (l0 + (l1 - l0) * (t - t0) / (t1 - t0)).exp()
            }
        }
    }
}
