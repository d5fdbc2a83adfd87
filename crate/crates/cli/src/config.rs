//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qprdc::curve::InitialCurve;
use qprdc::model::ModelParams;
use qprdc::payoff::ProductSpec;
use qprdc::tree::{allocate_sizes, GridSizes, McConfig, Mode, TreeOptions};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub product: ProductConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub s0: f64,
    pub sigma_s: f64,
    pub sigma_d: f64,
    pub sigma_f: f64,
    #[serde(default)]
    pub rho_sd: f64,
    #[serde(default)]
    pub rho_sf: f64,
    #[serde(default)]
    pub rho_df: f64,
    pub curve_d: CurveConfig,
    pub curve_f: CurveConfig,
}

/// `{"flat": 0.015}` or `{"csv": "curves/usd.csv"}`; CSV paths are relative
/// to the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum CurveConfig {
    Flat(f64),
    Csv(PathBuf),
}

/// A single value applied to every date, or one value per date.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerDate {
    Scalar(f64),
    List(Vec<f64>),
}

impl PerDate {
    fn expand(&self, n: usize, name: &str) -> Result<Vec<f64>, CliError> {
        match self {
            PerDate::Scalar(x) => Ok(vec![*x; n]),
            PerDate::List(v) if v.len() == n => Ok(v.clone()),
            PerDate::List(v) => Err(CliError::Config(format!(
                "product.{name} has {} entries for {n} exercise dates",
                v.len()
            ))),
        }
    }
}

/// Exercise dates are either listed or generated as `maturity · k / n_dates`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exercise_dates: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maturity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_dates: Option<usize>,
    pub cd: PerDate,
    pub cf: PerDate,
    pub cap: PerDate,
    pub floor: PerDate,
    /// Defaults to the model spot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s0_ref: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum ModeName {
    #[serde(rename = "2d")]
    #[value(name = "2d")]
    TwoD,
    #[serde(rename = "4d")]
    #[value(name = "4d")]
    FourD,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::TwoD => Mode::TwoD,
            ModeName::FourD => Mode::FourD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub mode: ModeName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_total: Option<usize>,
    /// Explicit grid sizes, overriding `n_total`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cell_averaged: bool,
    #[serde(default)]
    pub exercise_at_t0: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: ModeName::TwoD,
            n_total: Some(32_000),
            levels: None,
            mc_samples: None,
            seed: 0,
            cell_averaged: false,
            exercise_at_t0: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub retain_layers: bool,
    /// Prices are reported per unit notional times this factor.
    #[serde(default = "one")]
    pub notional: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            csv: None,
            retain_layers: false,
            notional: 1.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for curve in [&mut cfg.model.curve_d, &mut cfg.model.curve_f] {
            if let CurveConfig::Csv(p) = curve {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn params(&self) -> Result<ModelParams, CliError> {
        let m = &self.model;
        let curve = |c: &CurveConfig| match c {
            CurveConfig::Flat(r) => InitialCurve::flat(*r),
            CurveConfig::Csv(p) => InitialCurve::from_csv(p),
        };
        let params = ModelParams {
            s0: m.s0,
            sigma_s: m.sigma_s,
            sigma_d: m.sigma_d,
            sigma_f: m.sigma_f,
            rho_sd: m.rho_sd,
            rho_sf: m.rho_sf,
            rho_df: m.rho_df,
            curve_d: curve(&m.curve_d)?,
            curve_f: curve(&m.curve_f)?,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn product(&self) -> Result<ProductSpec, CliError> {
        let p = &self.product;
        let dates = match (&p.exercise_dates, p.maturity, p.n_dates) {
            (Some(d), None, None) => d.clone(),
            (None, Some(t), Some(n)) if n >= 1 => {
                (1..=n).map(|k| t * k as f64 / n as f64).collect()
            }
            _ => {
                return Err(CliError::Config(
                    "product needs either exercise_dates or maturity with n_dates >= 1".into(),
                ))
            }
        };
        let n = dates.len();
        let spec = ProductSpec {
            exercise_dates: dates,
            cd: p.cd.expand(n, "cd")?,
            cf: p.cf.expand(n, "cf")?,
            cap: p.cap.expand(n, "cap")?,
            floor: p.floor.expand(n, "floor")?,
            s0_ref: p.s0_ref.unwrap_or(self.model.s0),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mode(&self) -> Mode {
        self.engine.mode.into()
    }

    pub fn sizes(&self) -> Result<GridSizes, CliError> {
        let mode = self.mode();
        match (&self.engine.levels, self.engine.n_total) {
            (Some(l), _) => Ok(GridSizes::new(mode, l.clone())?),
            (None, Some(n)) => Ok(allocate_sizes(n, mode)?),
            (None, None) => Err(CliError::Config("engine needs n_total or levels".into())),
        }
    }

    pub fn tree_options(&self) -> TreeOptions {
        TreeOptions {
            cell_averaged: self.engine.cell_averaged,
            mc: self.engine.mc_samples.map(|n_samples| McConfig {
                n_samples,
                seed: self.engine.seed,
            }),
        }
    }

    /// Rejects settings that can only fail later, such as a correlated 4D
    /// run without Monte-Carlo samples.
    pub fn check(&self) -> Result<(), CliError> {
        let params = self.params()?;
        self.product()?;
        self.sizes()?;
        if self.mode() == Mode::FourD
            && !params.rates_decoupled()
            && self.engine.mc_samples.is_none()
        {
            return Err(qprdc::Error::McRequired.into());
        }
        if !(self.output.notional.is_finite() && self.output.notional > 0.0) {
            return Err(CliError::Config("output.notional must be > 0".into()));
        }
        Ok(())
    }
}
