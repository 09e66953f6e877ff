//! Experiment configuration (TOML, `schema_version = 1`).
//!
//! ```toml
//! schema_version = 1
//! sigma_w2 = 1.0
//! power = 10.0
//! sigma_f2 = 1.0
//! sigma_b2 = [0.0, 0.1, 1.0]
//! T = [1, 2, 3, 4, 5]
//! policy = "optimal"        # optimal | sk | numeric_dp | oracle_calibrated
//! trials = 100000           # 0: analytic columns only
//! seed = 1
//! output = "mse.csv"        # optional; stdout when absent
//!
//! [search]                  # optional; numeric_dp / oracle_calibrated only
//! grid_points = 2001
//! refine_tol = 1e-10
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use seqfb_core::dp::SearchSpec;
use seqfb_core::model::validate;
use seqfb_core::SystemParams;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PolicyKind {
    Optimal,
    Sk,
    NumericDp,
    OracleCalibrated,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Optimal => "optimal",
            PolicyKind::Sk => "sk",
            PolicyKind::NumericDp => "numeric_dp",
            PolicyKind::OracleCalibrated => "oracle_calibrated",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub grid_points: Option<usize>,
    pub refine_tol: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub sigma_w2: f64,
    pub power: f64,
    pub sigma_f2: f64,
    pub sigma_b2: Vec<f64>,
    #[serde(rename = "T")]
    pub horizons: Vec<i64>,
    #[serde(default = "default_policy")]
    pub policy: PolicyKind,
    #[serde(default)]
    pub trials: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub search: SearchConfig,
}

fn default_policy() -> PolicyKind {
    PolicyKind::Optimal
}

impl ExperimentConfig {
    /// Parses and validates a config document.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("schema_version: unsupported value {} (expected {SCHEMA_VERSION})", self.schema_version);
        }
        if self.sigma_b2.is_empty() {
            bail!("sigma_b2: grid must not be empty");
        }
        if self.horizons.is_empty() {
            bail!("T: grid must not be empty");
        }
        for &sb in &self.sigma_b2 {
            for &t in &self.horizons {
                validate(self.sigma_w2, self.power, self.sigma_f2, sb, t)
                    .with_context(|| format!("invalid parameters at sigma_b2={sb}, T={t}"))?;
            }
        }
        self.search_spec(&self.cell(self.sigma_b2[0], 0)?).context("search")?;
        Ok(())
    }

    /// Parameters of one grid cell.
    pub fn cell(&self, sigma_b2: f64, horizon: usize) -> anyhow::Result<SystemParams> {
        Ok(SystemParams::new(self.sigma_w2, self.power, self.sigma_f2, sigma_b2, horizon)?)
    }

    /// `(sigma_b2, T)` pairs in grid order.
    pub fn cells(&self) -> anyhow::Result<Vec<SystemParams>> {
        let mut out = Vec::with_capacity(self.sigma_b2.len() * self.horizons.len());
        for &sb in &self.sigma_b2 {
            for &t in &self.horizons {
                let t = usize::try_from(t).with_context(|| format!("T: negative horizon {t}"))?;
                out.push(self.cell(sb, t)?);
            }
        }
        Ok(out)
    }

    pub fn search_spec(&self, params: &SystemParams) -> anyhow::Result<SearchSpec> {
        let mut spec = SearchSpec::default_for(params);
        if let Some(n) = self.search.grid_points {
            spec = spec.with_grid_points(n)?;
        }
        if let Some(tol) = self.search.refine_tol {
            spec = spec.with_refine_tol(tol)?;
        }
        Ok(spec)
    }
}
