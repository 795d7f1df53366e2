//! Run configuration: a TOML file whose keys can each be overridden by a
//! command-line flag of the same name.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use panelfx::changepoint::Criterion;
use panelfx::ingest::{MissingPolicy, RepairPolicy, DEFAULT_COVARIATES};
use panelfx::selection::{SeriesBasis, Thresholds};
use panelfx::synth::OuterOptions;
use panelfx::TreatmentSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScModeName {
    Fixed,
    Nested,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScPool {
    /// Screened candidates that have covariates.
    Screened,
    /// Every non-treated unit with covariates.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub case_csv: Option<PathBuf>,
    pub covariate_csv: Option<PathBuf>,
    pub poverty_override: Option<PathBuf>,
    #[serde(default)]
    pub state: Option<String>,
    pub treated_unit: Option<String>,
    pub issue_date: Option<NaiveDate>,
    pub effective_start: Option<NaiveDate>,
    pub effective_end: Option<NaiveDate>,
    #[serde(default = "d_lag")]
    pub post_lag_days: u32,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_r2")]
    pub min_adj_r2: f64,
    #[serde(default = "d_dev")]
    pub max_abs_dev: Option<f64>,
    #[serde(default = "d_one")]
    pub rate_scale: f64,
    #[serde(default = "d_basis")]
    pub knot_basis: String,
    #[serde(default = "d_criterion")]
    pub criterion: String,
    #[serde(default = "d_knots")]
    pub max_knots: usize,
    #[serde(default = "d_repair")]
    pub repair: String,
    #[serde(default)]
    pub missing_covariates: MissingPolicy,
    #[serde(default)]
    pub include_post: bool,
    #[serde(default = "d_single")]
    pub single_donors: usize,
    #[serde(default = "d_alpha")]
    pub glm_alpha: f64,
    #[serde(default = "d_true")]
    pub glm_offset: bool,
    #[serde(default = "d_covariates")]
    pub covariates: Vec<String>,
    #[serde(default = "d_mode")]
    pub sc_mode: ScModeName,
    #[serde(default = "d_pool")]
    pub sc_pool: ScPool,
    #[serde(default = "d_budget")]
    pub sc_budget: usize,
    #[serde(default = "d_restarts")]
    pub sc_restarts: usize,
    #[serde(default = "d_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_cases")]
    pub selftest_cases: usize,
}

fn d_lag() -> u32 {
    7
}
fn d_alpha() -> f64 {
    0.05
}
fn d_r2() -> f64 {
    0.75
}
fn d_dev() -> Option<f64> {
    Some(1.0)
}
fn d_one() -> f64 {
    1.0
}
fn d_basis() -> String {
    "counts".into()
}
fn d_criterion() -> String {
    "bic".into()
}
fn d_knots() -> usize {
    3
}
fn d_repair() -> String {
    "clamp".into()
}
fn d_single() -> usize {
    2
}
fn d_true() -> bool {
    true
}
fn d_covariates() -> Vec<String> {
    DEFAULT_COVARIATES.iter().map(|s| s.to_string()).collect()
}
fn d_mode() -> ScModeName {
    ScModeName::Fixed
}
fn d_pool() -> ScPool {
    ScPool::Screened
}
fn d_budget() -> usize {
    400
}
fn d_restarts() -> usize {
    2
}
fn d_out() -> PathBuf {
    PathBuf::from("out")
}
fn d_cases() -> usize {
    100
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::Value::Table(toml::Table::new())
            .try_into()
            .expect("every field has a default")
    }
}

/// Flags mirroring the configuration keys.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    #[arg(long = "case_csv")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub case_csv: Option<PathBuf>,
    #[arg(long = "covariate_csv")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariate_csv: Option<PathBuf>,
    #[arg(long = "poverty_override")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poverty_override: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
    #[arg(long = "treated_unit")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub treated_unit: Option<String>,
    #[arg(long = "issue_date")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub issue_date: Option<NaiveDate>,
    #[arg(long = "effective_start")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effective_start: Option<NaiveDate>,
    #[arg(long = "effective_end")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effective_end: Option<NaiveDate>,
    #[arg(long = "post_lag_days")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_lag_days: Option<u32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[arg(long = "min_adj_r2")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_adj_r2: Option<f64>,
    #[arg(long = "max_abs_dev")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_abs_dev: Option<f64>,
    #[arg(long = "rate_scale")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_scale: Option<f64>,
    /// counts, rates or rates:<scale>
    #[arg(long = "knot_basis")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knot_basis: Option<String>,
    /// bic, aic or fixed:<penalty>
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub criterion: Option<String>,
    #[arg(long = "max_knots")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_knots: Option<usize>,
    /// clamp or fail
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repair: Option<String>,
    #[arg(long = "missing_covariates", value_parser = ["drop", "fail"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub missing_covariates: Option<String>,
    #[arg(long = "include_post")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub include_post: Option<bool>,
    #[arg(long = "single_donors")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub single_donors: Option<usize>,
    #[arg(long = "glm_alpha")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub glm_alpha: Option<f64>,
    #[arg(long = "glm_offset")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub glm_offset: Option<bool>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    #[arg(long = "sc_mode")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sc_mode: Option<ScModeName>,
    #[arg(long = "sc_pool")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sc_pool: Option<ScPool>,
    #[arg(long = "sc_budget")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sc_budget: Option<usize>,
    #[arg(long = "sc_restarts")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sc_restarts: Option<usize>,
    #[arg(long = "output_dir")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long = "selftest_cases")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selftest_cases: Option<usize>,
}

/// Bare TOML dates become strings so they deserialize like quoted ones.
fn stringify_dates(table: &mut toml::Table) {
    for (_, v) in table.iter_mut() {
        if let toml::Value::Datetime(d) = v {
            *v = toml::Value::String(d.to_string());
        }
    }
}

/// Parse configuration text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
    stringify_dates(&mut table);
    let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
    cfg.check()?;
    Ok(cfg)
}

/// Read the file (if any), then apply the flags on top.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let mut t: toml::Table = text.parse().with_context(|| format!("{} is not valid TOML", p.display()))?;
            stringify_dates(&mut t);
            // resolve relative paths in the file against its directory
            let base = p.parent().unwrap_or_else(|| Path::new("."));
            for key in ["case_csv", "covariate_csv", "poverty_override", "output_dir"] {
                if let Some(toml::Value::String(s)) = t.get_mut(key) {
                    let pb = PathBuf::from(&*s);
                    if pb.is_relative() && !base.as_os_str().is_empty() {
                        *s = base.join(pb).to_string_lossy().into_owned();
                    }
                }
            }
            t
        }
        None => toml::Table::new(),
    };
    let flags = toml::Table::try_from(overrides).context("encoding flags")?;
    for (k, v) in flags {
        table.insert(k, v);
    }
    let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
    cfg.check()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.glm_alpha) {
            bail!("alpha and glm_alpha must lie in [0, 1]");
        }
        if !(self.rate_scale.is_finite() && self.rate_scale > 0.0) {
            bail!("rate_scale must be positive");
        }
        if self.max_abs_dev.is_some_and(|d| !(d > 0.0)) {
            bail!("max_abs_dev must be positive");
        }
        if self.sc_budget < 1 {
            bail!("sc_budget must be at least 1");
        }
        self.basis()?;
        self.knot_criterion()?;
        self.repair_policy()?;
        Ok(())
    }

    pub fn spec(&self) -> Result<TreatmentSpec> {
        let (Some(unit), Some(start), Some(end)) = (&self.treated_unit, self.effective_start, self.effective_end) else {
            bail!("treated_unit, effective_start and effective_end must be configured");
        };
        Ok(TreatmentSpec::new(
            unit.clone(),
            self.issue_date.unwrap_or(start),
            start,
            end,
            self.post_lag_days,
        )?)
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            alpha: self.alpha,
            min_adj_r2: self.min_adj_r2,
            max_abs_dev: None,
        }
    }

    pub fn basis(&self) -> Result<SeriesBasis> {
        Ok(self.knot_basis.parse()?)
    }

    pub fn knot_criterion(&self) -> Result<Criterion> {
        Ok(self.criterion.parse()?)
    }

    pub fn repair_policy(&self) -> Result<RepairPolicy> {
        Ok(self.repair.parse()?)
    }

    pub fn outer_options(&self) -> OuterOptions {
        OuterOptions {
            budget: self.sc_budget,
            restarts: self.sc_restarts,
            seed: self.seed,
            inner_tol: 1e-10,
        }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}
