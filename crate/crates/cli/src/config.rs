//! Declarative experiment configuration: one TOML file with a section per
//! subcommand. Every field has an explicit default; the resolved (fully
//! defaulted) config is embedded in the run manifest so any output can be
//! reproduced from the manifest alone.

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub master_seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub analytic: Option<AnalyticConfig>,
    #[serde(default)]
    pub montecarlo: Option<MonteCarloConfig>,
    #[serde(default)]
    pub realdata: Option<RealDataConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticConfig {
    pub p_s: usize,
    #[serde(default)]
    pub p_c: usize,
    pub n: usize,
    /// Fake-feature counts; one output row per (p_f, sigma_v2) pair.
    #[serde(default)]
    pub p_f: Vec<usize>,
    pub sigma_v2: Vec<f64>,
    #[serde(default)]
    pub sigma_hat2: f64,
    /// Per-component power of the shared unknowns: tr(K_x_S) = p_s * power.
    #[serde(default = "one")]
    pub power_x_s: f64,
    #[serde(default = "one")]
    pub power_x_c: f64,
    /// Sampled spectra for the ridge form (used when sigma_hat2 > 0).
    #[serde(default = "default_spectra")]
    pub num_spectra: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    FakeSweep,
    SigmaSweep,
    Decomposition,
    Covariance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    Conditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovSeedPolicy {
    Fixed,
    PerRealization,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub protocol: Protocol,
    pub p_s: usize,
    #[serde(default)]
    pub p_c: usize,
    pub n: usize,
    /// True noise variances; one sweep per value.
    pub sigma_v2: Vec<f64>,
    /// Assumed noise variance of the estimator (all protocols except the
    /// assumed-noise sweep).
    #[serde(default)]
    pub sigma_hat2: f64,
    /// Fake-count axis (fake_sweep / decomposition / covariance); for the
    /// assumed-noise sweep, one sweep per listed count.
    #[serde(default)]
    pub p_f: Vec<usize>,
    /// Assumed-noise axis of the sigma_sweep protocol.
    #[serde(default)]
    pub sigma_hat2_axis: Vec<f64>,
    #[serde(default = "default_m")]
    pub m_r: usize,
    #[serde(default = "default_m")]
    pub m_u: usize,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_spectra")]
    pub num_spectra: usize,
    /// Held-out pairs per realization (decomposition protocol).
    #[serde(default = "default_test_points")]
    pub test_points: usize,
    /// Covariance decay pairs (alpha, alpha_f) for the covariance protocol.
    #[serde(default = "default_alphas")]
    pub alphas: Vec<(f64, f64)>,
    #[serde(default = "default_cov_policy")]
    pub cov_seed_policy: CovSeedPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnOrder {
    AsIs,
    Shuffled,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "one")]
    pub sigma_v2: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealDataConfig {
    pub response_column: String,
    pub train_count: usize,
    pub test_count: usize,
    pub width_axis: Vec<usize>,
    pub sigma_hat2: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_order")]
    pub column_order: ColumnOrder,
    #[serde(default)]
    pub standardize: bool,
    /// When set and the CSV path does not exist, a planted-signal stand-in
    /// of this shape is generated there first.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

fn one() -> f64 {
    1.0
}
fn default_spectra() -> usize {
    200
}
fn default_m() -> usize {
    100
}
fn default_mode() -> Mode {
    Mode::Full
}
fn default_test_points() -> usize {
    200
}
fn default_alphas() -> Vec<(f64, f64)> {
    vec![(0.0, 0.0), (0.0, 20.0), (1.0, 0.0), (1.0, 20.0)]
}
fn default_cov_policy() -> CovSeedPolicy {
    CovSeedPolicy::Fixed
}
fn default_repeats() -> usize {
    1000
}
fn default_order() -> ColumnOrder {
    ColumnOrder::AsIs
}

impl Config {
    pub fn load(path: &std::path::Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| {
            // toml errors carry line/column spans.
            CliError::Config(format!("{}: {e}", path.display()))
        })
    }

    /// The resolved config as TOML, with every default made explicit by
    /// round-tripping through the typed structs.
    pub fn resolved_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("serialize: {e}")))
    }
}
