use std::path::{Path, PathBuf};

use jade_core::engine::{Engine, JadeConfig, LambdaGamma, Method};
use jade_core::simulate::Preset;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One JSON document drives every subcommand; flags override file
/// values, and the effective document is echoed into the outputs.
/// Every field has a default, unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Simulation preset: the ten-process cubic network observed under
    /// one of the three families.
    pub preset: Preset,
    /// Observation times per simulated dataset.
    pub n: usize,
    /// Replicates per time point; default is the preset's convention.
    pub replicates: Option<usize>,
    /// Signal-to-noise ratio of Gaussian observations; ignored by the
    /// other families.
    pub snr: Option<f64>,
    /// Base seed: simulation draws and replication seeds start here.
    pub seed: u64,
    /// Number of consecutive seeds a replication study runs.
    pub seeds: usize,
    pub jade: JadeConfig,
    pub lambda_grid: LambdaGridSpec,
    /// Output directory for all artifacts.
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Gaussian,
            n: 100,
            replicates: None,
            snr: None,
            seed: 1,
            seeds: 1,
            jade: JadeConfig::default(),
            lambda_grid: LambdaGridSpec::default(),
            out: PathBuf::from("runs"),
        }
    }
}

/// Penalty grid for tuning: either explicit values, or `count`
/// log-spaced points from `min_ratio` times the shrink-everything
/// ceiling up to the ceiling itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaGridSpec {
    pub count: usize,
    pub min_ratio: f64,
    pub values: Option<Vec<f64>>,
}

impl Default for LambdaGridSpec {
    fn default() -> Self {
        Self { count: 30, min_ratio: 1e-3, values: None }
    }
}

impl LambdaGridSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(values) = &self.values {
            if values.is_empty() {
                return Err(CliError::Usage("lambda_grid.values must be nonempty".into()));
            }
            if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(CliError::Usage(
                    "lambda_grid.values must be finite and nonnegative".into(),
                ));
            }
            return Ok(());
        }
        if self.count == 0 {
            return Err(CliError::Usage("lambda_grid.count must be positive".into()));
        }
        if !(self.min_ratio > 0.0 && self.min_ratio <= 1.0) {
            return Err(CliError::Usage("lambda_grid.min_ratio must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Concrete grid for one engine, largest-penalty anchor computed
    /// from its data.
    pub fn build(&self, engine: &Engine) -> Result<Vec<f64>, CliError> {
        if let Some(values) = &self.values {
            return Ok(values.clone());
        }
        let ceiling = engine.lambda_gamma_ceiling()?;
        if !(ceiling > 0.0) {
            return Ok(vec![0.0]);
        }
        if self.count == 1 {
            return Ok(vec![ceiling]);
        }
        let lo = (self.min_ratio * ceiling).ln();
        let hi = ceiling.ln();
        Ok((0..self.count)
            .map(|i| (lo + (hi - lo) * i as f64 / (self.count - 1) as f64).exp())
            .collect())
    }
}

/// Command-line values that take precedence over the config document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub family: Option<Preset>,
    pub lambda_theta: Option<f64>,
    pub lambda_gamma: Option<LambdaGamma>,
    pub out: Option<PathBuf>,
    pub method: Option<Method>,
}

impl ExperimentConfig {
    /// Read a config document, or produce the defaults when no path is
    /// given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {}", path.display(), e))
        })?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::Usage(format!("invalid config {}: {}", path.display(), e))
        })
    }

    pub fn apply(&mut self, flags: &Overrides) {
        if let Some(seed) = flags.seed {
            self.seed = seed;
        }
        if let Some(family) = flags.family {
            self.preset = family;
        }
        if let Some(lt) = flags.lambda_theta {
            self.jade.lambda_theta = lt;
        }
        if let Some(lg) = flags.lambda_gamma {
            self.jade.lambda_gamma = lg;
        }
        if let Some(out) = &flags.out {
            self.out = out.clone();
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.n < 2 {
            return Err(CliError::Usage("n must be at least 2".into()));
        }
        if self.seeds == 0 {
            return Err(CliError::Usage("seeds must be at least 1".into()));
        }
        if self.replicates == Some(0) {
            return Err(CliError::Usage("replicates must be at least 1".into()));
        }
        if let Some(snr) = self.snr {
            if !(snr > 0.0) || !snr.is_finite() {
                return Err(CliError::Usage("snr must be positive and finite".into()));
            }
        }
        self.jade.validate()?;
        self.lambda_grid.validate()
    }

    pub fn resolved_replicates(&self) -> usize {
        self.replicates.unwrap_or_else(|| self.preset.default_replicates())
    }

    /// Noise level passed to the sampler: Gaussian data defaults to
    /// signal-to-noise 25 when unset, other families take none.
    pub fn resolved_snr(&self) -> Option<f64> {
        match self.preset {
            Preset::Gaussian => Some(self.snr.unwrap_or(25.0)),
            _ => self.snr,
        }
    }
}

/// Parse a `--lambda-gamma` argument: a nonnegative number or "auto".
pub fn parse_lambda_gamma(text: &str) -> Result<LambdaGamma, CliError> {
    if text == "auto" {
        return Ok(LambdaGamma::Auto);
    }
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite() && *v >= 0.0)
        .map(LambdaGamma::Value)
        .ok_or_else(|| {
            CliError::Usage(format!("--lambda-gamma expects a nonnegative number or \"auto\", got {text:?}"))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_document_is_the_default() {
        let c: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"typo": 1}"#).is_err());
        assert!(
            serde_json::from_str::<ExperimentConfig>(r#"{"lambda_grid": {"cnt": 3}}"#).is_err()
        );
    }

    #[test]
    fn overrides_take_precedence() {
        let mut c = ExperimentConfig::default();
        c.apply(&Overrides {
            seed: Some(9),
            family: Some(Preset::Poisson),
            lambda_theta: Some(2.5),
            lambda_gamma: Some(LambdaGamma::Value(0.1)),
            out: Some(PathBuf::from("elsewhere")),
            method: None,
        });
        assert_eq!(c.seed, 9);
        assert_eq!(c.preset, Preset::Poisson);
        assert_eq!(c.jade.lambda_theta, 2.5);
        assert_eq!(c.jade.lambda_gamma, LambdaGamma::Value(0.1));
        assert_eq!(c.out, PathBuf::from("elsewhere"));
    }

    #[test]
    fn replicate_and_snr_resolution_follow_the_preset() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.resolved_replicates(), 1);
        assert_eq!(c.resolved_snr(), Some(25.0));
        c.preset = Preset::Poisson;
        assert_eq!(c.resolved_replicates(), 10);
        assert_eq!(c.resolved_snr(), None);
        c.preset = Preset::Binomial;
        assert_eq!(c.resolved_replicates(), 40);
        c.replicates = Some(3);
        assert_eq!(c.resolved_replicates(), 3);
        c.snr = Some(10.0);
        assert_eq!(c.resolved_snr(), Some(10.0));
    }

    #[test]
    fn lambda_gamma_flag_parsing() {
        assert_eq!(parse_lambda_gamma("auto").unwrap(), LambdaGamma::Auto);
        assert_eq!(parse_lambda_gamma("0.5").unwrap(), LambdaGamma::Value(0.5));
        assert!(parse_lambda_gamma("-1").is_err());
        assert!(parse_lambda_gamma("never").is_err());
    }

    #[test]
    fn grid_spec_validation() {
        let mut g = LambdaGridSpec::default();
        g.validate().unwrap();
        g.count = 0;
        assert!(g.validate().is_err());
        g = LambdaGridSpec { count: 5, min_ratio: 0.0, values: None };
        assert!(g.validate().is_err());
        g = LambdaGridSpec { values: Some(vec![]), ..LambdaGridSpec::default() };
        assert!(g.validate().is_err());
        g = LambdaGridSpec { values: Some(vec![0.1, f64::NAN]), ..LambdaGridSpec::default() };
        assert!(g.validate().is_err());
        g = LambdaGridSpec { values: Some(vec![0.0, 0.1]), ..LambdaGridSpec::default() };
        g.validate().unwrap();
    }
}
