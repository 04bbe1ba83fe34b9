use std::path::{Path, PathBuf};

use casemix::covariance::Averaging;
use casemix::meta::{McmcSettings, MetaModelSpec};
use casemix::{EffectScale, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMethod {
    #[default]
    Weighting,
    Correlation,
}

/// How the variance step evaluates the meat of the sandwich.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    /// Closed-form moments of each aggregated trial.
    #[default]
    Moments,
    /// Estimating-function rows of the pseudo participant data.
    PseudoRows,
}

/// Analysis configuration, read from TOML. Relative paths are resolved
/// against the directory holding the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub ipd: Vec<PathBuf>,
    #[serde(default)]
    pub aggregated: Vec<PathBuf>,
    /// Moment basis, e.g. `"1, l1, l2"`; main effects when absent.
    pub basis: Option<String>,
    /// Predictor of the weight model; equal to `basis` when absent.
    pub predictor: Option<String>,
    #[serde(default = "default_truncation")]
    pub truncation: f64,
    #[serde(default = "default_scale")]
    pub scale: EffectScale,
    #[serde(default)]
    pub covariance: CovarianceMethod,
    #[serde(default)]
    pub averaging: Averaging,
    #[serde(default)]
    pub variance: VarianceMethod,
    #[serde(default)]
    pub skip_infeasible: bool,
    #[serde(default)]
    pub mcmc: McmcSettings,
    #[serde(default)]
    pub model: MetaModelSpec,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn default_truncation() -> f64 {
    0.95
}

fn default_scale() -> EffectScale {
    EffectScale::LogRelativeRisk
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ipd: Vec::new(),
            aggregated: Vec::new(),
            basis: None,
            predictor: None,
            truncation: default_truncation(),
            scale: default_scale(),
            covariance: CovarianceMethod::default(),
            averaging: Averaging::default(),
            variance: VarianceMethod::default(),
            skip_infeasible: false,
            mcmc: McmcSettings::default(),
            model: MetaModelSpec::default(),
            seed: None,
            out: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.ipd.iter_mut().for_each(resolve);
        cfg.aggregated.iter_mut().for_each(resolve);
        if let Some(out) = cfg.out.as_mut() {
            resolve(out);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.truncation > 0.0 && self.truncation <= 1.0) {
            return Err(Error::Validation(format!(
                "truncation percentile must lie in (0, 1], got {}",
                self.truncation
            )));
        }
        if self.ipd.is_empty() {
            return Err(Error::Validation("config lists no IPD files".into()));
        }
        for p in self.ipd.iter().chain(&self.aggregated) {
            if !p.is_file() {
                return Err(Error::Validation(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg: PipelineConfig = toml::from_str("ipd = [\"a.csv\"]\n").unwrap();
        assert_eq!(cfg.truncation, 0.95);
        assert_eq!(cfg.scale, EffectScale::LogRelativeRisk);
        assert_eq!(cfg.mcmc.chains, 2);
        assert_eq!(cfg.variance, VarianceMethod::Moments);
    }

    #[test]
    fn nested_tables_parse() {
        let cfg: PipelineConfig = toml::from_str(
            "scale = \"rd\"\nvariance = \"pseudo_rows\"\n[mcmc]\nadapt = 50\n[model]\ndiagonal = \"dedupe\"\n",
        )
        .unwrap();
        assert_eq!(cfg.scale, EffectScale::RiskDifference);
        assert_eq!(cfg.mcmc.adapt, 50);
        assert_eq!(cfg.mcmc.samples, 1000);
        assert_eq!(cfg.variance, VarianceMethod::PseudoRows);
    }

    #[test]
    fn unknown_keys_and_bad_percentiles_are_rejected() {
        assert!(toml::from_str::<PipelineConfig>("trunc = 0.9").is_err());
        let cfg = PipelineConfig { truncation: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
