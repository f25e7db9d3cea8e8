//! Experiment configuration: a JSON document with every default filled in
//! before the run starts.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use cipstab::stabilization::StabParams;
use cipstab::time_integration::TimeStepperConfig;
use cipstab::weights::WeightSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Smoke,
    Convergence,
    Shock,
    SwitchViz,
    Localisation,
    StabilityDiag,
}

impl Experiment {
    fn needs_rates(self) -> bool {
        matches!(self, Experiment::Convergence | Experiment::Localisation)
    }
}

/// Stabilisation settings as written in the file; `u_ref` falls back to the
/// experiment's own default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabSection {
    pub sigma0: Option<f64>,
    pub sigma1: Option<f64>,
    pub alpha: Option<f64>,
    pub u_ref: Option<f64>,
    pub rho1: Option<u8>,
    pub rho2: Option<u8>,
}

impl StabSection {
    pub fn resolve(&self, u_ref_default: f64) -> StabParams {
        let d = StabParams::default();
        StabParams {
            sigma0: self.sigma0.unwrap_or(d.sigma0),
            sigma1: self.sigma1.unwrap_or(d.sigma1),
            alpha: self.alpha.unwrap_or(d.alpha),
            u_ref: self.u_ref.unwrap_or(u_ref_default),
            rho1: self.rho1.unwrap_or(d.rho1),
            rho2: self.rho2.unwrap_or(d.rho2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Cells per unit length, one run per entry.
    #[serde(default)]
    pub mesh_sizes: Vec<usize>,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default)]
    pub stab: StabSection,
    #[serde(default)]
    pub weight: Option<WeightSpec>,
    #[serde(default)]
    pub time: Option<TimeStepperConfig>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Coefficient of the residual term in the weighted stability test function.
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Extra exponents for experiments comparing switch sharpness.
    #[serde(default)]
    pub alphas: Vec<f64>,
}

fn default_degree() -> usize {
    2
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_theta() -> f64 {
    0.1
}

impl ExperimentConfig {
    pub fn smoke() -> Self {
        Self {
            experiment: Experiment::Smoke,
            mesh_sizes: Vec::new(),
            degree: default_degree(),
            stab: StabSection::default(),
            weight: None,
            time: None,
            output_dir: default_output(),
            seed: 0,
            theta: default_theta(),
            alphas: Vec::new(),
        }
    }

    /// Fills experiment-dependent defaults and checks every section.
    pub fn finalize(mut self) -> anyhow::Result<Self> {
        if self.mesh_sizes.is_empty() {
            self.mesh_sizes = match self.experiment {
                Experiment::Smoke => vec![8],
                Experiment::Convergence => vec![8, 16, 32, 64],
                Experiment::Shock | Experiment::SwitchViz => vec![48],
                Experiment::Localisation => vec![16, 32, 64],
                Experiment::StabilityDiag => vec![8, 16],
            };
        }
        if self.time.is_none() {
            let (t_end, snaps) = match self.experiment {
                Experiment::Smoke => (0.1, vec![]),
                Experiment::Convergence => (0.5, vec![]),
                Experiment::Shock => (0.375, vec![0.05, 0.375]),
                Experiment::SwitchViz => (0.05, vec![0.05]),
                Experiment::Localisation => (0.25, vec![]),
                Experiment::StabilityDiag => (0.1, vec![]),
            };
            self.time = Some(TimeStepperConfig { t_end, snapshot_times: snaps, ..TimeStepperConfig::default() });
        }
        if self.alphas.is_empty() {
            self.alphas = match self.experiment {
                Experiment::Localisation | Experiment::SwitchViz => vec![1.0, 4.0],
                _ => vec![self.stab.alpha.unwrap_or(StabParams::default().alpha)],
            };
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(1..=3).contains(&self.degree) {
            bail!("degree must be 1, 2 or 3, got {}", self.degree);
        }
        if self.mesh_sizes.iter().any(|&n| n < 2) {
            bail!("mesh sizes must be >= 2, got {:?}", self.mesh_sizes);
        }
        if self.experiment.needs_rates() {
            if self.mesh_sizes.len() < 3 {
                bail!("{:?} needs at least 3 mesh sizes, got {}", self.experiment, self.mesh_sizes.len());
            }
            if self.mesh_sizes.windows(2).any(|w| w[1] <= w[0]) {
                bail!("mesh sizes must be strictly increasing, got {:?}", self.mesh_sizes);
            }
        }
        self.stab.resolve(1.0).validate().context("in section \"stab\"")?;
        for &a in &self.alphas {
            StabParams { alpha: a, ..self.stab.resolve(1.0) }.validate().context("in \"alphas\"")?;
        }
        if let Some(w) = &self.weight {
            w.validate().context("in section \"weight\"")?;
        }
        if let Some(t) = &self.time {
            t.validate().context("in section \"time\"")?;
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            bail!("theta must be >= 0, got {}", self.theta);
        }
        Ok(())
    }

    pub fn time(&self) -> &TimeStepperConfig {
        self.time.as_ref().expect("finalized config has a time section")
    }
}

/// Parses and validates a config document.
pub fn parse_config_str(text: &str) -> anyhow::Result<ExperimentConfig> {
    let raw: ExperimentConfig = serde_json::from_str(text).map_err(|e| anyhow::anyhow!("line {}, column {}: {e}", e.line(), e.column()))?;
    raw.finalize()
}

pub fn parse_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config_str(&text).with_context(|| format!("in {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config_str(r#"{"experiment": "smoke"}"#).unwrap();
        assert_eq!(c.time().cfl, 0.3);
        assert_eq!(c.theta, 0.1);
        assert_eq!(c.stab.resolve(0.5).alpha, 4.0);
        assert_eq!(c.stab.resolve(0.625).u_ref, 0.625);
        assert_eq!(c.degree, 2);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config_str("{\"experiment\": \"shock\",\n \"stab\": {\"sigma2\": 0.1}}").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("sigma2"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn negative_alpha_rejected() {
        let err = parse_config_str(r#"{"experiment": "shock", "stab": {"alpha": -1}}"#).unwrap_err();
        assert!(format!("{err:#}").contains("alpha"));
    }

    #[test]
    fn rate_experiments_need_increasing_sizes() {
        assert!(parse_config_str(r#"{"experiment": "convergence", "mesh_sizes": [8, 16]}"#).is_err());
        assert!(parse_config_str(r#"{"experiment": "convergence", "mesh_sizes": [8, 32, 16]}"#).is_err());
        assert!(parse_config_str(r#"{"experiment": "convergence", "mesh_sizes": [8, 16, 32]}"#).is_ok());
    }

    #[test]
    fn finalized_config_round_trips() {
        let c = parse_config_str(r#"{"experiment": "localisation"}"#).unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), c);
    }
}
