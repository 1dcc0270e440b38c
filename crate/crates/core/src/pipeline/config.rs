use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::DoubleIntegrator;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowTrainConfig, NoiseConfig};
use crate::policy::SacConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Expert demonstrations collected by `collect --kind expert`.
    pub n_expert: usize,
    /// Trajectories the flow is trained on; the rest are held out for
    /// calibration. `None` uses all of them.
    pub subset: Option<usize>,
    pub n_noisy: usize,
    /// Upper bound of the per-trajectory action-noise level.
    pub l_max: f64,
    pub n_random: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_expert: 150,
            subset: Some(40),
            n_noisy: 1000,
            l_max: 1.5,
            n_random: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub h_eval: f64,
    /// Samples per noise level in the support sweep.
    pub sweep_samples: usize,
    pub sweep_bins: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            h_eval: 0.0,
            sweep_samples: 10_000,
            sweep_bins: 40,
        }
    }
}

/// Everything one run needs. Every field has a default, so `{}` is a
/// complete configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: String,
    pub seed: u64,
    pub horizon: usize,
    /// Environment steps of ground-truth SAC for the expert.
    pub expert_steps: usize,
    pub dataset: DatasetConfig,
    pub noise: NoiseConfig,
    pub flow: FlowConfig,
    pub flow_train: FlowTrainConfig,
    /// Imitation agent settings; the expert shares them except for
    /// `total_steps`.
    pub sac: SacConfig,
    pub calibration: CalibrationConfig,
    pub output_dir: PathBuf,
    pub run_id: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "DoubleIntegrator1D".into(),
            seed: 0,
            horizon: 200,
            expert_steps: 100_000,
            dataset: DatasetConfig::default(),
            noise: NoiseConfig::default(),
            flow: FlowConfig::default(),
            flow_train: FlowTrainConfig::default(),
            sac: SacConfig::default(),
            calibration: CalibrationConfig::default(),
            output_dir: PathBuf::from("runs"),
            run_id: None,
        }
    }
}

fn prefixed(section: &str, e: Error) -> Error {
    match e {
        Error::Config { key, reason } => Error::Config {
            key: format!("{section}.{key}"),
            reason,
        },
        other => other,
    }
}

impl RunConfig {
    pub fn environment(&self) -> Result<DoubleIntegrator> {
        Ok(DoubleIntegrator::by_name(&self.env)
            .map_err(|_| Error::Config {
                key: "env".into(),
                reason: format!("unknown environment `{}`", self.env),
            })?
            .with_horizon(self.horizon))
    }

    /// Checks every section; errors name the offending key, prefixed by its
    /// section (for example `sac.alpha`).
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                key: key.into(),
                reason,
            })
        };
        if self.horizon == 0 {
            return bad("horizon", "must be at least 1".into());
        }
        self.environment()?;
        if self.expert_steps == 0 {
            return bad("expert_steps", "must be at least 1".into());
        }
        let d = &self.dataset;
        if let Some(k) = d.subset {
            if k == 0 || k > d.n_expert {
                return bad("dataset.subset", format!("must lie in 1..={}, got {k}", d.n_expert));
            }
        }
        if d.n_expert == 0 {
            return bad("dataset.n_expert", "must be at least 1".into());
        }
        if !(d.l_max > 0.0 && d.l_max.is_finite()) {
            return bad("dataset.l_max", format!("must be positive, got {}", d.l_max));
        }
        self.noise.validate().map_err(|e| prefixed("noise", e))?;
        self.flow.validate().map_err(|e| prefixed("flow", e))?;
        self.flow_train.validate().map_err(|e| prefixed("flow_train", e))?;
        self.sac.validate().map_err(|e| prefixed("sac", e))?;
        let c = &self.calibration;
        if !(c.h_eval >= self.noise.h_min && c.h_eval <= self.noise.h_max) {
            return bad(
                "calibration.h_eval",
                format!(
                    "must lie in [{}, {}], got {}",
                    self.noise.h_min, self.noise.h_max, c.h_eval
                ),
            );
        }
        if c.sweep_samples == 0 || c.sweep_bins == 0 {
            return bad("calibration.sweep_samples", "sweep sizes must be positive".into());
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return bad("run_id", format!("`{id}` is not a plain directory name"));
            }
        }
        if self.output_dir.exists() && !self.output_dir.is_dir() {
            return bad(
                "output_dir",
                format!("{} exists and is not a directory", self.output_dir.display()),
            );
        }
        Ok(())
    }

    /// Expert SAC settings: the shared section with the expert step budget.
    pub fn expert_sac(&self) -> SacConfig {
        SacConfig {
            total_steps: self.expert_steps,
            ..self.sac.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Parses and validates a JSON configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        let key = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.starts_with("unknown field"))
            .unwrap_or("<json>")
            .to_string();
        Error::Config { key, reason: msg }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            what: "configuration".into(),
            path: path.to_path_buf(),
        });
    }
    parse_config(&std::fs::read_to_string(path)?)
}
