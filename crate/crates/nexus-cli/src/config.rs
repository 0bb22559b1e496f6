//! Merged run configuration: a TOML file whose sections mirror the library
//! config structs, plus command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use nexus_core::data::SplitSpec;
use nexus_core::synth::SynthConfig;
use nexus_core::train::TrainConfig;
use nexus_core::NexusConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; when set it replaces the per-section seeds so one knob
    /// controls every random stream.
    pub seed: Option<u64>,
    /// Inverse-distance-weighting exponent for spatial alignment.
    pub idw_power: f64,
    pub model: NexusConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub split: SplitSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            idw_power: 2.0,
            model: NexusConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed_flag: Option<u64>) -> Result<RunConfig, CliError> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Validation(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if seed_flag.is_some() {
            cfg.seed = seed_flag;
        }
        if let Some(seed) = cfg.seed {
            cfg.synth.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.idw_power > 0.0) {
            return Err(CliError::Validation("idw_power must be positive".into()));
        }
        self.model
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.synth
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(())
    }

    /// Echo the fully merged configuration next to the artifacts it
    /// produced, so every run is reconstructible from its output directory.
    pub fn write_effective(&self, out_dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::Validation(format!("cannot serialize config: {e}")))?;
        std::fs::write(out_dir.join("effective_config.toml"), text)?;
        Ok(())
    }
}
