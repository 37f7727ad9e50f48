//! Experiment configuration file.
//!
//! ```toml
//! feeder = "feeder.txt"       # optional line list; the bundled 33-bus feeder otherwise
//! scale_factor = 1.0
//! seed = 7                    # root seed, split per purpose
//! out = "results"
//! params = "adaptive.toml"    # certify / simulate
//! adaptive_params = "adaptive.toml"
//! linear_params = "linear.toml"
//!
//! [scenario]   # sinusoidal ranges, see `ScenarioConfig`
//! [cost]       # gamma, v_norm, u_norm
//! [train]      # see `TrainConfig`; `seed` is replaced by the root seed
//! [evaluate]   # scenarios, ratios
//! [simulate]   # controller, clamp, p_index, emit_plot_data
//! [trace]      # frequencies, window: basis for ingesting measured traces
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voltadapt::control::ControllerKind;
use voltadapt::engine::{CostSpec, PIndex};
use voltadapt::grid::{self, FeederModel};
use voltadapt::scenario::ScenarioConfig;
use voltadapt::train::TrainConfig;
use voltadapt::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub feeder: Option<PathBuf>,
    pub scale_factor: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub adaptive_params: Option<PathBuf>,
    pub linear_params: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    pub cost: CostSpec,
    pub train: TrainConfig,
    pub evaluate: EvaluateConfig,
    pub simulate: SimulateConfig,
    pub trace: TraceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            feeder: None,
            scale_factor: 1.0,
            seed: 0,
            out: None,
            params: None,
            adaptive_params: None,
            linear_params: None,
            scenario: ScenarioConfig::default(),
            cost: CostSpec::default(),
            train: TrainConfig::default(),
            evaluate: EvaluateConfig::default(),
            simulate: SimulateConfig::default(),
            trace: TraceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub scenarios: usize,
    pub ratios: Vec<f64>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            scenarios: 100,
            ratios: vec![0.5, 1.0, 1.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub controller: ControllerKind,
    pub clamp: bool,
    pub p_index: PIndex,
    pub emit_plot_data: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            controller: ControllerKind::Adaptive,
            clamp: true,
            p_index: PIndex::Simultaneous,
            emit_plot_data: false,
        }
    }
}

/// Sinusoidal basis shared by every bus when a measured trace is ingested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub frequencies: Vec<f64>,
    pub window: Option<usize>,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            frequencies: vec![0.005 * std::f64::consts::PI],
            window: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.feeder,
            &mut cfg.out,
            &mut cfg.params,
            &mut cfg.adaptive_params,
            &mut cfg.linear_params,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Range checks and existence of referenced input files.
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_factor > 0.0 && self.scale_factor.is_finite()) {
            return Err(Error::Config(format!(
                "scale_factor must be > 0, got {}",
                self.scale_factor
            )));
        }
        self.scenario.validate()?;
        self.cost.validate()?;
        if self.evaluate.ratios.iter().any(|r| !r.is_finite()) {
            return Err(Error::Config("evaluate.ratios must be finite".into()));
        }
        for path in [&self.feeder, &self.params, &self.adaptive_params, &self.linear_params]
            .into_iter()
            .flatten()
        {
            if !path.is_file() {
                return Err(Error::Io {
                    path: path.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
                });
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<FeederModel> {
        let topology = match &self.feeder {
            Some(path) => grid::load_feeder_file(path)?,
            None => grid::ieee33(),
        };
        grid::build_feeder(topology, self.scale_factor)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    /// Canonical text of the settings that influence results; output
    /// locations are excluded so relocated runs hash identically.
    pub fn canonical(&self) -> String {
        let stripped = ExperimentConfig {
            out: None,
            feeder: self.feeder.as_ref().map(|_| PathBuf::from("<file>")),
            params: None,
            adaptive_params: None,
            linear_params: None,
            ..self.clone()
        };
        toml::to_string(&stripped).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("sede = 3").is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "params = \"p.toml\"\nseed = 5\n").unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.params.unwrap(), dir.path().join("p.toml"));
        assert_eq!(cfg.seed, 5);
    }

    #[test]
    fn missing_referenced_file_fails_validation() {
        let cfg = ExperimentConfig {
            feeder: Some(PathBuf::from("/nonexistent/feeder.toml")),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Io { .. })));
    }

    #[test]
    fn canonical_ignores_output_location() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            out: Some(PathBuf::from("elsewhere")),
            ..Default::default()
        };
        assert_eq!(a.canonical(), b.canonical());
    }
}
