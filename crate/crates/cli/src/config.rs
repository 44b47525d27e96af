use std::path::{Path, PathBuf};

use chunkexec::dataset::TaskMix;
use chunkexec::ensemble::{AdaHorizonParams, Ensembler};
use chunkexec::kinematics::KinematicChain;
use chunkexec::policy::TrainConfig;
use chunkexec::sim::{PerturbSpec, SimConfig};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// Conditions of the perturbation grid, in table order.
pub const ALL_CONDITIONS: [&str; 5] = [
    "original",
    "ood_task",
    "ood_env",
    "static_distractors",
    "dynamic_distractor",
];

/// Everything one experiment needs. `seed` is the master seed: it drives
/// data generation, training and episode seeds; `train.seed` is overwritten
/// with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub ensemble: EnsembleSection,
    pub sim: SimConfig,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub latency: LatencySection,
    pub kinematics: KinematicsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsSection::default(),
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            ensemble: EnsembleSection::default(),
            sim: SimConfig::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
            latency: LatencySection::default(),
            kinematics: KinematicsSection::default(),
        }
    }
}

/// Relative paths resolve against the `--out` directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            dataset: "dataset".into(),
            checkpoint: "policy.ckpt".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub num_demos: usize,
    pub task_mix: TaskMix,
    pub execution_noise: f64,
    pub perturbed_start_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            num_demos: chunkexec::dataset::DEFAULT_NUM_DEMOS,
            task_mix: TaskMix::Uniform,
            execution_noise: 0.0,
            perturbed_start_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub adahorizon: AdaHorizonParams,
    pub temporal_decay: f64,
    pub confidence_theta: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            adahorizon: AdaHorizonParams::default(),
            temporal_decay: Ensembler::DEFAULT_TEMPORAL_DECAY,
            confidence_theta: Ensembler::DEFAULT_CONFIDENCE_THETA,
        }
    }
}

impl EnsembleSection {
    /// Builds a configured ensembler from its table name.
    pub fn ensembler(&self, name: &str) -> Result<Ensembler, HarnessError> {
        let e = match name {
            "adahorizon" => Ensembler::AdaHorizon(self.adahorizon.clone()),
            "temporal" => Ensembler::TemporalEnsemble {
                decay: self.temporal_decay,
            },
            "confidence_fusion" => Ensembler::ConfidenceFusion {
                theta: self.confidence_theta,
            },
            other => Ensembler::from_name(other, &self.adahorizon)
                .ok_or_else(|| HarnessError::Config(format!("unknown ensembler {other:?}")))?,
        };
        e.validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(e)
    }

    /// The six comparison methods in table order.
    pub fn suite(&self) -> Vec<Ensembler> {
        let mut out = Ensembler::benchmark_suite(&self.adahorizon);
        for e in out.iter_mut() {
            match e {
                Ensembler::TemporalEnsemble { decay } => *decay = self.temporal_decay,
                Ensembler::ConfidenceFusion { theta } => *theta = self.confidence_theta,
                _ => {}
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub conditions: Vec<String>,
    pub methods: Vec<String>,
    /// Episodes per (condition, method) cell.
    pub episodes: usize,
    /// Nominal policy forward time used for the rate columns, so tables do
    /// not depend on the machine they were produced on.
    pub forward_ms: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            conditions: ALL_CONDITIONS.iter().map(|s| s.to_string()).collect(),
            methods: vec![
                "fixed_cont".into(),
                "fixed_disc".into(),
                "adahorizon".into(),
            ],
            episodes: 50,
            forward_ms: 10.0,
        }
    }
}

/// Suite for the six-way ensembler comparison: every listed condition with
/// Gaussian execution noise added to the sim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub conditions: Vec<String>,
    pub action_noise: f64,
    /// Episodes per condition and method.
    pub episodes: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            conditions: ALL_CONDITIONS.iter().map(|s| s.to_string()).collect(),
            action_noise: 0.004,
            episodes: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencySection {
    pub iterations: usize,
    pub warmup: usize,
    pub forward_iterations: usize,
    pub chunk_len: usize,
}

impl Default for LatencySection {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            warmup: 100,
            forward_iterations: 2_000,
            chunk_len: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KinematicsSection {
    pub targets: usize,
    pub restarts: usize,
    pub chain: KinematicChain,
    /// Tip target (mm) expected to be out of reach.
    pub unreachable_probe_mm: [f64; 3],
}

impl Default for KinematicsSection {
    fn default() -> Self {
        Self {
            targets: 1000,
            restarts: 8,
            chain: KinematicChain::default(),
            unreachable_probe_mm: [400.0, 300.0, 200.0],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg_err = |e: chunkexec::Error| HarnessError::Config(e.to_string());
        if self.dataset.num_demos == 0 {
            return Err(HarnessError::Config(
                "dataset.num_demos must be at least 1".into(),
            ));
        }
        if !(self.dataset.execution_noise >= 0.0) {
            return Err(HarnessError::Config(
                "dataset.execution_noise must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.dataset.perturbed_start_fraction) {
            return Err(HarnessError::Config(
                "dataset.perturbed_start_fraction must lie in [0, 1]".into(),
            ));
        }
        self.train.validate().map_err(cfg_err)?;
        self.ensemble.adahorizon.validate().map_err(cfg_err)?;
        self.sim.validate().map_err(cfg_err)?;
        for c in self.eval.conditions.iter().chain(&self.bench.conditions) {
            if PerturbSpec::from_condition(c).is_none() {
                return Err(HarnessError::Config(format!("unknown condition {c:?}")));
            }
        }
        for m in &self.eval.methods {
            self.ensemble.ensembler(m)?;
        }
        for e in self.ensemble.suite() {
            e.validate().map_err(cfg_err)?;
        }
        if self.eval.episodes == 0 || self.bench.episodes == 0 {
            return Err(HarnessError::Config(
                "episode counts must be at least 1".into(),
            ));
        }
        if !(self.eval.forward_ms > 0.0) {
            return Err(HarnessError::Config(
                "eval.forward_ms must be positive".into(),
            ));
        }
        if !(self.bench.action_noise >= 0.0) {
            return Err(HarnessError::Config(
                "bench.action_noise must be non-negative".into(),
            ));
        }
        if self.latency.chunk_len == 0 {
            return Err(HarnessError::Config(
                "latency.chunk_len must be at least 1".into(),
            ));
        }
        if self.latency.iterations == 0 || self.latency.forward_iterations == 0 {
            return Err(HarnessError::Config(
                "latency iteration counts must be at least 1".into(),
            ));
        }
        if self.kinematics.targets == 0 {
            return Err(HarnessError::Config(
                "kinematics.targets must be at least 1".into(),
            ));
        }
        self.kinematics.chain.validate().map_err(cfg_err)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nlearning_rat = 0.1").is_err());
        assert!(ExperimentConfig::from_toml("[ensemble.adahorizon]\nmin_action = 2").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n[eval]\nepisodes = 3").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.eval.episodes, 3);
        assert_eq!(cfg.eval.methods, EvalSection::default().methods);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut cfg = ExperimentConfig::default();
        cfg.latency.chunk_len = 0;
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.eval.conditions.push("underwater".into());
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }
}
