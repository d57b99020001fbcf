//! Experiment configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::MethodKind;
use crate::dataset::ToyWorld;
use crate::error::{DdeError, Result};
use crate::evaluation::EvalConfig;
use crate::predictor::Architecture;
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleParams;
use crate::trainer::{PretrainConfig, TrainConfig};

/// Overrides `paths.root` when set.
pub const OUTPUT_ROOT_ENV: &str = "DDE_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_pairs: usize,
    pub sampler: SamplerConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_pairs: 2000, sampler: SamplerConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub methods: Vec<MethodKind>,
    /// Extra DDE runs restricted to these step ranges.
    pub step_ranges: Vec<(usize, usize)>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { methods: MethodKind::ALL.to_vec(), step_ranges: vec![(200, 700)], seeds: (0..5).collect() }
    }
}

/// Artifact locations; relative entries resolve against `root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub root: PathBuf,
    pub reference: PathBuf,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            root: PathBuf::from("runs"),
            reference: PathBuf::from("reference.ckpt"),
            dataset: PathBuf::from("pairs.jsonl"),
            checkpoints: PathBuf::from("checkpoints"),
            reports: PathBuf::from("reports"),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn reference(&self) -> PathBuf {
        self.resolve(&self.reference)
    }

    pub fn dataset(&self) -> PathBuf {
        self.resolve(&self.dataset)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.resolve(&self.checkpoints)
    }

    pub fn reports(&self) -> PathBuf {
        self.resolve(&self.reports)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub world: ToyWorld,
    pub model: Architecture,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    /// Save a resumable checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub paths: Paths,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| DdeError::format(origin, e.to_string()))?;
        Ok(cfg)
    }

    /// Reads and validates a config file, then applies the environment
    /// override for the output root.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DdeError::io(path, e))?;
        let mut cfg = Self::from_toml(&text, path)?;
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            cfg.paths.root = PathBuf::from(root);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.schedule.build()?;
        self.world.validate()?;
        self.model.validate()?;
        if self.model.steps != s.steps() {
            return Err(DdeError::InvalidConfig(format!(
                "model.steps = {} but schedule.steps = {}",
                self.model.steps,
                s.steps()
            )));
        }
        if self.model.input_dim != self.world.dim || self.model.n_classes != self.world.n_classes() {
            return Err(DdeError::InvalidConfig("model input_dim / n_classes must match the world".into()));
        }
        self.pretrain.optimizer.validate()?;
        self.data.sampler.validate(s.steps())?;
        self.train.validate(s.steps())?;
        self.eval.sampler.validate(s.steps())?;
        for &(lo, hi) in &self.ablation.step_ranges {
            if !(1 <= lo && lo <= hi && hi <= s.steps()) {
                return Err(DdeError::InvalidConfig(format!("ablation step range {lo}:{hi} outside 1..={}", s.steps())));
            }
        }
        Ok(())
    }

    /// Writes the effective config into `dir` as `config.toml`.
    pub fn write_next_to(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| DdeError::io(dir, e))?;
        let p = dir.join("config.toml");
        std::fs::write(&p, self.to_toml()).map_err(|e| DdeError::io(&p, e))?;
        Ok(p)
    }
}
