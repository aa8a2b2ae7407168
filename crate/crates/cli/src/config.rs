//! Experiment configuration: one TOML document holding every module's
//! settings, plus the hash that tags all outputs.

use std::path::Path;

use icube_core::cascade::{CascadeParams, SeedPool};
use icube_core::model::I3Config;
use icube_core::netgen::{paper_ratio_preset, GenConfig};
use icube_core::pretrain::{GpConfig, IeConfig, LpConfig, PretrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Artifact locations, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub graph: String,
    pub dataset: String,
    pub checkpoints: String,
    pub outputs: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            graph: "graph.json".into(),
            dataset: "dataset.jsonl".into(),
            checkpoints: "checkpoints".into(),
            outputs: "outputs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub k_folds: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2, test: 0.2, k_folds: 5 }
    }
}

impl SplitConfig {
    pub fn fractions(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Which cascades `simulate` records: `count_per_size` cases for every
/// initial size in `min_size..=max_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count_per_size: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub pool: SeedPool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { count_per_size: 100, min_size: 0, max_size: 20, pool: SeedPool::All }
    }
}

/// Independent cascade baseline: Monte Carlo runs per case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub runs: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { runs: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub max_seed_size: usize,
    pub reps: usize,
    pub pool: SeedPool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { max_seed_size: 20, reps: 10, pool: SeedPool::All }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random stream.
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub split: SplitConfig,
    /// `netgen.seed` is ignored; the generator draws from the root seed.
    pub netgen: GenConfig,
    #[serde(default)]
    pub cascade: CascadeParams,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub model: I3Config,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    /// About 800 nodes and 1,050 cascades; trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            split: SplitConfig::default(),
            netgen: paper_ratio_preset(1.0 / 58.0),
            cascade: CascadeParams::default(),
            dataset: DatasetConfig { count_per_size: 50, ..DatasetConfig::default() },
            pretrain: PretrainConfig {
                lp: LpConfig { dim: 16, epochs: 200, ..LpConfig::default() },
                gp: GpConfig { clusters: vec![16, 4], hidden: 16, epochs: 200, batch: 8, lr: 1e-2, max_cases: 256 },
                ie: IeConfig { dim: 8, epochs: 200, batch: 8, max_cases: 128, ..IeConfig::default() },
            },
            model: I3Config { hidden: 16, epochs: 10, batch: 8, lr: 5e-3, ..I3Config::default() },
            baseline: BaselineConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    /// A few hundred nodes and a handful of epochs, for smoke tests.
    pub fn tiny() -> Self {
        let mut cfg = Self::desk();
        cfg.netgen = paper_ratio_preset(1.0 / 400.0);
        cfg.dataset = DatasetConfig { count_per_size: 4, max_size: 6, ..DatasetConfig::default() };
        cfg.pretrain.lp.epochs = 20;
        cfg.pretrain.gp = GpConfig { clusters: vec![4, 2], hidden: 8, epochs: 20, batch: 4, lr: 1e-2, max_cases: 16 };
        cfg.pretrain.ie = IeConfig { dim: 4, em_rounds: 1, epochs: 20, batch: 4, max_cases: 16, ..IeConfig::default() };
        cfg.model = I3Config { hidden: 8, epochs: 3, batch: 4, lr: 1e-2, ..I3Config::default() };
        cfg.baseline.runs = 10;
        cfg.sweep = SweepConfig { max_seed_size: 6, reps: 2, pool: SeedPool::All };
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Validation(msg));
        let f = self.split.fractions();
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {f:?} must lie in [0, 1] and sum to 1"));
        }
        if self.split.k_folds < 2 {
            return bad("split.k_folds must be at least 2".into());
        }
        if self.dataset.count_per_size == 0 || self.dataset.min_size > self.dataset.max_size {
            return bad("dataset needs count_per_size >= 1 and min_size <= max_size".into());
        }
        if self.baseline.runs == 0 || self.sweep.reps == 0 {
            return bad("baseline.runs and sweep.reps must be positive".into());
        }
        self.netgen.validate()?;
        self.cascade.validate()?;
        self.pretrain.lp.validate()?;
        self.model.validate()?;
        Ok(())
    }

    /// SHA-256 over every semantic field; paths are excluded.
    pub fn hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.paths = Paths::default();
        semantic.netgen.seed = 0;
        let bytes = serde_json::to_vec(&semantic).expect("config serializes to JSON");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
