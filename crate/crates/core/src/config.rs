//! TOML experiment configuration shared by every CLI command.
//!
//! A config holds a mandatory `schema_version` and `seed` plus one optional
//! table per command. Missing tables take their defaults; unknown keys are
//! rejected everywhere.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accounting::{ArchPreset, Method};
use crate::error::{Error, Result};
use crate::layer::LayerConfig;
use crate::routing::LogitSampler;
use crate::training::{BenchmarkConfig, SuiteSpec, TrainConfig};
use crate::verify::VerifyConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Balance-loss weight for mixture training; sequential single-domain
/// phases keep the library default.
pub const MIXTURE_BALANCE_COEFFICIENT: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub forget: ForgetSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub moments: MomentsSection,
    #[serde(default)]
    pub account: AccountSection,
}

/// Convergence comparison of every adapter method on a domain mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Runs use seeds `seed, seed + 1, …`.
    pub replicates: usize,
    pub domains: usize,
    pub suite: SuiteSpec,
    pub layer: LayerConfig,
    pub optimization: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let mut bench = BenchmarkConfig::default();
        bench.layer.balance_coefficient = MIXTURE_BALANCE_COEFFICIENT;
        bench.train.balance_coefficient = MIXTURE_BALANCE_COEFFICIENT;
        TrainSection {
            replicates: bench.seeds.len(),
            domains: bench.domains,
            suite: bench.suite,
            layer: bench.layer,
            optimization: bench.train,
        }
    }
}

/// Sequential training on a task pair with retention measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForgetSection {
    pub replicates: usize,
    /// Also runs the spectral layer with every expert active.
    pub dense_ablation: bool,
    pub suite: SuiteSpec,
    pub layer: LayerConfig,
    pub optimization: TrainConfig,
}

impl Default for ForgetSection {
    fn default() -> Self {
        let bench = BenchmarkConfig::default();
        ForgetSection {
            replicates: bench.seeds.len(),
            dense_ablation: true,
            suite: bench.suite,
            layer: bench.layer,
            optimization: bench.train,
        }
    }
}

/// Grid over expert count and top-k at a fixed total rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub experts: Vec<usize>,
    pub top_k: Vec<usize>,
    pub total_rank: usize,
    pub domains: usize,
    pub suite: SuiteSpec,
    /// Template; expert count, top-k and total rank come from the grid.
    pub layer: LayerConfig,
    pub optimization: TrainConfig,
}

impl Default for SweepSection {
    fn default() -> Self {
        let t = TrainSection::default();
        SweepSection {
            experts: vec![1, 2, 4, 8, 16],
            top_k: vec![1, 2, 4, 8],
            total_rank: 32,
            domains: t.domains,
            suite: t.suite,
            layer: t.layer,
            optimization: t.optimization,
        }
    }
}

impl SweepSection {
    /// Cartesian product in row-major order (experts outer).
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.experts
            .iter()
            .flat_map(|&e| self.top_k.iter().map(move |&k| (e, k)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentsSection {
    pub n_experts: usize,
    pub top_k: usize,
    pub samples: usize,
    pub sampler: LogitSampler,
}

impl Default for MomentsSection {
    fn default() -> Self {
        MomentsSection { n_experts: 8, top_k: 2, samples: 1_000_000, sampler: LogitSampler::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccountSection {
    pub presets: Vec<ArchPreset>,
    pub methods: Vec<Method>,
    /// FLOPs batch size `B`.
    pub batch: usize,
    /// FLOPs sequence length `s`.
    pub seq: usize,
}

impl Default for AccountSection {
    fn default() -> Self {
        AccountSection {
            presets: vec![ArchPreset::vit_clip(), ArchPreset::decoder_7b()],
            methods: Method::ALL.to_vec(),
            batch: 1,
            seq: 1024,
        }
    }
}

fn replicate_seeds(seed: u64, replicates: usize) -> Vec<u64> {
    (0..replicates as u64).map(|i| seed.wrapping_add(i)).collect()
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed,
            verify: VerifyConfig::default(),
            train: TrainSection::default(),
            forget: ForgetSection::default(),
            sweep: SweepSection::default(),
            moments: MomentsSection::default(),
            account: AccountSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Schema(format!("cannot encode config: {e}")))
    }

    pub fn train_benchmark(&self) -> Result<BenchmarkConfig> {
        let t = &self.train;
        let bench = BenchmarkConfig {
            suite: t.suite.clone(),
            domains: t.domains,
            layer: t.layer.clone(),
            train: TrainConfig { seed: self.seed, ..t.optimization.clone() },
            seeds: replicate_seeds(self.seed, t.replicates),
        };
        bench.validate()?;
        Ok(bench)
    }

    pub fn forget_benchmark(&self) -> Result<BenchmarkConfig> {
        let f = &self.forget;
        let bench = BenchmarkConfig {
            suite: f.suite.clone(),
            domains: 2,
            layer: f.layer.clone(),
            train: TrainConfig { seed: self.seed, ..f.optimization.clone() },
            seeds: replicate_seeds(self.seed, f.replicates),
        };
        bench.validate()?;
        Ok(bench)
    }

    pub fn sweep_train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.sweep.optimization.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::with_seed(42);
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back.train.optimization.seed, 0);
        assert_eq!(back.seed, 42);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml("schema_version = 1\nseed = 3\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::with_seed(3));
        assert_eq!(cfg.train_benchmark().unwrap().seeds, vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn seed_and_version_are_mandatory() {
        assert!(matches!(ExperimentConfig::from_toml("schema_version = 1\n"), Err(Error::Schema(_))));
        assert!(matches!(ExperimentConfig::from_toml("seed = 1\n"), Err(Error::Schema(_))));
        assert!(matches!(ExperimentConfig::from_toml("schema_version = 2\nseed = 1\n"), Err(Error::Schema(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "schema_version = 1\nseed = 1\nextra = 2\n",
            "schema_version = 1\nseed = 1\n[train]\nreplicate = 2\n",
            "schema_version = 1\nseed = 1\n[train.optimization]\nlr = 0.1\nsteps = 5\nseed = 9\n",
            "schema_version = 1\nseed = 1\n[moments.sampler]\nkind = \"gaussian\"\nspread = 1.0\nwidth = 2\n",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Schema(_))), "{text}");
        }
    }

    #[test]
    fn sections_parse() {
        let text = r#"
schema_version = 1
seed = 11

[moments]
n_experts = 4
top_k = 1
samples = 1000
sampler = { kind = "uniform", spread = 0.5 }

[sweep]
experts = [2, 4]
top_k = [1]
total_rank = 8

[account]
methods = ["moe-lora", "full-ft-moe"]
batch = 2
seq = 16

[[account.presets]]
name = "tiny"
family = "vit-clip"
hidden = 16
layers = 2
rank = 8
experts = 4
top_k = 2
patch = 4
channels = 3
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.moments.sampler, LogitSampler::Uniform { spread: 0.5 });
        assert_eq!(cfg.sweep.cells(), vec![(2, 1), (4, 1)]);
        assert_eq!(cfg.account.methods, vec![Method::MoeLora, Method::FullFtMoe]);
        assert_eq!(cfg.account.presets[0].hidden, 16);
    }
}
