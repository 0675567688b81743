//! Run configuration: data source, optimization, architecture knobs.
//!
//! Everything has a serde default, so JSON config files only need the
//! fields they change. The `data` source is the one required field.

use std::path::PathBuf;

use crate::assemble::AssembleMode;
use crate::augment::AugmentConfig;
use crate::data::{read_cohort_csv, synth_generate, Cohort, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{AblationFlags, ModelConfig};

/// Where the cohort comes from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth { spec: SynthSpec },
    Csv { dir: PathBuf, interval: f64 },
}

/// Learning-rate schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Halve after `scheduler_patience` epochs without validation
    /// improvement, floor at `min_lr`.
    #[default]
    Plateau,
    /// `lr_t = lr / t` with t the 1-based epoch index.
    InvT,
}

pub const PAPER_SEEDS: [u64; 5] = [42, 1992, 1709, 250, 213];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data: DataSource,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_lr: f64,
    pub epochs: usize,
    pub scheduler_patience: usize,
    pub early_stop_patience: usize,
    pub lr_schedule: LrSchedule,
    /// Time windows per sample.
    pub windows: usize,
    /// Retained off-diagonal entries per adjacency row; defaults to
    /// `ceil(d / 2)`.
    pub k: Option<usize>,
    pub rho: f64,
    pub dropout: f64,
    pub weights: LossWeights,
    pub latent: usize,
    pub gin_hidden: usize,
    pub pool_ratio: f64,
    pub pool_kernel: usize,
    pub mlp_hidden: usize,
    pub mlp_depth: usize,
    /// Balance between node and edge weight in importance scores.
    pub alpha_interp: f64,
    /// EMA decay of the importance stacks.
    pub importance_decay: f64,
    pub seeds: Vec<u64>,
    pub split: (f64, f64, f64),
    pub ablation: AblationFlags,
    pub augment: AugmentConfig,
    pub assemble_mode: AssembleMode,
    /// Permute label rows across samples: a no-signal control run.
    pub shuffle_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: DataSource::Synth {
                spec: default_synth_spec(),
            },
            batch_size: 128,
            learning_rate: 1e-4,
            min_lr: 1e-6,
            epochs: 100,
            scheduler_patience: 5,
            early_stop_patience: 10,
            lr_schedule: LrSchedule::Plateau,
            windows: 6,
            k: None,
            rho: 0.5,
            dropout: 0.5,
            weights: LossWeights::default(),
            latent: 8,
            gin_hidden: 32,
            pool_ratio: 0.5,
            pool_kernel: 3,
            mlp_hidden: 64,
            mlp_depth: 4,
            alpha_interp: 0.5,
            importance_decay: 0.9,
            seeds: PAPER_SEEDS.to_vec(),
            split: (0.8, 0.1, 0.1),
            ablation: AblationFlags::default(),
            augment: AugmentConfig::default(),
            assemble_mode: AssembleMode::HadamardAdd,
            shuffle_labels: false,
        }
    }
}

/// The reference planted cohort: 2000 samples, 8 features, 24 steps in
/// 6 windows, 3 labels at imbalanced rates, one planted feature pair
/// per label.
pub fn default_synth_spec() -> SynthSpec {
    use crate::data::PlantedRule;
    SynthSpec {
        n_samples: 2000,
        features: 8,
        length: 24,
        windows: 6,
        labels: 3,
        rules: vec![
            PlantedRule {
                feature_a: 0,
                feature_b: 1,
                window: 1,
                positive_corr: true,
                label: 0,
                gate: None,
            },
            PlantedRule {
                feature_a: 2,
                feature_b: 3,
                window: 3,
                positive_corr: false,
                label: 1,
                gate: None,
            },
            PlantedRule {
                feature_a: 4,
                feature_b: 5,
                window: 4,
                positive_corr: true,
                label: 2,
                gate: None,
            },
        ],
        positive_rates: vec![0.30, 0.20, 0.10],
        noise: 0.15,
        seed: 7,
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: TrainConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        self.weights.validate()?;
        self.augment.validate()?;
        if let DataSource::Synth { spec } = &self.data {
            spec.validate()?;
            if spec.windows != self.windows {
                return Err(Error::Config(format!(
                    "synth spec has {} windows, training expects {}",
                    spec.windows, self.windows
                )));
            }
        }
        Ok(())
    }

    /// Loads or generates the cohort, applying the label-shuffle
    /// control when configured.
    pub fn load_cohort(&self, seed: u64) -> Result<Cohort> {
        let cohort = match &self.data {
            DataSource::Synth { spec } => synth_generate(spec)?,
            DataSource::Csv { dir, interval } => {
                let (cohort, _report) = read_cohort_csv(dir, *interval, self.windows, true)?;
                cohort
            }
        };
        if cohort.is_empty() {
            return Err(Error::Data("cohort is empty".into()));
        }
        Ok(if self.shuffle_labels {
            cohort.shuffle_labels(seed)
        } else {
            cohort
        })
    }

    /// Derives the architecture description from the cohort dimensions.
    pub fn model_config(&self, features: usize, steps_per_window: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            features,
            windows: self.windows,
            steps_per_window,
            classes,
            k: self.k.unwrap_or_else(|| features.div_ceil(2).min(features - 1)),
            rho: self.rho,
            gin_hidden: self.gin_hidden,
            latent: self.latent,
            pool_ratio: self.pool_ratio,
            pool_kernel: self.pool_kernel,
            mlp_hidden: self.mlp_hidden,
            mlp_depth: self.mlp_depth,
            dropout: self.dropout,
            assemble_mode: self.assemble_mode,
            ablation: self.ablation,
        }
    }

    /// Stable hash of the canonical JSON encoding (FNV-1a).
    pub fn hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}
