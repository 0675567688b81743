//! Cohort ingestion, imputation, windowing, splitting, and synthetic
//! generation.

mod impute;
mod ingest;
mod split;
mod synth;

pub use impute::{impute_resample, unwindow, window, DenseSeries};
pub use ingest::{ingest_csv, read_cohort_csv, write_cohort_csv, IngestReport};
pub use split::{
    exclude_subgroup, exclude_subgroup_by, stratification_warnings, stratified_split,
    CohortSplit, SubgroupPredicate,
};
pub use synth::{pooled_window_correlation, synth_generate, PlantedRule, RuleGate, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Static covariates carried by every sample.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Statics {
    /// Age in years.
    pub age: f64,
    /// 0 or 1.
    pub sex: u8,
}

/// One patient's raw, possibly irregular and gappy, time-series.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub patient_id: String,
    pub feature_names: Vec<String>,
    /// Per feature: (timestamp, observed value or missing marker), with
    /// strictly increasing timestamps.
    pub observations: Vec<Vec<(f64, Option<f64>)>>,
    pub statics: Statics,
    /// Binary outcome flags.
    pub labels: Vec<f64>,
    /// Optional alignment timestamp; observations after it are dropped
    /// during resampling.
    pub align_ts: Option<f64>,
    /// Carried through to [`WindowedSample::window_tag`].
    pub window_tag: usize,
}

impl RawSeries {
    pub fn validate(&self) -> Result<()> {
        if self.feature_names.len() != self.observations.len() {
            return Err(Error::Data(format!(
                "patient {}: {} feature names vs {} series",
                self.patient_id,
                self.feature_names.len(),
                self.observations.len()
            )));
        }
        for (name, obs) in self.feature_names.iter().zip(&self.observations) {
            for pair in obs.windows(2) {
                if pair[1].0 <= pair[0].0 {
                    return Err(Error::Data(format!(
                        "patient {}, feature {name}: timestamps not strictly increasing",
                        self.patient_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A patient's series reshaped to `[d, w, s]` plus statics and labels.
#[derive(Debug, Clone)]
pub struct WindowedSample {
    pub patient_id: String,
    /// `[d, w, s]`: feature, step-within-window, window.
    pub x: Tensor,
    pub statics: Statics,
    /// C binary flags as 0.0/1.0.
    pub labels: Vec<f64>,
    /// Window index where this sample's dynamics concentrate: the
    /// planted window for synthetic positives, a seeded decoy draw for
    /// synthetic negatives, 0 for ingested data.
    pub window_tag: usize,
}

impl WindowedSample {
    pub fn features(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn steps_per_window(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn windows(&self) -> usize {
        self.x.shape()[2]
    }
}

/// A set of windowed samples with shared feature and label naming.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub feature_names: Vec<String>,
    pub label_names: Vec<String>,
    pub samples: Vec<WindowedSample>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn labels(&self) -> usize {
        self.label_names.len()
    }

    /// Positive rate per label over the whole cohort.
    pub fn label_rates(&self) -> Vec<f64> {
        let c = self.labels();
        let mut counts = vec![0usize; c];
        for s in &self.samples {
            for (i, &y) in s.labels.iter().enumerate() {
                if y > 0.5 {
                    counts[i] += 1;
                }
            }
        }
        counts
            .into_iter()
            .map(|n| n as f64 / self.len().max(1) as f64)
            .collect()
    }

    /// Returns a copy with every sample's label vector independently
    /// shuffled to a random other sample's labels (a permutation of the
    /// label rows). Destroys the feature-label association while
    /// keeping the marginals.
    pub fn shuffle_labels(&self, seed: u64) -> Cohort {
        let mut rng = crate::tensor::SeededRng::new(seed);
        let mut perm: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut perm);
        let mut out = self.clone();
        for (i, &src) in perm.iter().enumerate() {
            out.samples[i].labels = self.samples[src].labels.clone();
        }
        out
    }
}
