//! Synthetic cohorts with planted inter-feature correlations.
//!
//! Each rule couples a feature pair inside one window. A rule fires for
//! an exact seeded count of (gate-eligible) samples; while firing, the
//! target feature is rewritten as a strong signed mixture of the source
//! feature, so the within-window correlation is high for carriers and
//! absent otherwise. Labels come from thresholding a noisy linear score
//! over the per-sample couplings, which keeps the ground-truth
//! importance map (feature pair x window per label) exactly known.

use super::{Cohort, Statics, WindowedSample};
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

/// Restriction of a rule to a statics-defined subgroup.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RuleGate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<u8>,
}

impl RuleGate {
    pub fn admits(&self, statics: &Statics) -> bool {
        self.age_min.map_or(true, |t| statics.age >= t)
            && self.age_max.map_or(true, |t| statics.age <= t)
            && self.sex.map_or(true, |v| statics.sex == v)
    }
}

/// One planted correlation: features `(feature_a, feature_b)` coupled
/// inside `window` with the given sign, informative for `label`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlantedRule {
    pub feature_a: usize,
    pub feature_b: usize,
    pub window: usize,
    pub positive_corr: bool,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<RuleGate>,
}

/// Full description of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub n_samples: usize,
    /// Feature count d.
    pub features: usize,
    /// Total resampled steps l.
    pub length: usize,
    /// Window count s.
    pub windows: usize,
    /// Label count C.
    pub labels: usize,
    pub rules: Vec<PlantedRule>,
    /// Target positive rate per label.
    pub positive_rates: Vec<f64>,
    /// Label noise scale; zero makes labels a pure function of the
    /// planted couplings.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.features < 2 || self.windows == 0 || self.labels == 0 {
            return Err(Error::Config("need features >= 2, windows >= 1, labels >= 1".into()));
        }
        if self.length / self.windows == 0 {
            return Err(Error::Config(format!(
                "length {} too short for {} windows",
                self.length, self.windows
            )));
        }
        if self.positive_rates.len() != self.labels {
            return Err(Error::Config(format!(
                "{} positive rates for {} labels",
                self.positive_rates.len(),
                self.labels
            )));
        }
        if self
            .positive_rates
            .iter()
            .any(|r| !(*r > 0.0 && *r < 1.0))
        {
            return Err(Error::Config("positive rates must lie in (0, 1)".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise must be >= 0".into()));
        }
        for rule in &self.rules {
            if rule.feature_a >= self.features
                || rule.feature_b >= self.features
                || rule.feature_a == rule.feature_b
            {
                return Err(Error::Config(format!(
                    "rule features ({}, {}) invalid for d = {}",
                    rule.feature_a, rule.feature_b, self.features
                )));
            }
            if rule.window >= self.windows {
                return Err(Error::Config(format!(
                    "rule window {} outside {} windows",
                    rule.window, self.windows
                )));
            }
            if rule.label >= self.labels {
                return Err(Error::Config(format!(
                    "rule label {} outside {} labels",
                    rule.label, self.labels
                )));
            }
        }
        // Contradictory signs on the same pair/window/label are
        // unsatisfiable.
        for (i, a) in self.rules.iter().enumerate() {
            for b in &self.rules[i + 1..] {
                if a.feature_a == b.feature_a
                    && a.feature_b == b.feature_b
                    && a.window == b.window
                    && a.label == b.label
                    && a.positive_corr != b.positive_corr
                {
                    return Err(Error::Config(format!(
                        "rules plant contradictory signs on pair ({}, {}), window {}, label {}",
                        a.feature_a, a.feature_b, a.window, a.label
                    )));
                }
            }
        }
        // Informative feature budget per label.
        for c in 0..self.labels {
            let mut feats: Vec<usize> = self
                .rules
                .iter()
                .filter(|r| r.label == c)
                .flat_map(|r| [r.feature_a, r.feature_b])
                .collect();
            feats.sort_unstable();
            feats.dedup();
            if !(2..=4).contains(&feats.len()) {
                return Err(Error::Config(format!(
                    "label {c} has {} informative features; need 2 to 4",
                    feats.len()
                )));
            }
        }
        Ok(())
    }

    /// Distinct informative features per label, for recovery checks.
    pub fn informative_features(&self, label: usize) -> Vec<usize> {
        let mut feats: Vec<usize> = self
            .rules
            .iter()
            .filter(|r| r.label == label)
            .flat_map(|r| [r.feature_a, r.feature_b])
            .collect();
        feats.sort_unstable();
        feats.dedup();
        feats
    }

    /// Planted windows per label.
    pub fn planted_windows(&self, label: usize) -> Vec<usize> {
        let mut w: Vec<usize> = self
            .rules
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.window)
            .collect();
        w.sort_unstable();
        w.dedup();
        w
    }
}

/// Label decision threshold on the coupling score. Active couplings
/// land in [0.9, 1.0], so with zero noise the threshold separates
/// carriers exactly.
const SCORE_THRESHOLD: f64 = 0.45;

/// Generates the cohort described by `spec`. The same spec and seed
/// give the identical cohort.
pub fn synth_generate(spec: &SynthSpec) -> Result<Cohort> {
    spec.validate()?;
    let n = spec.n_samples;
    let (d, s) = (spec.features, spec.windows);
    let w = spec.length / s;
    let mut rng = SeededRng::new(spec.seed);

    let width = (d.max(2) - 1).to_string().len();
    let feature_names: Vec<String> = (0..d).map(|f| format!("f{f:0width$}")).collect();
    let label_names: Vec<String> = (0..spec.labels).map(|c| format!("label_{c}")).collect();

    if n == 0 {
        return Ok(Cohort {
            feature_names,
            label_names,
            samples: Vec::new(),
        });
    }

    // Statics first: rule gates depend on them.
    let mut statics_rng = rng.fork();
    let statics: Vec<Statics> = (0..n)
        .map(|_| Statics {
            age: statics_rng.uniform_in(20.0, 90.0),
            sex: u8::from(statics_rng.bernoulli(0.5)),
        })
        .collect();

    // Per-rule activation: an exact count of eligible samples carries
    // each rule, so marginals are stable across seeds.
    let rules_per_label: Vec<Vec<usize>> = (0..spec.labels)
        .map(|c| {
            spec.rules
                .iter()
                .enumerate()
                .filter(|(_, r)| r.label == c)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let mut coupling = vec![vec![0.0f64; spec.rules.len()]; n];
    for (ri, rule) in spec.rules.iter().enumerate() {
        let eligible: Vec<usize> = (0..n)
            .filter(|&i| rule.gate.as_ref().map_or(true, |g| g.admits(&statics[i])))
            .collect();
        if eligible.is_empty() {
            return Err(Error::Config(format!(
                "rule {ri} gate admits no samples"
            )));
        }
        let k = rules_per_label[rule.label].len() as f64;
        let p_active = 1.0 - (1.0 - spec.positive_rates[rule.label]).powf(1.0 / k);
        // Activation count relative to the whole cohort, drawn from the
        // eligible pool.
        let count = ((n as f64) * p_active).round() as usize;
        let count = count.min(eligible.len());
        let mut pool = eligible;
        let mut rule_rng = rng.fork();
        rule_rng.shuffle(&mut pool);
        for &i in pool.iter().take(count) {
            coupling[i][ri] = rule_rng.uniform_in(0.9, 1.0);
        }
    }

    let mut samples = Vec::with_capacity(n);
    let mut data_rng = rng.fork();
    let mut label_rng = rng.fork();
    let mut tag_rng = rng.fork();
    for i in 0..n {
        // Base series: iid standard normal per feature and step.
        let mut series: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..w * s).map(|_| data_rng.normal()).collect())
            .collect();
        // Plant active couplings.
        for (ri, rule) in spec.rules.iter().enumerate() {
            let u = coupling[i][ri];
            if u == 0.0 {
                continue;
            }
            let sign = if rule.positive_corr { 1.0 } else { -1.0 };
            let ortho = (1.0 - u * u).sqrt();
            for j in 0..w {
                let step = rule.window * w + j;
                let source = series[rule.feature_a][step];
                series[rule.feature_b][step] = sign * (u * source + ortho * data_rng.normal());
            }
        }

        // Labels: thresholded noisy linear score over the couplings.
        let mut labels = Vec::with_capacity(spec.labels);
        for c in 0..spec.labels {
            let score: f64 = rules_per_label[c]
                .iter()
                .map(|&ri| coupling[i][ri])
                .sum::<f64>()
                + spec.noise * label_rng.normal();
            labels.push(f64::from(score > SCORE_THRESHOLD));
        }

        // Window tag: first active rule's window, or a decoy draw.
        let window_tag = spec
            .rules
            .iter()
            .enumerate()
            .find(|(ri, _)| coupling[i][*ri] > 0.0)
            .map(|(_, r)| r.window)
            .unwrap_or_else(|| tag_rng.below(s));

        let mut x = vec![0.0; d * w * s];
        for (f, row) in series.iter().enumerate() {
            for t in 0..s {
                for j in 0..w {
                    x[(f * w + j) * s + t] = row[t * w + j];
                }
            }
        }
        samples.push(WindowedSample {
            patient_id: format!("synth{i:05}"),
            x: Tensor::new(vec![d, w, s], x)?,
            statics: statics[i],
            labels,
            window_tag,
        });
    }

    Ok(Cohort {
        feature_names,
        label_names,
        samples,
    })
}

/// Pooled within-window correlation of a feature pair over a set of
/// samples: Pearson r over all (sample, step) pairs in that window.
pub fn pooled_window_correlation(
    cohort: &Cohort,
    samples: &[usize],
    feature_a: usize,
    feature_b: usize,
    window: usize,
) -> f64 {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &i in samples {
        let sample = &cohort.samples[i];
        for j in 0..sample.steps_per_window() {
            xs.push(sample.x.at(&[feature_a, j, window]));
            ys.push(sample.x.at(&[feature_b, j, window]));
        }
    }
    pearson(&xs, &ys)
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}
