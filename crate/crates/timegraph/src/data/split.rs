//! Stratified splitting and subgroup exclusion.

use super::{Cohort, WindowedSample};
use crate::error::{Error, Result};
use crate::tensor::SeededRng;

/// Disjoint train/validation/test index lists over a cohort.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CohortSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl CohortSplit {
    /// Checks the stratification contract: each split's per-label
    /// positive rate within 20% relative of the cohort rate (labels a
    /// split cannot represent are skipped: fewer positives than splits).
    pub fn stratification_ok(&self, cohort: &Cohort) -> bool {
        let overall = cohort.label_rates();
        for part in [&self.train, &self.validation, &self.test] {
            if part.is_empty() {
                continue;
            }
            for (c, &rate) in overall.iter().enumerate() {
                let positives_total: f64 = rate * cohort.len() as f64;
                if rate == 0.0 || positives_total < 3.0 {
                    continue;
                }
                let pos = part
                    .iter()
                    .filter(|&&i| cohort.samples[i].labels[c] > 0.5)
                    .count() as f64;
                let part_rate = pos / part.len() as f64;
                // One sample of slack for small splits, else the 20%
                // relative band.
                let slack = (0.2 * rate).max(1.0 / part.len() as f64);
                if (part_rate - rate).abs() > slack + 1e-12 {
                    return false;
                }
            }
        }
        true
    }
}

/// Labels whose positive count is too small to stratify cleanly.
pub fn stratification_warnings(cohort: &Cohort) -> Vec<String> {
    let mut warnings = Vec::new();
    for (c, name) in cohort.label_names.iter().enumerate() {
        let pos = cohort
            .samples
            .iter()
            .filter(|s| s.labels[c] > 0.5)
            .count();
        if pos < 3 {
            warnings.push(format!(
                "label {name} has only {pos} positives; stratification degraded"
            ));
        }
    }
    warnings
}

/// Deterministic per-patient stratified split. Patients are grouped by
/// their full label vector; each group is shuffled with the seed and
/// dealt to the three splits by largest-remainder allocation, so split
/// membership is a pure function of (ids, ratios, seed).
pub fn stratified_split(
    cohort: &Cohort,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<CohortSplit> {
    let (r_train, r_val, r_test) = ratios;
    let sum = r_train + r_val + r_test;
    if (sum - 1.0).abs() > 1e-9 || r_train < 0.0 || r_val < 0.0 || r_test < 0.0 {
        return Err(Error::Contract(format!("ratios {ratios:?} must sum to 1")));
    }

    // Group indices by label pattern, keyed deterministically.
    let mut groups: std::collections::BTreeMap<Vec<u8>, Vec<usize>> = Default::default();
    for (i, sample) in cohort.samples.iter().enumerate() {
        let key: Vec<u8> = sample.labels.iter().map(|&y| u8::from(y > 0.5)).collect();
        groups.entry(key).or_default().push(i);
    }

    let mut rng = SeededRng::new(seed);
    let mut split = CohortSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (_, mut members) in groups {
        members.sort_unstable();
        let mut group_rng = rng.fork();
        group_rng.shuffle(&mut members);

        let n = members.len();
        let quotas = [r_train * n as f64, r_val * n as f64, r_test * n as f64];
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut leftover = n - counts.iter().sum::<usize>();
        // Largest fractional part first; ties go to the earlier split.
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - quotas[a].floor();
            let fb = quotas[b] - quotas[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &part in order.iter().cycle() {
            if leftover == 0 {
                break;
            }
            counts[part] += 1;
            leftover -= 1;
        }

        let mut cursor = 0;
        for (part, target) in [
            (&mut split.train, counts[0]),
            (&mut split.validation, counts[1]),
            (&mut split.test, counts[2]),
        ] {
            part.extend_from_slice(&members[cursor..cursor + target]);
            cursor += target;
        }
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Declarative subgroup membership, for configuration files.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgroupPredicate {
    AgeAbove(f64),
    AgeBelow(f64),
    SexIs(u8),
    /// Samples whose window tag falls in the given quartile (1..=4) of
    /// the window axis.
    WindowQuartile(u8),
}

impl SubgroupPredicate {
    pub fn matches(&self, sample: &WindowedSample) -> bool {
        match *self {
            SubgroupPredicate::AgeAbove(t) => sample.statics.age > t,
            SubgroupPredicate::AgeBelow(t) => sample.statics.age < t,
            SubgroupPredicate::SexIs(v) => sample.statics.sex == v,
            SubgroupPredicate::WindowQuartile(q) => {
                let s = sample.windows();
                let quartile = (sample.window_tag * 4 / s.max(1)).min(3) as u8 + 1;
                quartile == q
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            SubgroupPredicate::AgeAbove(t) => format!("age>{t}"),
            SubgroupPredicate::AgeBelow(t) => format!("age<{t}"),
            SubgroupPredicate::SexIs(v) => format!("sex={v}"),
            SubgroupPredicate::WindowQuartile(q) => format!("window_q{q}"),
        }
    }
}

/// Splits a cohort into (everything else, matching subgroup). The
/// subgroup never appears in the first list. Empty subgroups and empty
/// remainders are errors.
pub fn exclude_subgroup_by<F>(cohort: &Cohort, predicate: F) -> Result<(Vec<usize>, Vec<usize>)>
where
    F: Fn(&WindowedSample) -> bool,
{
    let mut rest = Vec::new();
    let mut subgroup = Vec::new();
    for (i, sample) in cohort.samples.iter().enumerate() {
        if predicate(sample) {
            subgroup.push(i);
        } else {
            rest.push(i);
        }
    }
    if subgroup.is_empty() {
        return Err(Error::Data("subgroup predicate matched nothing".into()));
    }
    if rest.is_empty() {
        return Err(Error::Data(
            "subgroup predicate matched the whole cohort; nothing left to train on".into(),
        ));
    }
    Ok((rest, subgroup))
}

pub fn exclude_subgroup(
    cohort: &Cohort,
    predicate: &SubgroupPredicate,
) -> Result<(Vec<usize>, Vec<usize>)> {
    exclude_subgroup_by(cohort, |s| predicate.matches(s))
}
