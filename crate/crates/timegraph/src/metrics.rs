//! Multi-label evaluation metrics.
//!
//! Balanced accuracy is the working metric throughout (the tasks are
//! heavily imbalanced), alongside macro F1 and sensitivity averaged
//! across labels. Labels that a split cannot support (no positives, or
//! no negatives) are excluded from the averages and reported.

use crate::error::{Error, Result};

/// Per-label confusion counts at a fixed threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn sensitivity(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        (pos > 0).then(|| self.tp as f64 / pos as f64)
    }

    pub fn specificity(&self) -> Option<f64> {
        let neg = self.tn + self.fp;
        (neg > 0).then(|| self.tn as f64 / neg as f64)
    }

    pub fn balanced_accuracy(&self) -> Option<f64> {
        Some((self.sensitivity()? + self.specificity()?) / 2.0)
    }

    pub fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if self.tp + self.fn_ == 0 {
            return None; // no positives: F1 undefined for this label
        }
        Some(if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        })
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub confusion: Confusion,
    pub balanced_accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub sensitivity: Option<f64>,
}

/// Averaged metrics with per-label detail.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub per_label: Vec<LabelMetrics>,
    /// Mean balanced accuracy over labels where it is defined.
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    /// Sensitivity averaged across labels with positives.
    pub sensitivity: f64,
    /// Labels excluded from averages (no positives or no negatives in
    /// the split).
    pub skipped: Vec<String>,
}

/// Thresholds probabilities at 0.5 and reduces to per-label confusion
/// matrices and averages.
pub fn evaluate_predictions(
    probs: &[Vec<f64>],
    targets: &[Vec<f64>],
    label_names: &[String],
) -> Result<MetricsReport> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let c = label_names.len();
    let mut confusions = vec![Confusion::default(); c];
    for (p, y) in probs.iter().zip(targets) {
        if p.len() != c || y.len() != c {
            return Err(Error::Contract("label width mismatch".into()));
        }
        for i in 0..c {
            let predicted = p[i] >= 0.5;
            let actual = y[i] > 0.5;
            match (predicted, actual) {
                (true, true) => confusions[i].tp += 1,
                (true, false) => confusions[i].fp += 1,
                (false, true) => confusions[i].fn_ += 1,
                (false, false) => confusions[i].tn += 1,
            }
        }
    }

    let mut per_label = Vec::with_capacity(c);
    let mut skipped = Vec::new();
    let (mut bal_sum, mut bal_n) = (0.0, 0usize);
    let (mut f1_sum, mut f1_n) = (0.0, 0usize);
    let (mut sens_sum, mut sens_n) = (0.0, 0usize);
    for i in 0..c {
        let conf = confusions[i];
        let metrics = LabelMetrics {
            label: label_names[i].clone(),
            confusion: conf,
            balanced_accuracy: conf.balanced_accuracy(),
            f1: conf.f1(),
            sensitivity: conf.sensitivity(),
        };
        if let Some(b) = metrics.balanced_accuracy {
            bal_sum += b;
            bal_n += 1;
        }
        if let Some(f) = metrics.f1 {
            f1_sum += f;
            f1_n += 1;
        }
        match metrics.sensitivity {
            Some(s) => {
                sens_sum += s;
                sens_n += 1;
            }
            None => skipped.push(label_names[i].clone()),
        }
        per_label.push(metrics);
    }
    if bal_n == 0 {
        return Err(Error::Data(
            "no label has both positives and negatives; metrics undefined".into(),
        ));
    }
    Ok(MetricsReport {
        per_label,
        balanced_accuracy: bal_sum / bal_n as f64,
        macro_f1: if f1_n > 0 { f1_sum / f1_n as f64 } else { 0.0 },
        sensitivity: if sens_n > 0 { sens_sum / sens_n as f64 } else { 0.0 },
        skipped,
    })
}

/// Mean and (population) standard deviation, for multi-seed reporting.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("label_{i}")).collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let targets = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]];
        let probs: Vec<Vec<f64>> = targets
            .iter()
            .map(|y| y.iter().map(|&v| if v > 0.5 { 0.9 } else { 0.1 }).collect())
            .collect();
        let report = evaluate_predictions(&probs, &targets, &names(2)).unwrap();
        assert_eq!(report.balanced_accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(report.sensitivity, 1.0);
    }

    #[test]
    fn all_negative_predictor_is_chance() {
        let targets = vec![vec![1.0], vec![0.0], vec![0.0], vec![1.0]];
        let probs = vec![vec![0.1]; 4];
        let report = evaluate_predictions(&probs, &targets, &names(1)).unwrap();
        assert_eq!(report.sensitivity, 0.0);
        assert_eq!(report.balanced_accuracy, 0.5);
    }

    #[test]
    fn hand_confusion_case() {
        // TP=3 FN=1 TN=5 FP=1: balanced accuracy (0.75 + 0.8333)/2
        let mut targets = Vec::new();
        let mut probs = Vec::new();
        for _ in 0..3 {
            targets.push(vec![1.0]);
            probs.push(vec![0.9]);
        }
        targets.push(vec![1.0]);
        probs.push(vec![0.1]);
        for _ in 0..5 {
            targets.push(vec![0.0]);
            probs.push(vec![0.1]);
        }
        targets.push(vec![0.0]);
        probs.push(vec![0.9]);
        let report = evaluate_predictions(&probs, &targets, &names(1)).unwrap();
        let expect = (0.75 + 5.0 / 6.0) / 2.0;
        assert!((report.balanced_accuracy - expect).abs() < 1e-12);
        assert!((report.balanced_accuracy - 0.7917).abs() < 1e-4);
        assert_eq!(report.per_label[0].confusion, Confusion { tp: 3, fp: 1, tn: 5, fn_: 1 });
    }

    #[test]
    fn label_without_positives_is_skipped() {
        let targets = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
        let probs = vec![vec![0.2, 0.9], vec![0.3, 0.2]];
        let report = evaluate_predictions(&probs, &targets, &names(2)).unwrap();
        assert_eq!(report.skipped, vec!["label_0".to_string()]);
        assert_eq!(report.sensitivity, 1.0); // only label_1 counted
    }

    #[test]
    fn matches_brute_force_recount() {
        let mut rng = crate::tensor::SeededRng::new(17);
        let n = 200;
        let c = 3;
        let targets: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| f64::from(rng.bernoulli(0.3))).collect())
            .collect();
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| rng.uniform()).collect())
            .collect();
        let report = evaluate_predictions(&probs, &targets, &names(c)).unwrap();
        for (i, lm) in report.per_label.iter().enumerate() {
            let mut conf = Confusion::default();
            for s in 0..n {
                match (probs[s][i] >= 0.5, targets[s][i] > 0.5) {
                    (true, true) => conf.tp += 1,
                    (true, false) => conf.fp += 1,
                    (false, true) => conf.fn_ += 1,
                    (false, false) => conf.tn += 1,
                }
            }
            assert_eq!(lm.confusion, conf);
            assert_eq!(conf.total(), n);
        }
    }
}
