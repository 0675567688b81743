//! Imputation onto a regular grid, and reshaping into windows.

use super::RawSeries;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense per-feature series on a regular grid starting at t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSeries {
    pub interval: f64,
    /// `[feature][grid point]`.
    pub values: Vec<Vec<f64>>,
}

/// Resamples onto a `t = 0, interval, 2*interval, ...` grid covering
/// the observed span. Gaps carry the last observation forward; leading
/// gaps take the first future observation. Missing markers are treated
/// as unobserved.
///
/// A feature with no observed value at all is an error; the caller
/// decides whether to drop the feature or the patient.
pub fn impute_resample(raw: &RawSeries, interval: f64) -> Result<DenseSeries> {
    if interval <= 0.0 {
        return Err(Error::Contract(format!("interval {interval} must be > 0")));
    }
    raw.validate()?;

    let keep = |ts: f64| raw.align_ts.map_or(true, |cut| ts <= cut);
    let mut t_max: f64 = 0.0;
    let mut any = false;
    for obs in &raw.observations {
        for &(ts, v) in obs {
            if v.is_some() && keep(ts) {
                t_max = t_max.max(ts);
                any = true;
            }
        }
    }
    if !any {
        return Err(Error::Data(format!(
            "patient {}: no observed values",
            raw.patient_id
        )));
    }
    let points = (t_max / interval).floor() as usize + 1;

    let mut values = Vec::with_capacity(raw.observations.len());
    for (name, obs) in raw.feature_names.iter().zip(&raw.observations) {
        let observed: Vec<(f64, f64)> = obs
            .iter()
            .filter_map(|&(ts, v)| v.map(|v| (ts, v)).filter(|_| keep(ts)))
            .collect();
        if observed.is_empty() {
            return Err(Error::Data(format!(
                "patient {}: feature {name} has zero observations",
                raw.patient_id
            )));
        }
        let mut series = Vec::with_capacity(points);
        let mut cursor = 0usize; // index of the next observation
        for p in 0..points {
            let t = p as f64 * interval;
            while cursor < observed.len() && observed[cursor].0 <= t {
                cursor += 1;
            }
            let v = if cursor == 0 {
                observed[0].1 // leading gap: backward fill
            } else {
                observed[cursor - 1].1 // forward fill
            };
            series.push(v);
        }
        values.push(series);
    }
    Ok(DenseSeries { interval, values })
}

/// Reshapes a dense series into `[d, w, s]`, truncating the tail so the
/// length divides evenly into `s` windows. Time order is preserved
/// within and across windows.
pub fn window(dense: &DenseSeries, s: usize) -> Result<Tensor> {
    let d = dense.values.len();
    if d == 0 {
        return Err(Error::Data("empty dense series".into()));
    }
    let l = dense.values[0].len();
    if s == 0 || l < s {
        return Err(Error::Data(format!(
            "series of length {l} too short for {s} windows"
        )));
    }
    let w = l / s;
    let mut data = vec![0.0; d * w * s];
    for (f, series) in dense.values.iter().enumerate() {
        if series.len() != l {
            return Err(Error::Data("ragged dense series".into()));
        }
        for t in 0..s {
            for j in 0..w {
                data[(f * w + j) * s + t] = series[t * w + j];
            }
        }
    }
    Tensor::new(vec![d, w, s], data)
}

/// Inverse of [`window`]: concatenates windows back along time.
pub fn unwindow(x: &Tensor) -> Vec<Vec<f64>> {
    let (d, w, s) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    (0..d)
        .map(|f| {
            (0..s)
                .flat_map(|t| (0..w).map(move |j| (t, j)))
                .map(|(t, j)| x.at(&[f, j, t]))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Statics;

    fn raw(obs: Vec<Vec<(f64, Option<f64>)>>) -> RawSeries {
        RawSeries {
            patient_id: "p0".into(),
            feature_names: (0..obs.len()).map(|i| format!("f{i}")).collect(),
            observations: obs,
            statics: Statics { age: 50.0, sex: 0 },
            labels: vec![0.0],
            align_ts: None,
            window_tag: 0,
        }
    }

    #[test]
    fn forward_fill_hand_case() {
        let r = raw(vec![vec![(0.0, Some(5.0)), (2.0, Some(7.0))]]);
        let dense = impute_resample(&r, 1.0).unwrap();
        assert_eq!(dense.values[0], vec![5.0, 5.0, 7.0]);
    }

    #[test]
    fn leading_gap_backward_fills() {
        let r = raw(vec![vec![(2.0, Some(9.0)), (4.0, Some(9.0))]]);
        let dense = impute_resample(&r, 1.0).unwrap();
        assert_eq!(dense.values[0], vec![9.0; 5]);
    }

    #[test]
    fn fully_observed_series_unchanged() {
        let r = raw(vec![vec![
            (0.0, Some(1.0)),
            (1.0, Some(2.0)),
            (2.0, Some(3.0)),
        ]]);
        let dense = impute_resample(&r, 1.0).unwrap();
        assert_eq!(dense.values[0], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn missing_markers_are_skipped() {
        let r = raw(vec![vec![
            (0.0, Some(4.0)),
            (1.0, None),
            (2.0, Some(6.0)),
        ]]);
        let dense = impute_resample(&r, 1.0).unwrap();
        assert_eq!(dense.values[0], vec![4.0, 4.0, 6.0]);
    }

    #[test]
    fn empty_feature_is_an_error() {
        let r = raw(vec![
            vec![(0.0, Some(1.0))],
            vec![(1.0, None)],
        ]);
        assert!(impute_resample(&r, 1.0).is_err());
    }

    #[test]
    fn alignment_cuts_future_observations() {
        let mut r = raw(vec![vec![
            (0.0, Some(1.0)),
            (5.0, Some(2.0)),
            (30.0, Some(99.0)),
        ]]);
        r.align_ts = Some(6.0);
        let dense = impute_resample(&r, 1.0).unwrap();
        assert_eq!(dense.values[0].len(), 6); // grid 0..=5
        assert!(dense.values[0].iter().all(|&v| v != 99.0));
    }

    #[test]
    fn imputation_is_idempotent() {
        let r = raw(vec![vec![
            (0.0, Some(2.0)),
            (2.5, Some(4.0)),
            (6.0, Some(1.0)),
        ]]);
        let once = impute_resample(&r, 1.0).unwrap();
        // Re-feed the dense grid as fully observed raw data.
        let again_raw = raw(vec![once.values[0]
            .iter()
            .enumerate()
            .map(|(i, &v)| (i as f64, Some(v)))
            .collect()]);
        let twice = impute_resample(&again_raw, 1.0).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn window_shapes_and_truncation() {
        let dense = DenseSeries {
            interval: 1.0,
            values: vec![(0..24).map(|i| i as f64).collect()],
        };
        let x = window(&dense, 6).unwrap();
        assert_eq!(x.shape(), &[1, 4, 6]);
        assert_eq!(x.at(&[0, 0, 0]), 0.0);
        assert_eq!(x.at(&[0, 3, 0]), 3.0);
        assert_eq!(x.at(&[0, 0, 1]), 4.0);

        // 25 steps: the trailing step is dropped, still 4 per window.
        let dense = DenseSeries {
            interval: 1.0,
            values: vec![(0..25).map(|i| i as f64).collect()],
        };
        let x = window(&dense, 6).unwrap();
        assert_eq!(x.shape(), &[1, 4, 6]);

        // Single window is the original series.
        let dense = DenseSeries {
            interval: 1.0,
            values: vec![vec![7.0, 8.0, 9.0]],
        };
        let x = window(&dense, 1).unwrap();
        assert_eq!(x.shape(), &[1, 3, 1]);
        assert_eq!(unwindow(&x)[0], vec![7.0, 8.0, 9.0]);

        assert!(window(&dense, 5).is_err());
    }

    #[test]
    fn window_roundtrip_reproduces_truncated_series() {
        let series: Vec<f64> = (0..23).map(|i| (i as f64).sin()).collect();
        let dense = DenseSeries {
            interval: 1.0,
            values: vec![series.clone(), series.iter().map(|v| v * 2.0).collect()],
        };
        let x = window(&dense, 5).unwrap(); // w = 4, truncates to 20
        let back = unwindow(&x);
        assert_eq!(back[0], series[..20].to_vec());
        assert_eq!(back[1], series[..20].iter().map(|v| v * 2.0).collect::<Vec<_>>());
    }
}
