//! CSV ingestion and cohort round-tripping.
//!
//! Time-series come in long form (`patient_id,timestamp,feature,value`,
//! empty value = missing). Statics come as one row per patient
//! (`patient_id,age,sex,label_0..label_{C-1}` plus optional `align_ts`
//! and `window_tag` columns).

use std::collections::BTreeMap;
use std::path::Path;

use super::{Cohort, RawSeries, Statics};
use crate::data::{impute_resample, window};
use crate::error::{Error, Result};

/// Counters for everything tolerated but worth reporting.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub patients: usize,
    pub rows: usize,
    pub unparseable_rows: usize,
    pub duplicate_timestamps: usize,
    /// Patients present in one file but not the other.
    pub unmatched_patients: usize,
}

struct StaticsRow {
    statics: Statics,
    labels: Vec<f64>,
    align_ts: Option<f64>,
    window_tag: usize,
}

fn required_column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Data(format!("missing mandatory column '{name}'")))
}

fn read_statics(path: &Path) -> Result<(BTreeMap<String, StaticsRow>, Vec<String>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let id_col = required_column(&headers, "patient_id")?;
    let age_col = required_column(&headers, "age")?;
    let sex_col = required_column(&headers, "sex")?;
    let label_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("label_"))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    if label_cols.is_empty() {
        return Err(Error::Data("statics file has no label_* columns".into()));
    }
    let align_col = headers.iter().position(|h| h == "align_ts");
    let tag_col = headers.iter().position(|h| h == "window_tag");

    let mut rows = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize, what: &str| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|e| Error::Data(format!("bad {what} '{}': {e}", &rec[i])))
        };
        let labels = label_cols
            .iter()
            .map(|&(i, _)| parse(i, "label"))
            .collect::<Result<Vec<f64>>>()?;
        let align_ts = match align_col {
            Some(i) if !rec[i].is_empty() => Some(parse(i, "align_ts")?),
            _ => None,
        };
        let window_tag = match tag_col {
            Some(i) if !rec[i].is_empty() => parse(i, "window_tag")? as usize,
            _ => 0,
        };
        rows.insert(
            rec[id_col].to_string(),
            StaticsRow {
                statics: Statics {
                    age: parse(age_col, "age")?,
                    sex: parse(sex_col, "sex")? as u8,
                },
                labels,
                align_ts,
                window_tag,
            },
        );
    }
    let label_names = label_cols.into_iter().map(|(_, n)| n).collect();
    Ok((rows, label_names))
}

/// Parses the long time-series file and the statics file into one
/// [`RawSeries`] per patient (sorted by id). Unparseable rows are
/// counted, duplicate timestamps keep the last occurrence.
pub fn ingest_csv(
    data_path: &Path,
    statics_path: &Path,
) -> Result<(Vec<RawSeries>, Vec<String>, IngestReport)> {
    let (statics, label_names) = read_statics(statics_path)?;

    let mut rdr = csv::Reader::from_path(data_path)?;
    let headers = rdr.headers()?.clone();
    let id_col = required_column(&headers, "patient_id")?;
    let ts_col = required_column(&headers, "timestamp")?;
    let feat_col = required_column(&headers, "feature")?;
    let val_col = required_column(&headers, "value")?;

    let mut report = IngestReport::default();
    // patient -> feature -> timestamp -> value
    let mut series: BTreeMap<String, BTreeMap<String, BTreeMap<u64, (f64, Option<f64>)>>> =
        BTreeMap::new();
    let mut feature_set: BTreeMap<String, ()> = BTreeMap::new();

    for rec in rdr.records() {
        let rec = rec?;
        report.rows += 1;
        let ts: f64 = match rec[ts_col].parse() {
            Ok(v) => v,
            Err(_) => {
                report.unparseable_rows += 1;
                continue;
            }
        };
        let value: Option<f64> = if rec[val_col].is_empty() {
            None
        } else {
            match rec[val_col].parse() {
                Ok(v) => Some(v),
                Err(_) => {
                    report.unparseable_rows += 1;
                    continue;
                }
            }
        };
        let patient = rec[id_col].to_string();
        let feature = rec[feat_col].to_string();
        feature_set.entry(feature.clone()).or_insert(());
        let slot = series
            .entry(patient)
            .or_default()
            .entry(feature)
            .or_default();
        // Keyed by the timestamp bits: identical timestamps collapse,
        // last occurrence wins.
        if slot.insert(ts.to_bits(), (ts, value)).is_some() {
            report.duplicate_timestamps += 1;
        }
    }
    if report.rows == 0 {
        return Err(Error::Data(format!(
            "no data rows in {}",
            data_path.display()
        )));
    }

    let feature_names: Vec<String> = feature_set.into_keys().collect();
    let mut out = Vec::new();
    for (patient_id, features) in series {
        let Some(srow) = statics.get(&patient_id) else {
            report.unmatched_patients += 1;
            continue;
        };
        let observations = feature_names
            .iter()
            .map(|name| {
                let mut obs: Vec<(f64, Option<f64>)> = features
                    .get(name)
                    .map(|m| m.values().cloned().collect())
                    .unwrap_or_default();
                obs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                obs
            })
            .collect();
        out.push(RawSeries {
            patient_id,
            feature_names: feature_names.clone(),
            observations,
            statics: srow.statics,
            labels: srow.labels.clone(),
            align_ts: srow.align_ts,
            window_tag: srow.window_tag,
        });
    }
    report.unmatched_patients += statics.len() - out.len();
    report.patients = out.len();
    Ok((out, label_names, report))
}

/// Window tags ride along in the statics file so synthetic cohorts
/// survive a CSV round trip.
pub fn write_cohort_csv(cohort: &Cohort, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut data = csv::Writer::from_path(dir.join("data.csv"))?;
    data.write_record(["patient_id", "timestamp", "feature", "value"])?;
    for sample in &cohort.samples {
        let (w, s) = (sample.steps_per_window(), sample.windows());
        for (f, name) in cohort.feature_names.iter().enumerate() {
            for t in 0..s {
                for j in 0..w {
                    data.write_record([
                        sample.patient_id.as_str(),
                        &format!("{}", t * w + j),
                        name,
                        &format!("{:.17e}", sample.x.at(&[f, j, t])),
                    ])?;
                }
            }
        }
    }
    data.flush()?;

    let mut statics = csv::Writer::from_path(dir.join("statics.csv"))?;
    let mut header = vec!["patient_id".to_string(), "age".into(), "sex".into()];
    header.extend(cohort.label_names.iter().cloned());
    header.push("window_tag".into());
    statics.write_record(&header)?;
    for sample in &cohort.samples {
        let mut rec = vec![
            sample.patient_id.clone(),
            format!("{:.17e}", sample.statics.age),
            format!("{}", sample.statics.sex),
        ];
        rec.extend(sample.labels.iter().map(|y| format!("{}", *y as u8)));
        rec.push(format!("{}", sample.window_tag));
        statics.write_record(&rec)?;
    }
    statics.flush()?;
    Ok(())
}

/// Full ingest pipeline: parse, impute on a unit grid, window into `s`
/// slices. Patients whose series cannot be imputed (an all-missing
/// feature) are dropped with a report entry when `drop_incomplete`,
/// otherwise the error propagates.
pub fn read_cohort_csv(
    dir: &Path,
    interval: f64,
    s: usize,
    drop_incomplete: bool,
) -> Result<(Cohort, IngestReport)> {
    let (raws, label_names, mut report) = ingest_csv(
        &dir.join("data.csv"),
        &dir.join("statics.csv"),
    )?;
    let feature_names = raws
        .first()
        .map(|r| r.feature_names.clone())
        .unwrap_or_default();

    let mut samples = Vec::with_capacity(raws.len());
    for raw in &raws {
        let dense = match impute_resample(raw, interval) {
            Ok(d) => d,
            Err(e) if drop_incomplete => {
                let _ = e;
                report.unparseable_rows += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let x = window(&dense, s)?;
        samples.push(super::WindowedSample {
            patient_id: raw.patient_id.clone(),
            x,
            statics: raw.statics,
            labels: raw.labels.clone(),
            window_tag: raw.window_tag,
        });
    }
    report.patients = samples.len();
    Ok((
        Cohort {
            feature_names,
            label_names,
            samples,
        },
        report,
    ))
}
