//! Training loop, optimizer, schedules, and the batch workflows
//! (evaluation, explanation, ablations, out-of-distribution runs).

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::config::{LrSchedule, TrainConfig};
use crate::data::{exclude_subgroup, stratified_split, Cohort, CohortSplit, SubgroupPredicate};
use crate::error::{Error, Result};
use crate::interpret::accumulate;
use crate::losses::LossBreakdown;
use crate::metrics::{evaluate_predictions, mean_std, MetricsReport};
use crate::model::{forward_batch, predict, ForwardMode, ModelState};
use crate::tensor::{SeededRng, Tape, Tensor};

// ---------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers per parameter, plus the shared step
/// counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: usize,
}

impl AdamState {
    pub fn for_model(state: &ModelState) -> Self {
        let mut adam = AdamState::default();
        for (name, t) in state.params() {
            adam.m.insert(name.clone(), vec![0.0; t.numel()]);
            adam.v.insert(name, vec![0.0; t.numel()]);
        }
        adam
    }
}

/// One bias-corrected update of a single parameter. The step counter
/// `t` is 1-based and shared across parameters within an optimizer
/// step. Rejects non-finite gradients, naming the parameter.
pub fn adam_step(
    name: &str,
    param: &mut Tensor,
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient for parameter {name}; step rejected"
        )));
    }
    let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let mut data = param.data().to_vec();
    for i in 0..data.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    param.set_data(data);
    Ok(())
}

// ---------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------

/// Reduce-on-plateau state.
#[derive(Debug, Clone)]
pub struct LrState {
    pub lr: f64,
    pub best_loss: f64,
    pub epochs_since_improvement: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
}

impl LrState {
    pub fn new(lr: f64, patience: usize, min_lr: f64) -> Self {
        LrState {
            lr,
            best_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            patience,
            factor: 0.5,
            min_lr,
        }
    }
}

/// Feeds one validation loss; halves the rate after `patience` epochs
/// without improvement and resets the counter on improvement. Returns
/// the rate to use next.
pub fn schedule(state: &mut LrState, val_loss: f64) -> f64 {
    if val_loss < state.best_loss - 1e-12 {
        state.best_loss = val_loss;
        state.epochs_since_improvement = 0;
    } else {
        state.epochs_since_improvement += 1;
        if state.epochs_since_improvement >= state.patience {
            state.lr = (state.lr * state.factor).max(state.min_lr);
            state.epochs_since_improvement = 0;
        }
    }
    state.lr
}

// ---------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------

/// Per-epoch record of the traces.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val_loss: f64,
    pub val_balanced_accuracy: f64,
}

/// Everything a finished (or aborted) run hands back.
pub struct TrainOutput {
    /// Best-validation model (parameters + importance stacks).
    pub state: ModelState,
    pub adam: AdamState,
    pub rng_state: crate::tensor::RngState,
    pub records: Vec<EpochRecord>,
    /// Per-epoch `||I_t - I_{t-1}||_F`.
    pub convergence: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_balanced_accuracy: f64,
    pub epochs_run: usize,
    /// The run hit a non-finite loss or gradient and returned the last
    /// good checkpoint.
    pub diverged: bool,
}

fn epoch_lr(config: &TrainConfig, plateau: &LrState, epoch_1based: usize) -> f64 {
    match config.lr_schedule {
        LrSchedule::Plateau => plateau.lr,
        LrSchedule::InvT => config.learning_rate / epoch_1based as f64,
    }
}

/// Validation pass: chunked deterministic forward, returning the mean
/// total loss and the metrics report.
fn validation_pass(
    state: &ModelState,
    config: &TrainConfig,
    cohort: &Cohort,
    indices: &[usize],
) -> Result<(f64, MetricsReport)> {
    let mut loss_sum = 0.0;
    let mut n = 0usize;
    let mut probs = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(256) {
        let samples: Vec<&crate::data::WindowedSample> =
            chunk.iter().map(|&i| &cohort.samples[i]).collect();
        let artifacts = forward_batch(
            state,
            &samples,
            &config.weights,
            &config.augment,
            &mut ForwardMode::Eval,
            false,
        )?;
        loss_sum += artifacts.breakdown.total * samples.len() as f64;
        n += samples.len();
        probs.extend(artifacts.probs);
    }
    let targets: Vec<Vec<f64>> = indices
        .iter()
        .map(|&i| cohort.samples[i].labels.clone())
        .collect();
    let report = evaluate_predictions(&probs, &targets, &cohort.label_names)?;
    Ok((loss_sum / n as f64, report))
}

/// Trains one seed on the configured cohort. Fully deterministic given
/// (config, seed).
pub fn train(config: &TrainConfig, seed: u64) -> Result<TrainOutput> {
    config.validate()?;
    let cohort = config.load_cohort(seed)?;
    let split = stratified_split(&cohort, config.split, seed)?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Data("train or validation split is empty".into()));
    }
    train_on(config, seed, &cohort, &split)
}

/// Trains on an explicit cohort and split (the subgroup-exclusion runs
/// build these directly).
pub fn train_on(
    config: &TrainConfig,
    seed: u64,
    cohort: &Cohort,
    split: &CohortSplit,
) -> Result<TrainOutput> {
    let sample0 = &cohort.samples[0];
    let model_config = config.model_config(
        cohort.features(),
        sample0.steps_per_window(),
        cohort.labels(),
    );

    // Class priors from the training split seed the output bias.
    let priors: Vec<f64> = {
        let mut counts = vec![0.0; cohort.labels()];
        for &i in &split.train {
            for (c, &y) in cohort.samples[i].labels.iter().enumerate() {
                counts[c] += y;
            }
        }
        counts.iter().map(|&c| c / split.train.len() as f64).collect()
    };

    let mut state = ModelState::init(model_config, seed, Some(&priors))?;
    let mut adam = AdamState::for_model(&state);
    let mut rng = SeededRng::new(seed ^ 0x7261696e); // distinct stream from init
    let mut plateau = LrState::new(
        config.learning_rate,
        config.scheduler_patience,
        config.min_lr,
    );

    let (d, s) = (state.config.features, state.config.windows);
    let hidden = config.gin_hidden;
    let classes = state.config.classes;

    let mut records = Vec::new();
    let mut convergence = Vec::new();
    let mut best_state = state.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_val_loss = f64::INFINITY;
    let mut epochs_without_improvement = 0usize;
    let mut diverged = false;
    let mut epochs_run = 0usize;

    'training: for epoch in 1..=config.epochs {
        let lr = epoch_lr(config, &plateau, epoch);
        let mut order = split.train.clone();
        rng.fork().shuffle(&mut order);

        // Epoch accumulators for the importance update.
        let mut grad_a_sum = vec![vec![0.0; d * d]; s];
        let mut grad_h_sum = vec![vec![0.0; d * hidden]; s];
        let mut label_grad_a: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; d * d]; s]; classes];
        let mut label_grad_h: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; d * hidden]; s]; classes];
        let mut label_batches = 0usize;
        let mut batches = 0usize;
        let mut train_loss_sum = LossBreakdown {
            bce: 0.0,
            contrast: 0.0,
            focal: 0.0,
            reg: 0.0,
            structural: 0.0,
            vgae: 0.0,
            total: 0.0,
        };

        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<&crate::data::WindowedSample> =
                chunk.iter().map(|&i| &cohort.samples[i]).collect();
            let tape = Tape::new();
            let attached = state.attach(&tape);
            let mut forward_rng = rng.fork();
            // Attribution gradients once per epoch, on the first batch.
            let with_per_label = batch_idx == 0;
            let artifacts = match forward_batch(
                &attached,
                &samples,
                &config.weights,
                &config.augment,
                &mut ForwardMode::Train {
                    rng: &mut forward_rng,
                },
                with_per_label,
            ) {
                Ok(a) => a,
                Err(Error::Numerical(_)) => {
                    diverged = true;
                    break 'training;
                }
                Err(e) => return Err(e),
            };

            let grads = tape.backward(&artifacts.total)?;

            // Optimizer update.
            adam.step += 1;
            let step_t = adam.step;
            let mut rejected = false;
            {
                let attached_params = attached.params();
                for ((name, param), (_, live)) in
                    attached_params.iter().zip(state.params_mut())
                {
                    let g = grads.wrt(param)?;
                    let m = adam.m.get_mut(name.as_str()).unwrap();
                    let v = adam.v.get_mut(name.as_str()).unwrap();
                    if adam_step(name, live, g.data(), m, v, step_t, lr).is_err() {
                        rejected = true;
                        break;
                    }
                }
            }
            if rejected {
                diverged = true;
                break 'training;
            }

            // Gradient magnitudes for the importance stacks.
            for t in 0..s {
                let ga = grads.wrt(&artifacts.adjacency[t])?;
                for (acc, g) in grad_a_sum[t].iter_mut().zip(ga.data()) {
                    *acc += g.abs();
                }
            }
            // Mean over samples of the last-layer node gradients.
            let n_samples = samples.len() as f64;
            for sample_hidden in &artifacts.encoder_hidden {
                for t in 0..s {
                    let h_last = sample_hidden[t].last().unwrap();
                    let gh = grads.wrt(h_last)?;
                    for (acc, g) in grad_h_sum[t].iter_mut().zip(gh.data()) {
                        *acc += g / n_samples;
                    }
                }
            }

            if let Some(per_label) = &artifacts.per_label_class_loss {
                label_batches += 1;
                for (c, loss_c) in per_label.iter().enumerate() {
                    let label_grads = tape.backward(loss_c)?;
                    for t in 0..s {
                        let ga = label_grads.wrt(&artifacts.adjacency[t])?;
                        for (acc, g) in label_grad_a[c][t].iter_mut().zip(ga.data()) {
                            *acc += g.abs();
                        }
                    }
                    for sample_hidden in &artifacts.encoder_hidden {
                        for t in 0..s {
                            let h_last = sample_hidden[t].last().unwrap();
                            let gh = label_grads.wrt(h_last)?;
                            for (acc, g) in label_grad_h[c][t].iter_mut().zip(gh.data()) {
                                *acc += g / n_samples;
                            }
                        }
                    }
                }
            }

            batches += 1;
            let b = &artifacts.breakdown;
            train_loss_sum.bce += b.bce;
            train_loss_sum.contrast += b.contrast;
            train_loss_sum.focal += b.focal;
            train_loss_sum.reg += b.reg;
            train_loss_sum.structural += b.structural;
            train_loss_sum.vgae += b.vgae;
            train_loss_sum.total += b.total;
        }
        if diverged {
            break;
        }
        epochs_run = epoch;

        // Fold epoch-mean gradient magnitudes into the importance
        // stacks and record the movement.
        let previous = state.importance.clone();
        let to_tensors = |sums: &[Vec<f64>], width: usize, scale: f64| -> Result<Vec<Tensor>> {
            sums.iter()
                .map(|buf| {
                    Tensor::new(
                        vec![d, width],
                        buf.iter().map(|v| v * scale).collect(),
                    )
                })
                .collect()
        };
        let grad_a = to_tensors(&grad_a_sum, d, 1.0 / batches as f64)?;
        let grad_h = to_tensors(&grad_h_sum, hidden, 1.0 / batches as f64)?;
        accumulate(
            &mut state.importance,
            &grad_a,
            &grad_h,
            config.importance_decay,
        )?;
        convergence.push(state.importance.distance(&previous));

        if label_batches > 0 {
            for c in 0..classes {
                let ga = to_tensors(&label_grad_a[c], d, 1.0 / label_batches as f64)?;
                let gh = to_tensors(&label_grad_h[c], hidden, 1.0 / label_batches as f64)?;
                accumulate(
                    &mut state.label_importance[c],
                    &ga,
                    &gh,
                    config.importance_decay,
                )?;
            }
        }

        // Validation, model selection, schedule, early stop.
        let (val_loss, val_report) = validation_pass(&state, config, cohort, &split.validation)?;
        let scale = 1.0 / batches.max(1) as f64;
        records.push(EpochRecord {
            epoch,
            lr,
            train: LossBreakdown {
                bce: train_loss_sum.bce * scale,
                contrast: train_loss_sum.contrast * scale,
                focal: train_loss_sum.focal * scale,
                reg: train_loss_sum.reg * scale,
                structural: train_loss_sum.structural * scale,
                vgae: train_loss_sum.vgae * scale,
                total: train_loss_sum.total * scale,
            },
            val_loss,
            val_balanced_accuracy: val_report.balanced_accuracy,
        });

        if val_report.balanced_accuracy > best_val {
            best_val = val_report.balanced_accuracy;
            best_state = state.clone();
            best_epoch = epoch;
        }
        if val_loss < best_val_loss - 1e-12 {
            best_val_loss = val_loss;
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= config.early_stop_patience {
                break;
            }
        }
        if config.lr_schedule == LrSchedule::Plateau {
            schedule(&mut plateau, val_loss);
        }
    }

    // Zero-epoch runs hand back the initialization.
    if config.epochs == 0 || best_epoch == 0 {
        best_state = state.clone();
    }

    Ok(TrainOutput {
        state: best_state,
        adam,
        rng_state: rng.state(),
        records,
        convergence,
        best_epoch,
        best_val_balanced_accuracy: best_val.max(0.0),
        epochs_run,
        diverged,
    })
}

/// Evaluates a trained model on one split of its cohort.
pub fn evaluate(
    state: &ModelState,
    cohort: &Cohort,
    indices: &[usize],
) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let samples: Vec<&crate::data::WindowedSample> =
        indices.iter().map(|&i| &cohort.samples[i]).collect();
    let probs = predict(state, &samples)?;
    let targets: Vec<Vec<f64>> = indices
        .iter()
        .map(|&i| cohort.samples[i].labels.clone())
        .collect();
    evaluate_predictions(&probs, &targets, &cohort.label_names)
}

// ---------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub per_seed_balanced_accuracy: Vec<f64>,
    pub mean_balanced_accuracy: f64,
    pub std_balanced_accuracy: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl std::fmt::Display for AblationTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<18} {:>10} {:>8}  per-seed", "variant", "bal-acc", "std")?;
        for row in &self.rows {
            let seeds: Vec<String> = row
                .per_seed_balanced_accuracy
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect();
            writeln!(
                f,
                "{:<18} {:>10.4} {:>8.4}  [{}]",
                row.variant,
                row.mean_balanced_accuracy,
                row.std_balanced_accuracy,
                seeds.join(", ")
            )?;
        }
        Ok(())
    }
}

/// Trains the reference and every requested variant with identical
/// seeds and reports test balanced accuracy. Runs fan out across
/// threads; each run stays internally deterministic.
pub fn ablate(
    config: &TrainConfig,
    flag_sets: &[crate::model::AblationFlags],
) -> Result<AblationTable> {
    let mut variants = vec![crate::model::AblationFlags::default()];
    variants.extend_from_slice(flag_sets);

    let jobs: Vec<(usize, u64)> = variants
        .iter()
        .enumerate()
        .flat_map(|(vi, _)| config.seeds.iter().map(move |&s| (vi, s)))
        .collect();
    let results: Vec<((usize, u64), Result<f64>)> = jobs
        .par_iter()
        .map(|&(vi, seed)| {
            let mut cfg = config.clone();
            cfg.ablation = variants[vi];
            let out = (|| -> Result<f64> {
                let cohort = cfg.load_cohort(seed)?;
                let split = stratified_split(&cohort, cfg.split, seed)?;
                let trained = train_on(&cfg, seed, &cohort, &split)?;
                let report = evaluate(&trained.state, &cohort, &split.test)?;
                Ok(report.balanced_accuracy)
            })();
            ((vi, seed), out)
        })
        .collect();

    let mut per_variant: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
    for ((vi, _seed), res) in results {
        per_variant[vi].push(res?);
    }
    let rows = variants
        .iter()
        .zip(per_variant)
        .map(|(flags, accs)| {
            let (mean, std) = mean_std(&accs);
            AblationRow {
                variant: flags.describe(),
                per_seed_balanced_accuracy: accs,
                mean_balanced_accuracy: mean,
                std_balanced_accuracy: std,
            }
        })
        .collect();
    Ok(AblationTable { rows })
}

// ---------------------------------------------------------------------
// Out-of-distribution runs
// ---------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OodRow {
    pub subgroup: String,
    pub ood_size: usize,
    pub per_seed_ood_balanced_accuracy: Vec<f64>,
    pub mean_ood_balanced_accuracy: f64,
    pub per_seed_indist_balanced_accuracy: Vec<f64>,
    pub mean_indist_balanced_accuracy: f64,
}

/// For each predicate: hold the subgroup out entirely, train on the
/// remainder, and evaluate on the held-out subgroup next to the
/// in-distribution validation metric. Predicates that match nothing are
/// skipped with a warning entry.
pub fn ood_run(
    config: &TrainConfig,
    predicates: &[SubgroupPredicate],
) -> Result<(Vec<OodRow>, Vec<String>)> {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for predicate in predicates {
        // The cohort depends only on the data seed, so membership can
        // be probed with the first seed.
        let probe = config.load_cohort(config.seeds[0])?;
        let (rest, ood) = match exclude_subgroup(&probe, predicate) {
            Ok(v) => v,
            Err(e) => {
                warnings.push(format!("{}: skipped ({e})", predicate.describe()));
                continue;
            }
        };
        drop((rest, ood));

        let runs: Vec<Result<(f64, f64, usize)>> = config
            .seeds
            .par_iter()
            .map(|&seed| {
                let cohort = config.load_cohort(seed)?;
                let (rest, ood) = exclude_subgroup(&cohort, predicate)?;
                // Split the remainder into train/validation only; the
                // OOD set is the test set.
                let sub = Cohort {
                    feature_names: cohort.feature_names.clone(),
                    label_names: cohort.label_names.clone(),
                    samples: rest.iter().map(|&i| cohort.samples[i].clone()).collect(),
                };
                let split = stratified_split(&sub, (0.9, 0.1, 0.0), seed)?;
                let trained = train_on(config, seed, &sub, &split)?;
                let indist = evaluate(&trained.state, &sub, &split.validation)?;
                let ood_cohort = Cohort {
                    feature_names: cohort.feature_names.clone(),
                    label_names: cohort.label_names.clone(),
                    samples: ood.iter().map(|&i| cohort.samples[i].clone()).collect(),
                };
                let all: Vec<usize> = (0..ood_cohort.len()).collect();
                let ood_report = evaluate(&trained.state, &ood_cohort, &all)?;
                Ok((
                    ood_report.balanced_accuracy,
                    indist.balanced_accuracy,
                    ood_cohort.len(),
                ))
            })
            .collect();

        let mut ood_accs = Vec::new();
        let mut id_accs = Vec::new();
        let mut size = 0;
        for run in runs {
            let (ood_acc, id_acc, n) = run?;
            ood_accs.push(ood_acc);
            id_accs.push(id_acc);
            size = n;
        }
        rows.push(OodRow {
            subgroup: predicate.describe(),
            ood_size: size,
            mean_ood_balanced_accuracy: mean_std(&ood_accs).0,
            per_seed_ood_balanced_accuracy: ood_accs,
            mean_indist_balanced_accuracy: mean_std(&id_accs).0,
            per_seed_indist_balanced_accuracy: id_accs,
        });
    }
    Ok((rows, warnings))
}

// ---------------------------------------------------------------------
// Explanation exports
// ---------------------------------------------------------------------

/// Smoothing width along the window axis for heatmap exports.
pub const HEATMAP_SMOOTH_SIGMA: f64 = 0.6;

/// Files written by one explanation pass.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExplainOutput {
    pub heatmap_csv: std::path::PathBuf,
    pub per_label_csv: Vec<std::path::PathBuf>,
    pub dot_files: Vec<std::path::PathBuf>,
    pub top_features_json: std::path::PathBuf,
    /// Globally top-ranked features, best first.
    pub top_features: Vec<String>,
    /// Per label: top-ranked features and the per-feature peak window.
    pub per_label_top: Vec<Vec<String>>,
}

/// Writes the interpretability artifacts for a trained model: the
/// normalized feature x window heatmap (Gaussian-smoothed along the
/// window axis), per-label heatmaps from the attribution stacks,
/// per-window DOT graphs, and the top-feature list.
pub fn explain(
    state: &ModelState,
    feature_names: &[String],
    label_names: &[String],
    convergence: &[f64],
    alpha: f64,
    out_dir: &std::path::Path,
) -> Result<ExplainOutput> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", out_dir.display()))))?;

    let smooth = |report: &crate::interpret::ImportanceReport| {
        let mut smoothed = report.clone();
        smoothed.scores =
            crate::interpret::gaussian_smooth_windows(&report.scores, HEATMAP_SMOOTH_SIGMA);
        smoothed
    };

    let global = crate::interpret::ImportanceReport::from_stack(
        &state.importance,
        alpha,
        feature_names,
        convergence.to_vec(),
    )?;
    let heatmap_csv = out_dir.join("importance_heatmap.csv");
    smooth(&global).write_csv(&heatmap_csv)?;

    let top_n = feature_names.len().min(10);
    let top_features: Vec<String> = global
        .top_features(top_n)
        .into_iter()
        .map(|f| feature_names[f].clone())
        .collect();

    let mut per_label_csv = Vec::new();
    let mut per_label_top = Vec::new();
    for (c, stack) in state.label_importance.iter().enumerate() {
        let report = crate::interpret::ImportanceReport::from_stack(
            stack,
            alpha,
            feature_names,
            Vec::new(),
        )?;
        let path = out_dir.join(format!("importance_{}.csv", label_names[c]));
        smooth(&report).write_csv(&path)?;
        per_label_csv.push(path);
        per_label_top.push(
            report
                .top_features(top_n)
                .into_iter()
                .map(|f| feature_names[f].clone())
                .collect(),
        );
    }

    let dot_files = crate::interpret::write_dot_graphs(
        &state.importance,
        alpha,
        feature_names,
        &out_dir.join("graphs"),
    )?;

    let top_features_json = out_dir.join("top_features.json");
    let payload = serde_json::json!({
        "global": top_features,
        "per_label": label_names
            .iter()
            .zip(&per_label_top)
            .map(|(name, tops)| serde_json::json!({"label": name, "top": tops}))
            .collect::<Vec<_>>(),
    });
    std::fs::write(&top_features_json, serde_json::to_string_pretty(&payload)?)?;

    Ok(ExplainOutput {
        heatmap_csv,
        per_label_csv,
        dot_files,
        top_features_json,
        top_features,
        per_label_top,
    })
}
