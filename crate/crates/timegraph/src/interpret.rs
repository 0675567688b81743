//! Gradient-driven importance tracking.
//!
//! Every adjacency slice is paired with a nonnegative weight slice,
//! initialized uniformly to one and multiplied into the forward pass.
//! After each epoch the weights absorb the magnitudes of the loss
//! gradients: off-diagonal entries track edge gradients, diagonal
//! entries track node-embedding gradient norms. Over training the stack
//! settles, and the per-epoch movement `delta_t = ||W_t - W_{t-1}||_F`
//! is monitored as a convergence signal.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nonnegative `d x d` weight slice per window, uniformly initialized
/// to one.
#[derive(Debug, Clone)]
pub struct ImportanceStack {
    pub slices: Vec<Tensor>,
}

impl ImportanceStack {
    pub fn uniform(d: usize, s: usize) -> Self {
        ImportanceStack {
            slices: (0..s).map(|_| Tensor::ones(&[d, d])).collect(),
        }
    }

    pub fn windows(&self) -> usize {
        self.slices.len()
    }

    pub fn nodes(&self) -> usize {
        self.slices[0].shape()[0]
    }

    /// Frobenius norm of the difference against another stack.
    pub fn distance(&self, other: &ImportanceStack) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.slices.iter().zip(&other.slices) {
            for (x, y) in a.data().iter().zip(b.data()) {
                acc += (x - y) * (x - y);
            }
        }
        acc.sqrt()
    }
}

/// Folds gradient magnitudes into the stack by exponential moving
/// average:
///
/// - edges: `I_vu <- decay * I_vu + (1 - decay) * |grad_A[v,u]|`
/// - nodes: `I_vv <- decay * I_vv + (1 - decay) * ||grad_H[v,:]||_2`
///
/// `grad_a` holds one `[d, d]` gradient slice per window and `grad_h`
/// one `[d, f]` per-node gradient block per window.
pub fn accumulate(
    stack: &mut ImportanceStack,
    grad_a: &[Tensor],
    grad_h: &[Tensor],
    decay: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Contract(format!("decay {decay} outside [0, 1)")));
    }
    let (d, s) = (stack.nodes(), stack.windows());
    if grad_a.len() != s || grad_h.len() != s {
        return Err(Error::dim(
            "accumulate",
            format!("{s} gradient slices"),
            format!("{} / {}", grad_a.len(), grad_h.len()),
        ));
    }
    for t in 0..s {
        if !grad_a[t].all_finite() || !grad_h[t].all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient in window {t}"
            )));
        }
        let f = grad_h[t].shape()[1];
        let mut next = stack.slices[t].data().to_vec();
        for v in 0..d {
            for u in 0..d {
                let incoming = if v == u {
                    let row = &grad_h[t].data()[v * f..(v + 1) * f];
                    row.iter().map(|g| g * g).sum::<f64>().sqrt()
                } else {
                    grad_a[t].at(&[v, u]).abs()
                };
                next[v * d + u] = decay * next[v * d + u] + (1.0 - decay) * incoming;
            }
        }
        stack.slices[t] = Tensor::new(vec![d, d], next)?;
    }
    Ok(())
}

/// Per-node importance for one window: a balance of the node's own
/// weight and the mean weight of its outgoing edges,
/// `I_v = alpha * I_vv + (1 - alpha) * mean_{u != v} I_vu`.
pub fn node_importance(slice: &Tensor, alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha {alpha} outside [0, 1]")));
    }
    let d = slice.shape()[0];
    let mut out = Vec::with_capacity(d);
    for v in 0..d {
        let own = slice.at(&[v, v]);
        let edge_mean = if d > 1 {
            (0..d)
                .filter(|&u| u != v)
                .map(|u| slice.at(&[v, u]))
                .sum::<f64>()
                / (d - 1) as f64
        } else {
            0.0
        };
        out.push(alpha * own + (1.0 - alpha) * edge_mean);
    }
    Ok(out)
}

/// Layer-summed gradient-norm score: for each node, the sum over layers
/// of the L2 norm of the prediction-loss gradient at that layer's node
/// embedding.
pub fn layerwise_score(per_layer_grads: &[Tensor], expected_layers: usize) -> Result<Vec<f64>> {
    if per_layer_grads.len() != expected_layers {
        return Err(Error::Contract(format!(
            "expected {expected_layers} layer gradients, got {}",
            per_layer_grads.len()
        )));
    }
    let d = per_layer_grads[0].shape()[0];
    let mut scores = vec![0.0; d];
    for layer in per_layer_grads {
        if layer.shape()[0] != d {
            return Err(Error::dim(
                "layerwise_score",
                format!("{d} nodes"),
                format!("{}", layer.shape()[0]),
            ));
        }
        let f = layer.shape()[1];
        for v in 0..d {
            let row = &layer.data()[v * f..(v + 1) * f];
            scores[v] += row.iter().map(|g| g * g).sum::<f64>().sqrt();
        }
    }
    Ok(scores)
}

/// Min-max normalization across the feature axis, one window at a time.
/// A constant window maps to all zeros.
pub fn normalize_report(per_window_scores: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if per_window_scores.is_empty() {
        return Err(Error::Contract("normalize_report on empty input".into()));
    }
    let mut out = Vec::with_capacity(per_window_scores.len());
    for scores in per_window_scores {
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range == 0.0 {
            out.push(vec![0.0; scores.len()]);
        } else {
            out.push(scores.iter().map(|v| (v - lo) / range).collect());
        }
    }
    Ok(out)
}

/// Verdict from fitting the tail of a convergence trace.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConvergenceVerdict {
    pub pass: bool,
    /// Least-squares slope of `log delta_t` over the fitted tail.
    pub slope: f64,
    pub delta_last: f64,
    pub delta_max: f64,
}

/// Fits the log movement over the last `window` epochs. Passes when the
/// fitted slope is non-positive and the last movement has at least
/// halved from its peak.
pub fn convergence_check(trace: &[f64], window: usize) -> Result<ConvergenceVerdict> {
    if trace.len() < window {
        return Err(Error::Data(format!(
            "convergence check needs {window} epochs, have {}",
            trace.len()
        )));
    }
    let delta_max = trace.iter().cloned().fold(0.0, f64::max);
    let delta_last = *trace.last().unwrap();
    let tail = &trace[trace.len() - window..];
    // Zero movement is log-degenerate; clamp far below any real signal.
    let logs: Vec<f64> = tail.iter().map(|&d| d.max(1e-300).ln()).collect();
    let n = window as f64;
    let mean_x = (window - 1) as f64 / 2.0;
    let mean_y = logs.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, y) in logs.iter().enumerate() {
        let dx = i as f64 - mean_x;
        num += dx * (y - mean_y);
        den += dx * dx;
    }
    let slope = num / den;
    let pass = slope <= 0.0 && delta_last <= delta_max / 2.0;
    Ok(ConvergenceVerdict {
        pass,
        slope,
        delta_last,
        delta_max,
    })
}

/// Gaussian smoothing along the window axis of a `[windows][features]`
/// score matrix, with kernel renormalization at the boundaries.
pub fn gaussian_smooth_windows(scores: &[Vec<f64>], sigma: f64) -> Vec<Vec<f64>> {
    if sigma <= 0.0 || scores.len() < 2 {
        return scores.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|o| (-(o as f64 * o as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s = scores.len();
    let d = scores[0].len();
    let mut out = vec![vec![0.0; d]; s];
    for f in 0..d {
        for t in 0..s {
            let mut acc = 0.0;
            let mut weight = 0.0;
            for (ki, o) in (-radius..=radius).enumerate() {
                let src = t as isize + o;
                if src >= 0 && (src as usize) < s {
                    acc += kernel[ki] * scores[src as usize][f];
                    weight += kernel[ki];
                }
            }
            out[t][f] = acc / weight;
        }
    }
    out
}

/// Normalized per-feature, per-window importance scores plus the
/// convergence trace of the weight stack.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImportanceReport {
    pub feature_names: Vec<String>,
    /// `[windows][features]`, min-max normalized per window.
    pub scores: Vec<Vec<f64>>,
    /// Per-epoch `||W_t - W_{t-1}||_F`.
    pub trace: Vec<f64>,
}

impl ImportanceReport {
    /// Builds the default report from the weight stack: per-window node
    /// importance, min-max normalized across features.
    pub fn from_stack(
        stack: &ImportanceStack,
        alpha: f64,
        feature_names: &[String],
        trace: Vec<f64>,
    ) -> Result<Self> {
        let raw: Vec<Vec<f64>> = stack
            .slices
            .iter()
            .map(|slice| node_importance(slice, alpha))
            .collect::<Result<_>>()?;
        Ok(ImportanceReport {
            feature_names: feature_names.to_vec(),
            scores: normalize_report(&raw)?,
            trace,
        })
    }

    /// Features ranked by mean normalized score over all windows; ties
    /// resolved towards the lower feature index.
    pub fn top_features(&self, n: usize) -> Vec<usize> {
        let d = self.feature_names.len();
        let mut means: Vec<(usize, f64)> = (0..d)
            .map(|f| {
                let m = self.scores.iter().map(|w| w[f]).sum::<f64>() / self.scores.len() as f64;
                (f, m)
            })
            .collect();
        means.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        means.into_iter().take(n).map(|(f, _)| f).collect()
    }

    /// Feature x window CSV, one row per feature.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header = vec!["feature".to_string()];
        header.extend((0..self.scores.len()).map(|t| format!("window_{t}")));
        wtr.write_record(&header)?;
        for (f, name) in self.feature_names.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.scores.iter().map(|w| format!("{:.17e}", w[f])));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parses a CSV produced by [`write_csv`]. Round-trips losslessly.
    pub fn read_csv(path: &Path, trace: Vec<f64>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let windows = rdr.headers()?.len() - 1;
        let mut feature_names = Vec::new();
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); windows];
        for rec in rdr.records() {
            let rec = rec?;
            feature_names.push(rec[0].to_string());
            for t in 0..windows {
                let v: f64 = rec[t + 1]
                    .parse()
                    .map_err(|e| Error::Data(format!("bad score cell: {e}")))?;
                columns[t].push(v);
            }
        }
        Ok(ImportanceReport {
            feature_names,
            scores: columns,
            trace,
        })
    }
}

/// Writes one DOT graph per window: node size follows node importance,
/// edge darkness follows edge weight.
pub fn write_dot_graphs(
    stack: &ImportanceStack,
    alpha: f64,
    feature_names: &[String],
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (t, slice) in stack.slices.iter().enumerate() {
        let nodes = node_importance(slice, alpha)?;
        let norm_nodes = normalize_report(&[nodes])?.pop().unwrap();
        let d = slice.shape()[0];
        let max_edge = slice
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| i / d != i % d)
            .map(|(_, v)| v.abs())
            .fold(0.0, f64::max);
        let path = dir.join(format!("window_{t}.dot"));
        let mut out = std::fs::File::create(&path)?;
        writeln!(out, "digraph window_{t} {{")?;
        writeln!(out, "  node [shape=circle, style=filled, fillcolor=lightblue];")?;
        for (v, name) in feature_names.iter().enumerate() {
            let size = 0.4 + norm_nodes[v];
            writeln!(
                out,
                "  n{v} [label=\"{name}\", width={size:.3}, height={size:.3}];"
            )?;
        }
        for v in 0..d {
            for u in 0..d {
                if v == u {
                    continue;
                }
                let w = slice.at(&[v, u]).abs();
                if w == 0.0 {
                    continue;
                }
                let shade = if max_edge > 0.0 { w / max_edge } else { 0.0 };
                let gray = (90.0 - 90.0 * shade) as u8;
                writeln!(out, "  n{v} -> n{u} [color=gray{gray}];")?;
            }
        }
        writeln!(out, "}}")?;
        paths.push(path);
    }
    Ok(paths)
}
