//! End-to-end model: parameters, forward pass, and loss wiring.
//!
//! One forward pass over a batch:
//!
//! 1. build the shared adjacency stack from the node embeddings
//!    (propagation, outer products, top-k masks),
//! 2. per sample, run the LSTM over the windows for the embedding
//!    stack, fuse `G_t = (A_t .* I_t) + E_t`,
//! 3. per window, encode with the GIN, sample the latent, decode to
//!    edge probabilities, and collect reconstruction / smoothness
//!    terms,
//! 4. pool the latent node series and pooled adjacencies through the
//!    convolutional mixing layer, classify,
//! 5. combine classification BCE, focal, contrastive (on augmented
//!    adjacency views), smoothness, structural, and reconstruction
//!    losses into the training objective.
//!
//! The latent node series feeds the feature pooling; the decoder's
//! reconstruction feeds the adjacency pooling. During evaluation the
//! latent collapses to its mean and dropout is off.

use crate::assemble::{assemble, AssembleMode};
use crate::augment::{contrastive_loss, make_negative, make_positive, AugmentConfig};
use crate::data::WindowedSample;
use crate::error::{Error, Result};
use crate::graph::{build_stack, init_embeddings, NodeEmbeddings};
use crate::interpret::ImportanceStack;
use crate::losses::{
    bce_loss, edges_of, focal_loss, reg_loss, structural_loss, total_loss, LossBreakdown,
    LossComponents, LossWeights,
};
use crate::lstm::{embed_windows_batch, EmbeddingStack, LstmParams};
use crate::pooling::{classify, mixing_matrix, pool_adjacency, pool_features, ClassifierHead, PoolLayer};
use crate::tensor::{SeededRng, Tape, Tensor};
use crate::vgae::{binarize, decode, encode, reparameterize_with, vgae_loss, VgaeParams};

/// Module switches for ablation runs: `true` removes the module.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Drop augmentation and the contrastive term.
    pub aug: bool,
    /// Drop the focal term.
    pub foc: bool,
    /// Drop the LSTM embeddings (zero embedding stack).
    pub lstm: bool,
    /// Drop the smoothness regularizer.
    pub reg: bool,
    /// Drop the structural term.
    pub struc: bool,
    /// Bypass temporal graph pooling (classify the unpooled flatten).
    pub tgp: bool,
}

impl AblationFlags {
    pub fn parse_list(flags: &str) -> Result<Self> {
        let mut out = AblationFlags::default();
        for flag in flags.split(',').filter(|f| !f.is_empty()) {
            match flag.trim().to_ascii_uppercase().as_str() {
                "AUG" => out.aug = true,
                "FOC" => out.foc = true,
                "LSTM" => out.lstm = true,
                "REG" => out.reg = true,
                "STRUC" => out.struc = true,
                "TGP" => out.tgp = true,
                other => return Err(Error::Config(format!("unknown ablation flag '{other}'"))),
            }
        }
        Ok(out)
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.aug, "AUG"),
            (self.foc, "FOC"),
            (self.lstm, "LSTM"),
            (self.reg, "REG"),
            (self.struc, "STRUC"),
            (self.tgp, "TGP"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "Ref".to_string()
        } else {
            format!("w/out {}", parts.join("+"))
        }
    }
}

/// Architecture hyperparameters, fixed for a run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub features: usize,
    pub windows: usize,
    pub steps_per_window: usize,
    pub classes: usize,
    /// Retained off-diagonal entries per adjacency row.
    pub k: usize,
    /// Cross-window propagation coefficient.
    pub rho: f64,
    pub gin_hidden: usize,
    pub latent: usize,
    pub pool_ratio: f64,
    pub pool_kernel: usize,
    pub mlp_hidden: usize,
    pub mlp_depth: usize,
    pub dropout: f64,
    pub assemble_mode: AssembleMode,
    pub ablation: AblationFlags,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.features;
        if d < 2 {
            return Err(Error::Config("need at least 2 features".into()));
        }
        if self.k == 0 || self.k > d - 1 {
            return Err(Error::Config(format!("k = {} outside 1..={}", self.k, d - 1)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho = {} outside [0, 1)", self.rho)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout = {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.pool_ratio) || self.pooled_nodes() == 0 {
            return Err(Error::Config(format!("pool_ratio = {} unusable", self.pool_ratio)));
        }
        if self.pool_kernel == 0 || self.pool_kernel > self.windows {
            return Err(Error::Config(format!(
                "pool_kernel = {} outside 1..={}",
                self.pool_kernel, self.windows
            )));
        }
        if self.mlp_depth < 2 {
            return Err(Error::Config("classifier needs depth >= 2".into()));
        }
        if self.assemble_mode == AssembleMode::Concat {
            return Err(Error::Config(
                "concat fusion widens slices to d x 3d; the pooling path requires square slices. \
                 Use it through assemble() directly for comparisons."
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn pooled_nodes(&self) -> usize {
        ((self.features as f64) * self.pool_ratio).ceil() as usize
    }

    pub fn pooled_steps(&self) -> usize {
        self.windows - self.pool_kernel + 1
    }

    /// Width of the flattened classifier input under the flags.
    pub fn classifier_input(&self) -> usize {
        let d = self.features;
        let s = self.windows;
        if self.ablation.tgp {
            // Unpooled: latent node series plus reconstructed slices.
            d * self.latent * s + d * d * s
        } else {
            let n_out = self.pooled_nodes();
            n_out * self.latent * self.pooled_steps() + n_out * n_out * s
        }
    }
}

/// All learnable parameters plus the importance state.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub embeddings: NodeEmbeddings,
    pub lstm: LstmParams,
    pub vgae: VgaeParams,
    pub pool: PoolLayer,
    pub head: ClassifierHead,
    /// Gradient-magnitude importance stack (updated by EMA, not the
    /// optimizer).
    pub importance: ImportanceStack,
    /// Per-label attribution stacks, same update rule driven by each
    /// label's classification loss.
    pub label_importance: Vec<ImportanceStack>,
}

impl ModelState {
    /// Seeded initialization. `label_priors`, when given, initializes
    /// the classifier's output bias at the class log-odds.
    pub fn init(config: ModelConfig, seed: u64, label_priors: Option<&[f64]>) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let d = config.features;
        let s = config.windows;
        let embeddings = init_embeddings(d, s, rng.fork().seed())?;
        let lstm = LstmParams::init(d, &mut rng);
        let vgae = VgaeParams::init(d, d, config.gin_hidden, config.latent, &mut rng);
        let pool = PoolLayer::init(d, config.pooled_nodes(), config.pool_kernel, &mut rng)?;
        let mut head = ClassifierHead::init(
            config.classifier_input(),
            config.mlp_hidden,
            config.classes,
            config.mlp_depth,
            &mut rng,
        );
        if let Some(priors) = label_priors {
            if priors.len() != config.classes {
                return Err(Error::Config(format!(
                    "{} priors for {} classes",
                    priors.len(),
                    config.classes
                )));
            }
            let logits: Vec<f64> = priors
                .iter()
                .map(|&p| {
                    let p = p.clamp(1e-3, 1.0 - 1e-3);
                    (p / (1.0 - p)).ln()
                })
                .collect();
            *head.biases.last_mut().unwrap() = Tensor::from_vec(logits);
        }
        let importance = ImportanceStack::uniform(d, s);
        let label_importance = vec![ImportanceStack::uniform(d, s); config.classes];
        Ok(ModelState {
            config,
            embeddings,
            lstm,
            vgae,
            pool,
            head,
            importance,
            label_importance,
        })
    }

    /// Named views of every learnable tensor, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![
            ("theta".into(), &self.embeddings.theta),
            ("psi".into(), &self.embeddings.psi),
            ("lstm.w_input".into(), &self.lstm.w_input),
            ("lstm.w_forget".into(), &self.lstm.w_forget),
            ("lstm.w_cell".into(), &self.lstm.w_cell),
            ("lstm.w_output".into(), &self.lstm.w_output),
            ("lstm.u_input".into(), &self.lstm.u_input),
            ("lstm.u_forget".into(), &self.lstm.u_forget),
            ("lstm.u_cell".into(), &self.lstm.u_cell),
            ("lstm.u_output".into(), &self.lstm.u_output),
            ("lstm.b_input".into(), &self.lstm.b_input),
            ("lstm.b_forget".into(), &self.lstm.b_forget),
            ("lstm.b_cell".into(), &self.lstm.b_cell),
            ("lstm.b_output".into(), &self.lstm.b_output),
        ];
        for (i, layer) in self.vgae.enc.iter().enumerate() {
            v.push((format!("vgae.enc{i}.eps"), &layer.eps));
            v.push((format!("vgae.enc{i}.w1"), &layer.w1));
            v.push((format!("vgae.enc{i}.b1"), &layer.b1));
            v.push((format!("vgae.enc{i}.w2"), &layer.w2));
            v.push((format!("vgae.enc{i}.b2"), &layer.b2));
        }
        v.push(("vgae.w_mu".into(), &self.vgae.w_mu));
        v.push(("vgae.b_mu".into(), &self.vgae.b_mu));
        v.push(("vgae.w_logvar".into(), &self.vgae.w_logvar));
        v.push(("vgae.b_logvar".into(), &self.vgae.b_logvar));
        for (i, layer) in self.vgae.dec.iter().enumerate() {
            v.push((format!("vgae.dec{i}.eps"), &layer.eps));
            v.push((format!("vgae.dec{i}.w1"), &layer.w1));
            v.push((format!("vgae.dec{i}.b1"), &layer.b1));
            v.push((format!("vgae.dec{i}.w2"), &layer.w2));
            v.push((format!("vgae.dec{i}.b2"), &layer.b2));
        }
        v.push(("vgae.w_proj".into(), &self.vgae.w_proj));
        v.push(("vgae.b_proj".into(), &self.vgae.b_proj));
        v.push(("pool.w".into(), &self.pool.w));
        v.push(("pool.b".into(), &self.pool.b));
        v.push(("pool.v".into(), &self.pool.v));
        for (i, w) in self.head.weights.iter().enumerate() {
            v.push((format!("head.w{i}"), w));
        }
        for (i, b) in self.head.biases.iter().enumerate() {
            v.push((format!("head.b{i}"), b));
        }
        v
    }

    /// Mutable counterpart of [`params`], same names and order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<(String, &mut Tensor)> = vec![
            ("theta".into(), &mut self.embeddings.theta),
            ("psi".into(), &mut self.embeddings.psi),
            ("lstm.w_input".into(), &mut self.lstm.w_input),
            ("lstm.w_forget".into(), &mut self.lstm.w_forget),
            ("lstm.w_cell".into(), &mut self.lstm.w_cell),
            ("lstm.w_output".into(), &mut self.lstm.w_output),
            ("lstm.u_input".into(), &mut self.lstm.u_input),
            ("lstm.u_forget".into(), &mut self.lstm.u_forget),
            ("lstm.u_cell".into(), &mut self.lstm.u_cell),
            ("lstm.u_output".into(), &mut self.lstm.u_output),
            ("lstm.b_input".into(), &mut self.lstm.b_input),
            ("lstm.b_forget".into(), &mut self.lstm.b_forget),
            ("lstm.b_cell".into(), &mut self.lstm.b_cell),
            ("lstm.b_output".into(), &mut self.lstm.b_output),
        ];
        for (i, layer) in self.vgae.enc.iter_mut().enumerate() {
            v.push((format!("vgae.enc{i}.eps"), &mut layer.eps));
            v.push((format!("vgae.enc{i}.w1"), &mut layer.w1));
            v.push((format!("vgae.enc{i}.b1"), &mut layer.b1));
            v.push((format!("vgae.enc{i}.w2"), &mut layer.w2));
            v.push((format!("vgae.enc{i}.b2"), &mut layer.b2));
        }
        v.push(("vgae.w_mu".into(), &mut self.vgae.w_mu));
        v.push(("vgae.b_mu".into(), &mut self.vgae.b_mu));
        v.push(("vgae.w_logvar".into(), &mut self.vgae.w_logvar));
        v.push(("vgae.b_logvar".into(), &mut self.vgae.b_logvar));
        for (i, layer) in self.vgae.dec.iter_mut().enumerate() {
            v.push((format!("vgae.dec{i}.eps"), &mut layer.eps));
            v.push((format!("vgae.dec{i}.w1"), &mut layer.w1));
            v.push((format!("vgae.dec{i}.b1"), &mut layer.b1));
            v.push((format!("vgae.dec{i}.w2"), &mut layer.w2));
            v.push((format!("vgae.dec{i}.b2"), &mut layer.b2));
        }
        v.push(("vgae.w_proj".into(), &mut self.vgae.w_proj));
        v.push(("vgae.b_proj".into(), &mut self.vgae.b_proj));
        v.push(("pool.w".into(), &mut self.pool.w));
        v.push(("pool.b".into(), &mut self.pool.b));
        v.push(("pool.v".into(), &mut self.pool.v));
        for (i, w) in self.head.weights.iter_mut().enumerate() {
            v.push((format!("head.w{i}"), w));
        }
        for (i, b) in self.head.biases.iter_mut().enumerate() {
            v.push((format!("head.b{i}"), b));
        }
        v
    }

    /// Copy with every learnable tensor attached to `tape`.
    pub fn attach(&self, tape: &Tape) -> ModelState {
        let mut out = self.clone();
        for (_, t) in out.params_mut() {
            *t = tape.attach(t);
        }
        out
    }
}

/// Mode of a forward pass.
pub enum ForwardMode<'a> {
    /// Dropout, sampled latents, contrastive views.
    Train { rng: &'a mut SeededRng },
    /// Deterministic: latent collapses to the mean, no dropout, no
    /// contrastive term.
    Eval,
}

/// Everything the trainer needs back from one batch pass.
pub struct ForwardArtifacts {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    /// Per-sample sigmoid probabilities (detached copies).
    pub probs: Vec<Vec<f64>>,
    /// Shared adjacency slices, attached.
    pub adjacency: Vec<Tensor>,
    /// Per sample, per window, per encoder layer node embeddings.
    pub encoder_hidden: Vec<Vec<Vec<Tensor>>>,
    /// Mean classification loss per label (BCE + weighted focal on one
    /// label), present when requested.
    pub per_label_class_loss: Option<Vec<Tensor>>,
}

/// Runs a batch through the assembled model on `tape`. Parameters must
/// already be attached to the same tape (see [`ModelState::attach`]).
pub fn forward_batch(
    attached: &ModelState,
    batch: &[&WindowedSample],
    weights: &LossWeights,
    augment: &AugmentConfig,
    mode: &mut ForwardMode,
    with_per_label: bool,
) -> Result<ForwardArtifacts> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let config = &attached.config;
    let (d, s) = (config.features, config.windows);
    let classes = config.classes;

    // Shared learned graph for the step.
    let adjacency = build_stack(&attached.embeddings, config.k, config.rho)?;
    let binarized: Vec<Tensor> = adjacency.slices.iter().map(binarize).collect();
    let edge_sets: Vec<Vec<(usize, usize)>> = adjacency.slices.iter().map(edges_of).collect();
    // Importance weights multiply the adjacency. They are a constant
    // of the step (their own update rule is the gradient-magnitude
    // EMA), entering the tape as leaves.
    let importance = &attached.importance.slices;

    let mut sum_bce: Option<Tensor> = None;
    let mut sum_focal: Option<Tensor> = None;
    let mut sum_vgae: Option<Tensor> = None;
    let mut sum_reg: Option<Tensor> = None;
    let mut per_label_sums: Vec<Option<Tensor>> = vec![None; classes];
    let mut probs_out = Vec::with_capacity(batch.len());
    let mut encoder_hidden = Vec::with_capacity(batch.len());

    let add_to = |acc: &mut Option<Tensor>, term: Tensor| -> Result<()> {
        *acc = Some(match acc.take() {
            None => term,
            Some(a) => a.add(&term)?,
        });
        Ok(())
    };

    // Window embeddings for the whole batch in one recurrence (or zero
    // stacks under the ablation).
    let embeddings: Vec<EmbeddingStack> = if config.ablation.lstm {
        batch
            .iter()
            .map(|_| EmbeddingStack {
                slices: (0..s).map(|_| Tensor::zeros(&[d, d])).collect(),
            })
            .collect()
    } else {
        let xs: Vec<&Tensor> = batch.iter().map(|sample| &sample.x).collect();
        embed_windows_batch(&xs, &attached.lstm)?
    };

    for (sample, embedding) in batch.iter().zip(&embeddings) {
        let assembled = assemble(
            &adjacency.slices,
            importance,
            &embedding.slices,
            config.assemble_mode,
        )?;

        let mut mu_slices = Vec::with_capacity(s);
        let mut recon_slices = Vec::with_capacity(s);
        let mut sample_hidden = Vec::with_capacity(s);
        let mut sample_vgae: Option<Tensor> = None;
        let mut sample_reg: Option<Tensor> = None;
        for t in 0..s {
            let (mu, logvar, hidden) = encode(&assembled.slices[t], &attached.vgae)?;
            let z = match mode {
                ForwardMode::Train { rng } => {
                    let noise = Tensor::normal(mu.shape(), 1.0, rng);
                    reparameterize_with(&mu, &logvar, &noise)?
                }
                ForwardMode::Eval => mu.clone(),
            };
            let recon = decode(&z, &attached.vgae)?;
            add_to(
                &mut sample_vgae,
                vgae_loss(&binarized[t], &recon, &mu, &logvar)?,
            )?;
            let _ = &z;
            if !config.ablation.reg {
                add_to(&mut sample_reg, reg_loss(&hidden[0], &edge_sets[t])?)?;
            }
            mu_slices.push(mu);
            recon_slices.push(recon);
            sample_hidden.push(hidden);
        }
        add_to(&mut sum_vgae, sample_vgae.unwrap().scale(1.0 / s as f64)?)?;
        if let Some(r) = sample_reg {
            add_to(&mut sum_reg, r.scale(1.0 / s as f64)?)?;
        }
        encoder_hidden.push(sample_hidden);

        // Latent node series [d, latent, s]: the posterior means. The
        // sampled z drives reconstruction; the classification path
        // reads the noise-free statistic.
        let mu_views: Vec<Tensor> = mu_slices
            .iter()
            .map(|mu| mu.reshape(&[d, config.latent, 1]))
            .collect::<Result<_>>()?;
        let mu_refs: Vec<&Tensor> = mu_views.iter().collect();
        let latent_series = Tensor::concat_last(&mu_refs)?;

        // Classifier input.
        let flat = if config.ablation.tgp {
            let mut parts = vec![latent_series.flatten()?];
            for recon in &recon_slices {
                parts.push(recon.flatten()?);
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            Tensor::concat_last(&refs)?
        } else {
            let feats = pool_features(&latent_series, &attached.pool)?;
            let m = mixing_matrix(&attached.pool)?;
            let mut parts = vec![feats.flatten()?];
            for recon in &recon_slices {
                parts.push(pool_adjacency(&m, recon)?.flatten()?);
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            Tensor::concat_last(&refs)?
        };
        let logits = match mode {
            ForwardMode::Train { rng } => {
                classify(&attached.head, &flat, Some((config.dropout, rng)))?
            }
            ForwardMode::Eval => classify(&attached.head, &flat, None)?,
        };
        let probs = logits.sigmoid()?;
        probs_out.push(probs.data().to_vec());

        add_to(&mut sum_bce, bce_loss(&probs, &sample.labels)?)?;
        if !config.ablation.foc {
            add_to(
                &mut sum_focal,
                focal_loss(&probs, &sample.labels, weights.gamma)?,
            )?;
        }
        if with_per_label {
            let probs_col = probs.reshape(&[classes, 1])?;
            for c in 0..classes {
                let p_c = probs_col.row(c)?;
                let y_c = [sample.labels[c]];
                let mut term = bce_loss(&p_c, &y_c)?;
                if !config.ablation.foc {
                    term = term.add(&focal_loss(&p_c, &y_c, weights.gamma)?.scale(weights.focal)?)?;
                }
                add_to(&mut per_label_sums[c], term)?;
            }
        }
    }

    let n = batch.len() as f64;
    let zero = || Tensor::scalar(0.0).sum();
    let bce = sum_bce.unwrap().scale(1.0 / n)?;
    let focal = match sum_focal {
        Some(t) => t.scale(1.0 / n)?,
        None => zero()?,
    };
    let vgae = sum_vgae.unwrap().scale(1.0 / n)?;
    let reg = match sum_reg {
        Some(t) => t.scale(1.0 / n)?,
        None => zero()?,
    };

    // Structural coherence of consecutive learned graphs.
    let structural = if config.ablation.struc {
        zero()?
    } else {
        structural_loss(&adjacency.slices)?.0
    };

    // Contrastive term over augmented adjacency views, training only.
    let contrast = match (&config.ablation.aug, &mut *mode) {
        (false, ForwardMode::Train { rng }) => {
            let anchor = adjacency.stacked()?;
            let positive = make_positive(&adjacency, augment, rng)?.stacked()?;
            let mut negatives = Vec::with_capacity(augment.negatives);
            for _ in 0..augment.negatives {
                // Batch members share the learned stack, so negatives
                // fall back to relabeled copies.
                negatives.push(make_negative(&adjacency, rng, &[])?.stacked()?);
            }
            contrastive_loss(&anchor, &positive, &negatives)?
        }
        _ => zero()?,
    };

    let components = LossComponents {
        bce,
        contrast,
        focal,
        reg,
        structural,
        vgae,
    };
    let (total, breakdown) = total_loss(&components, weights)?;

    let per_label_class_loss = if with_per_label {
        Some(
            per_label_sums
                .into_iter()
                .map(|acc| acc.unwrap().scale(1.0 / n))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    Ok(ForwardArtifacts {
        total,
        breakdown,
        probs: probs_out,
        adjacency: adjacency.slices,
        encoder_hidden,
        per_label_class_loss,
    })
}

/// Convenience evaluation pass: detached (recording-free) forward over
/// samples, returning per-sample probabilities.
pub fn predict(state: &ModelState, samples: &[&WindowedSample]) -> Result<Vec<Vec<f64>>> {
    let weights = LossWeights::default();
    let augment = AugmentConfig::default();
    let mut probs = Vec::with_capacity(samples.len());
    // Chunk to keep intermediate allocation bounded; values are
    // identical regardless of chunking.
    for chunk in samples.chunks(256) {
        let artifacts = forward_batch(
            state,
            chunk,
            &weights,
            &augment,
            &mut ForwardMode::Eval,
            false,
        )?;
        probs.extend(artifacts.probs);
    }
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, PlantedRule, SynthSpec};
    use crate::graph::AdjacencyStack;

    pub(crate) fn tiny_config(ablation: AblationFlags) -> ModelConfig {
        ModelConfig {
            features: 4,
            windows: 3,
            steps_per_window: 2,
            classes: 2,
            k: 2,
            rho: 0.5,
            gin_hidden: 5,
            latent: 3,
            pool_ratio: 0.5,
            pool_kernel: 2,
            mlp_hidden: 8,
            mlp_depth: 4,
            dropout: 0.5,
            assemble_mode: AssembleMode::HadamardAdd,
            ablation,
        }
    }

    fn tiny_cohort() -> crate::data::Cohort {
        synth_generate(&SynthSpec {
            n_samples: 6,
            features: 4,
            length: 6,
            windows: 3,
            labels: 2,
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
                    window: 2,
                    positive_corr: true,
                    label: 1,
                    gate: None,
                },
            ],
            positive_rates: vec![0.3, 0.3],
            noise: 0.0,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn forward_runs_and_losses_are_finite() {
        let cohort = tiny_cohort();
        let state = ModelState::init(tiny_config(AblationFlags::default()), 42, None).unwrap();
        let tape = Tape::new();
        let attached = state.attach(&tape);
        let batch: Vec<&WindowedSample> = cohort.samples.iter().collect();
        let mut rng = SeededRng::new(7);
        let artifacts = forward_batch(
            &attached,
            &batch,
            &LossWeights::default(),
            &AugmentConfig::default(),
            &mut ForwardMode::Train { rng: &mut rng },
            true,
        )
        .unwrap();
        assert!(artifacts.breakdown.total.is_finite());
        assert!(artifacts.breakdown.bce > 0.0);
        assert!(artifacts.breakdown.vgae > 0.0);
        assert_eq!(artifacts.probs.len(), 6);
        assert_eq!(artifacts.per_label_class_loss.as_ref().unwrap().len(), 2);
        // Backward reaches every parameter bucket.
        let grads = tape.backward(&artifacts.total).unwrap();
        let g_theta = grads.wrt(&attached.embeddings.theta).unwrap();
        assert!(g_theta.data().iter().any(|&v| v != 0.0));
        let g_w = grads.wrt(&attached.head.weights[0]).unwrap();
        assert!(g_w.data().iter().any(|&v| v != 0.0));
        let g_lstm = grads.wrt(&attached.lstm.w_cell).unwrap();
        assert!(g_lstm.data().iter().any(|&v| v != 0.0));
        let g_pool = grads.wrt(&attached.pool.v).unwrap();
        assert!(g_pool.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let cohort = tiny_cohort();
        let state = ModelState::init(tiny_config(AblationFlags::default()), 42, None).unwrap();
        let batch: Vec<&WindowedSample> = cohort.samples.iter().collect();
        let a = predict(&state, &batch).unwrap();
        let b = predict(&state, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablation_flags_change_components() {
        let cohort = tiny_cohort();
        let batch: Vec<&WindowedSample> = cohort.samples.iter().collect();
        let weights = LossWeights::default();
        let augment = AugmentConfig::default();

        let run = |flags: AblationFlags| -> LossBreakdown {
            let state = ModelState::init(tiny_config(flags), 42, None).unwrap();
            let tape = Tape::new();
            let attached = state.attach(&tape);
            let mut rng = SeededRng::new(7);
            forward_batch(
                &attached,
                &batch,
                &weights,
                &augment,
                &mut ForwardMode::Train { rng: &mut rng },
                false,
            )
            .unwrap()
            .breakdown
        };

        let reference = run(AblationFlags::default());
        assert!(reference.contrast > 0.0);
        assert!(reference.focal > 0.0);
        assert!(reference.reg > 0.0);

        let no_aug = run(AblationFlags { aug: true, ..Default::default() });
        assert_eq!(no_aug.contrast, 0.0);
        let no_foc = run(AblationFlags { foc: true, ..Default::default() });
        assert_eq!(no_foc.focal, 0.0);
        let no_reg = run(AblationFlags { reg: true, ..Default::default() });
        assert_eq!(no_reg.reg, 0.0);
        let no_struc = run(AblationFlags { struc: true, ..Default::default() });
        assert_eq!(no_struc.structural, 0.0);
        let no_tgp = run(AblationFlags { tgp: true, ..Default::default() });
        assert!(no_tgp.total.is_finite());
    }

    #[test]
    fn flag_parsing() {
        let flags = AblationFlags::parse_list("AUG,FOC").unwrap();
        assert!(flags.aug && flags.foc && !flags.tgp);
        assert_eq!(flags.describe(), "w/out AUG+FOC");
        assert_eq!(AblationFlags::default().describe(), "Ref");
        assert!(AblationFlags::parse_list("NOPE").is_err());
    }

    #[test]
    fn full_pipeline_gradient_check_with_frozen_stochasticity() {
        // The assembled pass end to end, against finite differences on
        // the source embeddings, with masks and noise held fixed: the
        // checked path includes propagation, outer products, top-k
        // masks, fusion, GIN encoding, reparameterization, decoding,
        // pooling, classification, and every loss term.
        let cohort = tiny_cohort();
        let sample = &cohort.samples[0];
        let state = ModelState::init(tiny_config(AblationFlags::default()), 42, None).unwrap();
        let mut rng = SeededRng::new(3);
        let noise: Vec<Tensor> = (0..3)
            .map(|_| Tensor::normal(&[4, 3], 1.0, &mut rng))
            .collect();
        // Freeze the top-k masks at the base point.
        let masks: Vec<Vec<f64>> = {
            let eff = crate::graph::propagate(&state.embeddings, 0.5).unwrap();
            (0..3)
                .map(|t| {
                    let dense = crate::graph::build_adjacency(
                        &eff.theta.row(t).unwrap(),
                        &eff.psi.row(t).unwrap(),
                    )
                    .unwrap();
                    crate::graph::topk_mask(&dense, 2).unwrap()
                })
                .collect()
        };

        let err = crate::tensor::grad_check(
            |theta| {
                let emb = NodeEmbeddings {
                    theta: theta.clone(),
                    psi: state.embeddings.psi.clone(),
                };
                let eff = crate::graph::propagate(&emb, 0.5)?;
                let mut slices = Vec::new();
                for t in 0..3 {
                    let dense =
                        crate::graph::build_adjacency(&eff.theta.row(t)?, &eff.psi.row(t)?)?;
                    slices.push(dense.apply_mask(&masks[t])?);
                }
                let binarized: Vec<Tensor> = slices.iter().map(binarize).collect();
                let edge_sets: Vec<Vec<(usize, usize)>> = slices.iter().map(edges_of).collect();
                let embedding = embed_windows(&sample.x, &state.lstm)?;
                let assembled = assemble(
                    &slices,
                    &state.importance.slices,
                    &embedding.slices,
                    AssembleMode::HadamardAdd,
                )?;
                let mut z_views = Vec::new();
                let mut recon_slices = Vec::new();
                let mut vgae_total: Option<Tensor> = None;
                let mut reg_total: Option<Tensor> = None;
                for t in 0..3 {
                    let (mu, logvar, hidden) = encode(&assembled.slices[t], &state.vgae)?;
                    let z = reparameterize_with(&mu, &logvar, &noise[t])?;
                    let recon = decode(&z, &state.vgae)?;
                    let term = vgae_loss(&binarized[t], &recon, &mu, &logvar)?;
                    vgae_total = Some(match vgae_total {
                        None => term,
                        Some(a) => a.add(&term)?,
                    });
                    let r = reg_loss(&hidden[0], &edge_sets[t])?;
                    reg_total = Some(match reg_total {
                        None => r,
                        Some(a) => a.add(&r)?,
                    });
                    z_views.push(z.reshape(&[4, 3, 1])?);
                    recon_slices.push(recon);
                }
                let z_refs: Vec<&Tensor> = z_views.iter().collect();
                let latent_series = Tensor::concat_last(&z_refs)?;
                let feats = pool_features(&latent_series, &state.pool)?;
                let m = mixing_matrix(&state.pool)?;
                let mut parts = vec![feats.flatten()?];
                for recon in &recon_slices {
                    parts.push(pool_adjacency(&m, recon)?.flatten()?);
                }
                let refs: Vec<&Tensor> = parts.iter().collect();
                let logits = classify(&state.head, &Tensor::concat_last(&refs)?, None)?;
                let probs = logits.sigmoid()?;

                let weights = LossWeights::default();
                let components = LossComponents {
                    bce: bce_loss(&probs, &sample.labels)?,
                    contrast: {
                        // Fixed permutation negative: reverse relabeling.
                        let perm_mat = {
                            let mut pm = vec![0.0; 16];
                            for i in 0..4 {
                                pm[i * 4 + (3 - i)] = 1.0;
                            }
                            Tensor::new(vec![4, 4], pm)?
                        };
                        let anchor_stack = AdjacencyStack { slices: slices.clone() };
                        let neg_slices: Vec<Tensor> = slices
                            .iter()
                            .map(|s| perm_mat.matmul(s)?.matmul(&perm_mat.transpose()?))
                            .collect::<Result<_>>()?;
                        let neg = AdjacencyStack { slices: neg_slices }.stacked()?;
                        // Positive: slices reversed along time.
                        let pos_slices: Vec<Tensor> =
                            slices.iter().rev().cloned().collect();
                        let pos = AdjacencyStack { slices: pos_slices }.stacked()?;
                        contrastive_loss(&anchor_stack.stacked()?, &pos, &[neg])?
                    },
                    focal: focal_loss(&probs, &sample.labels, weights.gamma)?,
                    reg: reg_total.unwrap(),
                    structural: structural_loss(&slices)?.0,
                    vgae: vgae_total.unwrap(),
                };
                Ok(total_loss(&components, &weights)?.0)
            },
            &state.embeddings.theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "full-pipeline gradient error {err}");
    }
}
