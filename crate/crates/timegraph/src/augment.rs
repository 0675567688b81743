//! Graph views for contrastive training.
//!
//! Positive views come from the anchor by time shuffling, node masking,
//! and edge perturbation; negatives come from other batch members, or
//! from a simultaneous row/column permutation when the batch offers no
//! distinct stack. The contrastive loss scores views by whole-stack
//! cosine similarity, with raw similarities as logits.

use crate::error::{Error, Result};
use crate::graph::AdjacencyStack;
use crate::tensor::{SeededRng, Tensor};

/// Knobs for positive-view generation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    /// Shuffle slices along the time axis.
    pub shuffle: bool,
    /// Probability of dropping each node (its row and column).
    pub node_mask_prob: f64,
    /// Probability of perturbing each nonzero entry.
    pub edge_perturb_prob: f64,
    /// Scale of the replacement noise relative to the entry magnitude;
    /// zero replaces selected entries with exact zeros.
    pub jitter_scale: f64,
    /// Negatives per anchor.
    pub negatives: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            shuffle: true,
            node_mask_prob: 0.1,
            edge_perturb_prob: 0.1,
            jitter_scale: 0.1,
            negatives: 1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.node_mask_prob) {
            return Err(Error::Config(format!(
                "node_mask_prob {} outside [0, 1)",
                self.node_mask_prob
            )));
        }
        if !(0.0..1.0).contains(&self.edge_perturb_prob) {
            return Err(Error::Config(format!(
                "edge_perturb_prob {} outside [0, 1)",
                self.edge_perturb_prob
            )));
        }
        if self.jitter_scale < 0.0 {
            return Err(Error::Config("jitter_scale must be >= 0".into()));
        }
        if self.negatives < 1 {
            return Err(Error::Config("need at least one negative".into()));
        }
        Ok(())
    }
}

/// An anchor with its positive view and negatives.
pub struct ViewTriple {
    pub anchor: AdjacencyStack,
    pub positive: AdjacencyStack,
    pub negatives: Vec<AdjacencyStack>,
}

/// Permutes the slices along the time axis. Returns the view and the
/// permutation that produced it.
pub fn time_shuffle(stack: &AdjacencyStack, rng: &mut SeededRng) -> (AdjacencyStack, Vec<usize>) {
    let s = stack.windows();
    let mut perm: Vec<usize> = (0..s).collect();
    if s >= 2 {
        rng.shuffle(&mut perm);
    }
    let slices = perm.iter().map(|&t| stack.slices[t].clone()).collect();
    (AdjacencyStack { slices }, perm)
}

/// Zeroes the row and column of every node drawn into the mask. If the
/// draw masks every node it is retried once; a second full mask is an
/// error.
pub fn node_mask(
    stack: &AdjacencyStack,
    p: f64,
    rng: &mut SeededRng,
) -> Result<AdjacencyStack> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Contract(format!("node mask probability {p} outside [0, 1)")));
    }
    let d = stack.nodes();
    let draw = |rng: &mut SeededRng| -> Vec<bool> { (0..d).map(|_| rng.bernoulli(p)).collect() };
    let mut masked = draw(rng);
    if masked.iter().all(|&m| m) {
        masked = draw(rng);
        if masked.iter().all(|&m| m) {
            return Err(Error::Contract(
                "node mask removed every node twice in a row".into(),
            ));
        }
    }
    let mut mask = vec![1.0; d * d];
    for v in 0..d {
        if masked[v] {
            for j in 0..d {
                mask[v * d + j] = 0.0;
                mask[j * d + v] = 0.0;
            }
        }
    }
    let slices = stack
        .slices
        .iter()
        .map(|s| s.apply_mask(&mask))
        .collect::<Result<_>>()?;
    Ok(AdjacencyStack { slices })
}

/// Redraws Bernoulli-selected nonzero entries from
/// `N(0, jitter * |entry|)`; with zero jitter the selected entries are
/// zeroed exactly. Untouched entries pass through bit-identically and
/// no new nonzeros appear.
pub fn edge_perturb(
    stack: &AdjacencyStack,
    p: f64,
    jitter: f64,
    rng: &mut SeededRng,
) -> Result<AdjacencyStack> {
    let d = stack.nodes();
    let mut slices = Vec::with_capacity(stack.windows());
    for slice in &stack.slices {
        let mut keep = vec![1.0; d * d];
        let mut replacement = vec![0.0; d * d];
        let mut any = false;
        for (i, &v) in slice.data().iter().enumerate() {
            if v != 0.0 && rng.bernoulli(p) {
                keep[i] = 0.0;
                replacement[i] = if jitter > 0.0 {
                    rng.normal() * jitter * v.abs()
                } else {
                    0.0
                };
                any = true;
            }
        }
        if any {
            let kept = slice.apply_mask(&keep)?;
            slices.push(kept.add(&Tensor::new(vec![d, d], replacement)?)?);
        } else {
            slices.push(slice.clone());
        }
    }
    Ok(AdjacencyStack { slices })
}

/// Applies the configured augmentation chain to produce a positive view.
pub fn make_positive(
    stack: &AdjacencyStack,
    config: &AugmentConfig,
    rng: &mut SeededRng,
) -> Result<AdjacencyStack> {
    config.validate()?;
    let mut view = if config.shuffle {
        time_shuffle(stack, rng).0
    } else {
        stack.clone()
    };
    if config.node_mask_prob > 0.0 {
        view = node_mask(&view, config.node_mask_prob, rng)?;
    }
    if config.edge_perturb_prob > 0.0 {
        view = edge_perturb(&view, config.edge_perturb_prob, config.jitter_scale, rng)?;
    }
    Ok(view)
}

/// A negative for the anchor: the first batch stack whose values differ,
/// or a simultaneous row/column permutation of the anchor when none
/// does. Permuting rows and columns together preserves the entry
/// multiset and the degree profile.
pub fn make_negative(
    anchor: &AdjacencyStack,
    rng: &mut SeededRng,
    batch: &[&AdjacencyStack],
) -> Result<AdjacencyStack> {
    for candidate in batch {
        if !stacks_equal(anchor, candidate) {
            return Ok((*candidate).clone());
        }
    }
    // Fall back to a derangement-ish relabeling of the anchor.
    let d = anchor.nodes();
    let mut perm: Vec<usize> = (0..d).collect();
    loop {
        rng.shuffle(&mut perm);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            break;
        }
    }
    let mut pm = vec![0.0; d * d];
    for (i, &p) in perm.iter().enumerate() {
        pm[i * d + p] = 1.0;
    }
    let pmat = Tensor::new(vec![d, d], pm)?;
    let slices = anchor
        .slices
        .iter()
        .map(|s| pmat.matmul(s)?.matmul(&pmat.transpose()?))
        .collect::<Result<_>>()?;
    Ok(AdjacencyStack { slices })
}

fn stacks_equal(a: &AdjacencyStack, b: &AdjacencyStack) -> bool {
    a.windows() == b.windows()
        && a.slices
            .iter()
            .zip(&b.slices)
            .all(|(x, y)| x.shape() == y.shape() && x.data() == y.data())
}

/// Whole-tensor cosine similarity over flattened entries.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "cosine_sim",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let na = a.l2_norm()?;
    let nb = b.l2_norm()?;
    if na.item()? == 0.0 || nb.item()? == 0.0 {
        return Err(Error::domain(
            "cosine_sim",
            "zero-norm operand, similarity undefined",
        ));
    }
    a.mul(b)?.sum()?.div(&na.mul(&nb)?)
}

/// Softmax-style contrastive objective over raw cosine logits:
/// `-log( e^{s+} / (e^{s+} + sum e^{s-}) )`.
pub fn contrastive_loss(
    anchor: &Tensor,
    positive: &Tensor,
    negatives: &[Tensor],
) -> Result<Tensor> {
    if negatives.is_empty() {
        return Err(Error::Contract("contrastive loss needs >= 1 negative".into()));
    }
    let sim_pos = cosine_sim(anchor, positive)?;
    let mut denom = sim_pos.exp()?;
    for neg in negatives {
        denom = denom.add(&cosine_sim(anchor, neg)?.exp()?)?;
    }
    denom.log()?.sub(&sim_pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_stack(d: usize, s: usize, seed: u64) -> AdjacencyStack {
        let mut rng = SeededRng::new(seed);
        AdjacencyStack {
            slices: (0..s)
                .map(|_| Tensor::uniform(&[d, d], -1.0, 1.0, &mut rng))
                .collect(),
        }
    }

    #[test]
    fn shuffle_single_window_is_identity() {
        let stack = random_stack(3, 1, 1);
        let mut rng = SeededRng::new(2);
        let (view, perm) = time_shuffle(&stack, &mut rng);
        assert_eq!(perm, vec![0]);
        assert_eq!(view.slices[0].data(), stack.slices[0].data());
    }

    #[test]
    fn shuffle_preserves_slice_norm_multiset() {
        let stack = random_stack(4, 6, 3);
        let mut rng = SeededRng::new(4);
        let (view, perm) = time_shuffle(&stack, &mut rng);
        let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut before: Vec<f64> = stack.slices.iter().map(norm).collect();
        let mut after: Vec<f64> = view.slices.iter().map(norm).collect();
        before.sort_by(|a, b| a.partial_cmp(b).unwrap());
        after.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(before, after);
        // Recorded permutation reproduces the view exactly.
        for (i, &t) in perm.iter().enumerate() {
            assert_eq!(view.slices[i].data(), stack.slices[t].data());
        }
    }

    #[test]
    fn shuffle_is_seed_deterministic() {
        let stack = random_stack(3, 5, 7);
        let (_, p1) = time_shuffle(&stack, &mut SeededRng::new(9));
        let (_, p2) = time_shuffle(&stack, &mut SeededRng::new(9));
        assert_eq!(p1, p2);
    }

    #[test]
    fn node_mask_zero_probability_is_identity() {
        let stack = random_stack(3, 2, 5);
        let mut rng = SeededRng::new(6);
        let view = node_mask(&stack, 0.0, &mut rng).unwrap();
        for (a, b) in view.slices.iter().zip(&stack.slices) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn node_mask_hand_case() {
        // Masking node 0 of [[0,1],[2,0]] clears the whole matrix.
        let stack = AdjacencyStack {
            slices: vec![Tensor::new(vec![2, 2], vec![0., 1., 2., 0.]).unwrap()],
        };
        // Find a seed whose first two Bernoulli(0.5) draws are (true, false).
        let mut seed = 0;
        for candidate in 0..100 {
            let mut rng = SeededRng::new(candidate);
            if rng.bernoulli(0.5) && !rng.bernoulli(0.5) {
                seed = candidate;
                break;
            }
        }
        let view = node_mask(&stack, 0.5, &mut SeededRng::new(seed)).unwrap();
        assert_eq!(view.slices[0].data(), &[0., 0., 0., 0.]);
    }

    #[test]
    fn node_mask_rate_matches_probability() {
        let stack = random_stack(10, 1, 11);
        let p = 0.3;
        let trials = 1000;
        let mut zeroed_rows = 0usize;
        for seed in 0..trials {
            let view = node_mask(&stack, p, &mut SeededRng::new(seed)).unwrap();
            for v in 0..10 {
                let row_zero = (0..10).all(|j| view.slices[0].at(&[v, j]) == 0.0);
                if row_zero {
                    zeroed_rows += 1;
                }
            }
        }
        let rate = zeroed_rows as f64 / (trials as f64 * 10.0);
        assert!((rate - p).abs() < 0.03, "rate {rate}");
    }

    #[test]
    fn edge_perturb_identity_and_exact_zeroing() {
        let stack = random_stack(4, 2, 13);
        let same = edge_perturb(&stack, 0.0, 0.5, &mut SeededRng::new(1)).unwrap();
        for (a, b) in same.slices.iter().zip(&stack.slices) {
            assert_eq!(a.data(), b.data());
        }
        let zeroed = edge_perturb(&stack, 1.0, 0.0, &mut SeededRng::new(1)).unwrap();
        for s in &zeroed.slices {
            assert!(s.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn edge_perturb_touches_expected_fraction() {
        let stack = random_stack(8, 1, 17);
        let p = 0.25;
        let trials = 400;
        let mut touched = 0usize;
        let total = 64 * trials;
        for seed in 0..trials {
            let view = edge_perturb(&stack, p, 0.5, &mut SeededRng::new(seed as u64)).unwrap();
            for (a, b) in view.slices[0].data().iter().zip(stack.slices[0].data()) {
                if a.to_bits() != b.to_bits() {
                    touched += 1;
                }
            }
        }
        let rate = touched as f64 / total as f64;
        assert!((rate - p).abs() < 0.03, "rate {rate}");
    }

    #[test]
    fn negative_prefers_distinct_batch_member() {
        let anchor = random_stack(3, 2, 19);
        let other = random_stack(3, 2, 23);
        let mut rng = SeededRng::new(1);
        let neg = make_negative(&anchor, &mut rng, &[&anchor, &other]).unwrap();
        assert!(stacks_equal(&neg, &other));
    }

    #[test]
    fn permutation_negative_preserves_symmetry_and_multiset() {
        // Symmetric anchor stack.
        let mut rng = SeededRng::new(29);
        let base = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng);
        let sym = base.add(&base.transpose().unwrap()).unwrap();
        let anchor = AdjacencyStack {
            slices: vec![sym.clone()],
        };
        let neg = make_negative(&anchor, &mut rng, &[]).unwrap();
        let n = &neg.slices[0];
        for i in 0..4 {
            for j in 0..4 {
                assert!((n.at(&[i, j]) - n.at(&[j, i])).abs() < 1e-12);
            }
        }
        let mut before: Vec<f64> = sym.data().to_vec();
        let mut after: Vec<f64> = n.data().to_vec();
        before.sort_by(|a, b| a.partial_cmp(b).unwrap());
        after.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_extremes() {
        let a = Tensor::new(vec![2, 2], vec![1., -2., 0.5, 3.]).unwrap();
        assert!((cosine_sim(&a, &a).unwrap().item().unwrap() - 1.0).abs() < 1e-12);
        let neg = a.scale(-1.0).unwrap();
        assert!((cosine_sim(&a, &neg).unwrap().item().unwrap() + 1.0).abs() < 1e-12);
        let x = Tensor::new(vec![1, 2], vec![1., 0.]).unwrap();
        let y = Tensor::new(vec![1, 2], vec![0., 1.]).unwrap();
        assert_eq!(cosine_sim(&x, &y).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let a = Tensor::ones(&[2, 2]);
        let z = Tensor::zeros(&[2, 2]);
        assert!(cosine_sim(&a, &z).is_err());
    }

    #[test]
    fn contrastive_equal_logits_is_log2() {
        // positive == anchor and one negative == anchor: both sims are 1.
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let loss = contrastive_loss(&a, &a, &[a.clone()]).unwrap();
        assert!((loss.item().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_known_value() {
        // sims (1, 0): loss = -log(e / (e + 1)) = log(1 + e^{-1})
        let anchor = Tensor::from_vec(vec![1.0, 0.0]);
        let positive = anchor.clone();
        let negative = Tensor::from_vec(vec![0.0, 1.0]);
        let loss = contrastive_loss(&anchor, &positive, &[negative]).unwrap();
        let expect = (1f64 + (-1f64).exp()).ln();
        assert!((loss.item().unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn contrastive_monotone_in_similarities() {
        // Higher positive similarity lowers the loss; higher negative
        // similarity raises it.
        let anchor = Tensor::from_vec(vec![1.0, 0.0]);
        let near = Tensor::from_vec(vec![1.0, 0.2]);
        let far = Tensor::from_vec(vec![0.2, 1.0]);
        let l_near = contrastive_loss(&anchor, &near, &[far.clone()])
            .unwrap()
            .item()
            .unwrap();
        let l_far = contrastive_loss(&anchor, &far, &[near.clone()])
            .unwrap()
            .item()
            .unwrap();
        assert!(l_near < l_far);

        let l_weak_neg = contrastive_loss(&anchor, &near, &[far]).unwrap().item().unwrap();
        let l_strong_neg = contrastive_loss(&anchor, &near, &[near.clone()])
            .unwrap()
            .item()
            .unwrap();
        assert!(l_weak_neg < l_strong_neg);
    }

    #[test]
    fn contrastive_gradient_check() {
        let mut rng = SeededRng::new(31);
        let positive = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let negative = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let anchor = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let err = crate::tensor::grad_check(
            |a| contrastive_loss(a, &positive, &[negative.clone()]),
            &anchor,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn augment_chain_preserves_shape() {
        let stack = random_stack(5, 4, 37);
        let config = AugmentConfig::default();
        let mut rng = SeededRng::new(2);
        let view = make_positive(&stack, &config, &mut rng).unwrap();
        assert_eq!(view.windows(), 4);
        for s in &view.slices {
            assert_eq!(s.shape(), &[5, 5]);
        }
    }
}
