//! Loss terms and their weighted composition.
//!
//! The training objective is a weighted sum of six terms: label BCE,
//! a contrastive view term, a focal term for imbalanced labels, a
//! smoothness penalty over graph edges, a structural term tying
//! consecutive window graphs together, and the autoencoder
//! reconstruction term.

use crate::augment::cosine_sim;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability clamp used before logs.
pub const PROB_EPS: f64 = 1e-7;

/// Weights of the non-BCE terms (BCE always enters with weight one),
/// plus the focal exponent.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub contrast: f64,
    pub focal: f64,
    pub reg: f64,
    pub structural: f64,
    pub vgae: f64,
    /// Focal exponent gamma.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            contrast: 0.01,
            focal: 1.0,
            reg: 0.5,
            structural: 0.001,
            vgae: 1.0,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("contrast", self.contrast),
            ("focal", self.focal),
            ("reg", self.reg),
            ("structural", self.structural),
            ("vgae", self.vgae),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over a label vector.
pub fn bce_loss(probs: &Tensor, targets: &[f64]) -> Result<Tensor> {
    if probs.numel() != targets.len() {
        return Err(Error::dim(
            "bce_loss",
            format!("{} labels", targets.len()),
            format!("{}", probs.numel()),
        ));
    }
    let y = Tensor::new(probs.shape().to_vec(), targets.to_vec())?;
    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = y.mul(&p.log()?)?;
    let neg = y.neg()?.add_const(1.0)?.mul(&p.neg()?.add_const(1.0)?.log()?)?;
    pos.add(&neg)?.mean()?.neg()
}

/// Mean focal loss with symmetric `p_t`: for each label,
/// `-(1 - p_t)^gamma * log(p_t)` where `p_t = p` on positives and
/// `1 - p` on negatives. At `gamma = 0` this is exactly BCE.
pub fn focal_loss(probs: &Tensor, targets: &[f64], gamma: f64) -> Result<Tensor> {
    if gamma < 0.0 {
        return Err(Error::Contract(format!("gamma {gamma} must be >= 0")));
    }
    if probs.numel() != targets.len() {
        return Err(Error::dim(
            "focal_loss",
            format!("{} labels", targets.len()),
            format!("{}", probs.numel()),
        ));
    }
    let y = Tensor::new(probs.shape().to_vec(), targets.to_vec())?;
    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    // p_t = p*y + (1-p)*(1-y)
    let p_t = p
        .mul(&y)?
        .add(&p.neg()?.add_const(1.0)?.mul(&y.neg()?.add_const(1.0)?)?)?;
    let modulator = p_t.neg()?.add_const(1.0)?.powf(gamma)?;
    modulator.mul(&p_t.log()?)?.mean()?.neg()
}

/// Smoothness penalty over graph edges:
/// `sum_{(i,j) in E} ||h_i - h_j||^2` for `[d, f]` node features.
///
/// Evaluated through the graph Laplacian `L` of the (undirected
/// multigraph over the) edge list, as `sum(H .* (L H))`, which equals
/// the explicit pairwise sum and costs one matrix product.
pub fn reg_loss(h: &Tensor, edges: &[(usize, usize)]) -> Result<Tensor> {
    let d = match h.shape() {
        [d, _] => *d,
        other => return Err(Error::dim("reg_loss", "[d, f] features", format!("{other:?}"))),
    };
    if edges.is_empty() {
        return Tensor::scalar(0.0).sum();
    }
    let mut lap = vec![0.0; d * d];
    for &(i, j) in edges {
        if i >= d || j >= d {
            return Err(Error::Contract(format!(
                "edge ({i}, {j}) outside {d} nodes"
            )));
        }
        lap[i * d + i] += 1.0;
        lap[j * d + j] += 1.0;
        lap[i * d + j] -= 1.0;
        lap[j * d + i] -= 1.0;
    }
    let lap = Tensor::new(vec![d, d], lap)?;
    h.mul(&lap.matmul(h)?)?.sum()
}

/// Nonzero positions of a square slice, read as directed edges.
pub fn edges_of(slice: &Tensor) -> Vec<(usize, usize)> {
    let d = slice.shape()[0];
    let mut edges = Vec::new();
    for i in 0..d {
        for j in 0..d {
            if slice.at(&[i, j]) != 0.0 {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Dissimilarity of two same-shape slices: `1 - cos`, in `[0, 2]`.
pub fn structural_pair(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    cosine_sim(a, b)?.neg()?.add_const(1.0)
}

/// Mean `1 - cos` over consecutive slice pairs. Pairs with a zero-norm
/// member are skipped; the skip count is returned for the caller to
/// report.
pub fn structural_loss(slices: &[Tensor]) -> Result<(Tensor, usize)> {
    let mut total: Option<Tensor> = None;
    let mut pairs = 0usize;
    let mut skipped = 0usize;
    for pair in slices.windows(2) {
        match structural_pair(&pair[0], &pair[1]) {
            Ok(term) => {
                pairs += 1;
                total = Some(match total {
                    None => term,
                    Some(acc) => acc.add(&term)?,
                });
            }
            Err(Error::Domain { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let loss = match total {
        Some(acc) => acc.scale(1.0 / pairs as f64)?,
        None => Tensor::scalar(0.0).sum()?,
    };
    Ok((loss, skipped))
}

/// The six scalar terms, still on the tape.
pub struct LossComponents {
    pub bce: Tensor,
    pub contrast: Tensor,
    pub focal: Tensor,
    pub reg: Tensor,
    pub structural: Tensor,
    pub vgae: Tensor,
}

/// Weighted component values plus their sum.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub contrast: f64,
    pub focal: f64,
    pub reg: f64,
    pub structural: f64,
    pub vgae: f64,
    pub total: f64,
}

/// Combines the components into the training objective
/// `bce + contrast_w * contrast + focal_w * focal + reg_w * reg +
/// structural_w * structural + vgae_w * vgae`, returning both the
/// on-tape scalar and the recorded breakdown.
pub fn total_loss(
    components: &LossComponents,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    weights.validate()?;
    for (name, t) in [
        ("bce", &components.bce),
        ("contrast", &components.contrast),
        ("focal", &components.focal),
        ("reg", &components.reg),
        ("structural", &components.structural),
        ("vgae", &components.vgae),
    ] {
        if !t.all_finite() {
            return Err(Error::Numerical(format!("loss component {name} is not finite")));
        }
    }
    let total = components
        .bce
        .add(&components.contrast.scale(weights.contrast)?)?
        .add(&components.focal.scale(weights.focal)?)?
        .add(&components.reg.scale(weights.reg)?)?
        .add(&components.structural.scale(weights.structural)?)?
        .add(&components.vgae.scale(weights.vgae)?)?;
    let breakdown = LossBreakdown {
        bce: components.bce.item()?,
        contrast: components.contrast.item()?,
        focal: components.focal.item()?,
        reg: components.reg.item()?,
        structural: components.structural.item()?,
        vgae: components.vgae.item()?,
        total: total.item()?,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    #[test]
    fn focal_perfect_prediction_is_near_zero() {
        let probs = Tensor::from_vec(vec![1.0]);
        let loss = focal_loss(&probs, &[1.0], 2.0).unwrap().item().unwrap();
        assert!(loss.abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn focal_hand_value() {
        // p = 0.5, y = 1, gamma = 2: 0.25 * ln 2
        let probs = Tensor::from_vec(vec![0.5]);
        let loss = focal_loss(&probs, &[1.0], 2.0).unwrap().item().unwrap();
        assert!((loss - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((loss - 0.17329).abs() < 1e-5);
    }

    #[test]
    fn focal_gamma_zero_equals_bce() {
        let mut rng = SeededRng::new(21);
        for _ in 0..50 {
            let c = 1 + rng.below(6);
            let probs = Tensor::uniform(&[c], 0.01, 0.99, &mut rng);
            let targets: Vec<f64> = (0..c).map(|_| f64::from(rng.bernoulli(0.4))).collect();
            let f = focal_loss(&probs, &targets, 0.0).unwrap().item().unwrap();
            let b = bce_loss(&probs, &targets).unwrap().item().unwrap();
            assert!((f - b).abs() < 1e-12, "focal {f} vs bce {b}");
        }
    }

    #[test]
    fn focal_decreases_in_pt() {
        let gamma = 2.0;
        let mut last = f64::INFINITY;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let loss = focal_loss(&Tensor::from_vec(vec![p]), &[1.0], gamma)
                .unwrap()
                .item()
                .unwrap();
            assert!(loss < last, "not decreasing at p={p}");
            last = loss;
        }
    }

    #[test]
    fn reg_loss_cases() {
        // Identical features and empty edge sets are free.
        let h = Tensor::new(vec![3, 2], vec![1., 2., 1., 2., 1., 2.]).unwrap();
        let edges = [(0, 1), (1, 2)];
        assert_eq!(reg_loss(&h, &edges).unwrap().item().unwrap(), 0.0);
        assert_eq!(reg_loss(&h, &[]).unwrap().item().unwrap(), 0.0);

        // h1 = [0], h2 = [3], one edge: 9.
        let h = Tensor::new(vec![2, 1], vec![0.0, 3.0]).unwrap();
        assert_eq!(reg_loss(&h, &[(0, 1)]).unwrap().item().unwrap(), 9.0);
    }

    #[test]
    fn reg_loss_matches_pairwise_sum() {
        let mut rng = SeededRng::new(33);
        let h = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let edges = [(0, 2), (1, 4), (3, 0), (2, 2)];
        let fast = reg_loss(&h, &edges).unwrap().item().unwrap();
        let mut slow = 0.0;
        for &(i, j) in &edges {
            for f in 0..3 {
                let d = h.at(&[i, f]) - h.at(&[j, f]);
                slow += d * d;
            }
        }
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
    }

    #[test]
    fn structural_cases() {
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert!(structural_pair(&a, &a).unwrap().item().unwrap().abs() < 1e-12);
        let flipped = a.scale(-1.0).unwrap();
        assert!((structural_pair(&a, &flipped).unwrap().item().unwrap() - 2.0).abs() < 1e-12);
        let x = Tensor::new(vec![1, 2], vec![1., 0.]).unwrap();
        let y = Tensor::new(vec![1, 2], vec![0., 1.]).unwrap();
        assert!((structural_pair(&x, &y).unwrap().item().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn structural_zero_iff_positive_scalar_multiple() {
        let mut rng = SeededRng::new(77);
        let a = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let scaled = a.scale(2.5).unwrap();
        assert!(structural_pair(&a, &scaled).unwrap().item().unwrap().abs() < 1e-12);
        let other = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let v = structural_pair(&a, &other).unwrap().item().unwrap();
        assert!(v > 1e-6 && v <= 2.0);
    }

    #[test]
    fn structural_skips_zero_norm_slices() {
        let a = Tensor::ones(&[2, 2]);
        let z = Tensor::zeros(&[2, 2]);
        let (loss, skipped) = structural_loss(&[a.clone(), z, a.clone()]).unwrap();
        assert_eq!(skipped, 2);
        assert_eq!(loss.item().unwrap(), 0.0);

        let (loss, skipped) = structural_loss(&[a.clone(), a.scale(3.0).unwrap()]).unwrap();
        assert_eq!(skipped, 0);
        assert!(loss.item().unwrap().abs() < 1e-12);
    }

    fn constant_components() -> LossComponents {
        let c = |v: f64| Tensor::scalar(v).sum().unwrap();
        LossComponents {
            bce: c(0.7),
            contrast: c(0.6),
            focal: c(0.3),
            reg: c(4.0),
            structural: c(0.2),
            vgae: c(1.5),
        }
    }

    #[test]
    fn total_all_weights_zero_is_bce() {
        let weights = LossWeights {
            contrast: 0.0,
            focal: 0.0,
            reg: 0.0,
            structural: 0.0,
            vgae: 0.0,
            gamma: 2.0,
        };
        let (total, breakdown) = total_loss(&constant_components(), &weights).unwrap();
        assert_eq!(total.item().unwrap(), 0.7);
        assert_eq!(breakdown.total, breakdown.bce);
    }

    #[test]
    fn total_with_grid_weights() {
        let weights = LossWeights {
            contrast: 0.01,
            focal: 1.0,
            reg: 0.5,
            structural: 0.001,
            vgae: 1.0,
            gamma: 2.0,
        };
        let (total, _) = total_loss(&constant_components(), &weights).unwrap();
        let expect = 0.7 + 0.01 * 0.6 + 1.0 * 0.3 + 0.5 * 4.0 + 0.001 * 0.2 + 1.0 * 1.5;
        assert!((total.item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn total_is_linear_in_each_weight() {
        let components = constant_components();
        let base_weights = LossWeights::default();
        let (base, _) = total_loss(&components, &base_weights).unwrap();
        let base = base.item().unwrap();

        // Doubling one weight moves the total by exactly that
        // component's unweighted value times the original weight.
        let mut w = base_weights.clone();
        w.reg *= 2.0;
        let (bumped, _) = total_loss(&components, &w).unwrap();
        let delta = bumped.item().unwrap() - base;
        assert!((delta - base_weights.reg * components.reg.item().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn total_rejects_non_finite_component() {
        let mut components = constant_components();
        components.vgae = Tensor::scalar(f64::NAN).sum().unwrap();
        let err = total_loss(&components, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("vgae"), "{err}");
    }
}
