//! Learnable per-window graph construction.
//!
//! Each time window owns a directed graph over the d series features.
//! A window's adjacency slice is the outer product of a learnable source
//! vector and a learnable target vector, sparsified to the k largest
//! off-diagonal entries per row. Consecutive windows exchange
//! information through an exponential carry on the embedding vectors, so
//! later graphs inherit structure from earlier ones without adding
//! vertices.

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

/// Learnable source (`theta`) and target (`psi`) node embeddings, one
/// row per time window.
#[derive(Debug, Clone)]
pub struct NodeEmbeddings {
    /// `[s, d]` source vectors.
    pub theta: Tensor,
    /// `[s, d]` target vectors.
    pub psi: Tensor,
}

impl NodeEmbeddings {
    pub fn windows(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.theta.shape()[1]
    }
}

/// Per-sample stack of adjacency slices. Slices are kept individually
/// (they feed per-window losses) alongside the concatenated `[d, d, s]`
/// view.
#[derive(Debug, Clone)]
pub struct AdjacencyStack {
    pub slices: Vec<Tensor>,
}

impl AdjacencyStack {
    pub fn windows(&self) -> usize {
        self.slices.len()
    }

    pub fn nodes(&self) -> usize {
        self.slices[0].shape()[0]
    }

    /// Concatenated `[d, d, s]` tensor; stays on the tape when the
    /// slices do.
    pub fn stacked(&self) -> Result<Tensor> {
        let views: Vec<Tensor> = self
            .slices
            .iter()
            .map(|s| {
                let d = s.shape()[0];
                s.reshape(&[d, d, 1])
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = views.iter().collect();
        Tensor::concat_last(&refs)
    }
}

/// Uniform `(-1/sqrt(d), 1/sqrt(d))` initialization of both embedding
/// matrices.
pub fn init_embeddings(d: usize, s: usize, seed: u64) -> Result<NodeEmbeddings> {
    if d < 2 || s < 1 {
        return Err(Error::Contract(format!(
            "need d >= 2 and s >= 1, got d={d}, s={s}"
        )));
    }
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = SeededRng::new(seed);
    Ok(NodeEmbeddings {
        theta: Tensor::uniform(&[s, d], -bound, bound, &mut rng),
        psi: Tensor::uniform(&[s, d], -bound, bound, &mut rng),
    })
}

/// One window's dense adjacency: `A[i][j] = theta[i] * psi[j]`.
pub fn build_adjacency(theta_t: &Tensor, psi_t: &Tensor) -> Result<Tensor> {
    if theta_t.shape() != psi_t.shape() {
        return Err(Error::dim(
            "build_adjacency",
            format!("{:?}", theta_t.shape()),
            format!("{:?}", psi_t.shape()),
        ));
    }
    theta_t.outer(psi_t)
}

/// Computes the retention mask for [`sparsify_topk`]: per row, the `k`
/// largest off-diagonal entries (ties broken towards the lowest column
/// index), diagonal always dropped.
pub fn topk_mask(slice: &Tensor, k: usize) -> Result<Vec<f64>> {
    let d = match slice.shape() {
        [d, d2] if d == d2 => *d,
        other => {
            return Err(Error::dim("sparsify_topk", "square slice", format!("{other:?}")));
        }
    };
    if k == 0 || k > d - 1 {
        return Err(Error::Contract(format!(
            "top-k parameter {k} outside 1..={}",
            d - 1
        )));
    }
    let data = slice.data();
    let mut mask = vec![0.0; d * d];
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(d - 1);
    for i in 0..d {
        candidates.clear();
        for j in 0..d {
            if j != i {
                candidates.push((data[i * d + j], j));
            }
        }
        // Stable preference: larger value first, then lower column.
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in candidates.iter().take(k) {
            mask[i * d + j] = 1.0;
        }
    }
    Ok(mask)
}

/// Zeroes the diagonal and everything below the per-row top-k. The mask
/// is a constant of the step: gradients flow through retained entries
/// only.
pub fn sparsify_topk(slice: &Tensor, k: usize) -> Result<Tensor> {
    let mask = topk_mask(slice, k)?;
    slice.apply_mask(&mask)
}

/// Cross-window information propagation: an exponential carry with
/// coefficient `rho` running forward in time,
/// `theta_t <- theta_t + rho * theta_{t-1}^{eff}` (and the same for
/// `psi`). Window 0 is left unchanged.
pub fn propagate(embeddings: &NodeEmbeddings, rho: f64) -> Result<NodeEmbeddings> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Contract(format!("rho {rho} outside [0, 1)")));
    }
    let s = embeddings.windows();
    let d = embeddings.features();
    let carry = |m: &Tensor| -> Result<Tensor> {
        let mut rows: Vec<Tensor> = Vec::with_capacity(s);
        for t in 0..s {
            let base = m.row(t)?;
            let row = if t == 0 || rho == 0.0 {
                base
            } else {
                base.add(&rows[t - 1].scale(rho)?)?
            };
            rows.push(row);
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Tensor::concat_last(&refs)?.reshape(&[s, d])
    };
    Ok(NodeEmbeddings {
        theta: carry(&embeddings.theta)?,
        psi: carry(&embeddings.psi)?,
    })
}

/// Full per-window construction: propagate, take outer products, and
/// sparsify each slice.
pub fn build_stack(embeddings: &NodeEmbeddings, k: usize, rho: f64) -> Result<AdjacencyStack> {
    let effective = propagate(embeddings, rho)?;
    let s = effective.windows();
    let mut slices = Vec::with_capacity(s);
    for t in 0..s {
        let dense = build_adjacency(&effective.theta.row(t)?, &effective.psi.row(t)?)?;
        slices.push(sparsify_topk(&dense, k)?);
    }
    Ok(AdjacencyStack { slices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};

    #[test]
    fn init_shapes_and_bound() {
        let emb = init_embeddings(8, 6, 42).unwrap();
        assert_eq!(emb.theta.shape(), &[6, 8]);
        assert_eq!(emb.psi.shape(), &[6, 8]);
        let bound = 1.0 / 8f64.sqrt();
        for &v in emb.theta.data().iter().chain(emb.psi.data()) {
            assert!(v.abs() <= bound);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_embeddings(5, 3, 1992).unwrap();
        let b = init_embeddings(5, 3, 1992).unwrap();
        assert_eq!(a.theta.data(), b.theta.data());
        assert_eq!(a.psi.data(), b.psi.data());
    }

    #[test]
    fn adjacency_is_outer_product() {
        let theta = Tensor::from_vec(vec![1.0, 2.0]);
        let psi = Tensor::from_vec(vec![3.0, 4.0]);
        let a = build_adjacency(&theta, &psi).unwrap();
        assert_eq!(a.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn zero_targets_give_zero_slice() {
        let theta = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let psi = Tensor::zeros(&[3]);
        let a = build_adjacency(&theta, &psi).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_slice_has_rank_one() {
        // Every 2x2 minor of an outer product vanishes.
        let mut rng = SeededRng::new(9);
        let theta = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
        let psi = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
        let a = build_adjacency(&theta, &psi).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let det = a.at(&[i, j]) * a.at(&[i + 1, j + 1])
                    - a.at(&[i, j + 1]) * a.at(&[i + 1, j]);
                assert!(det.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn topk_hand_case() {
        let a = Tensor::new(vec![3, 3], vec![0., 5., 1., 2., 0., 9., 4., 3., 0.]).unwrap();
        let out = sparsify_topk(&a, 1).unwrap();
        assert_eq!(out.data(), &[0., 5., 0., 0., 0., 9., 4., 0., 0.]);
    }

    #[test]
    fn topk_keep_all_off_diagonal() {
        let a = Tensor::new(vec![3, 3], vec![9., 5., 1., 2., 9., 9., 4., 3., 9.]).unwrap();
        let out = sparsify_topk(&a, 2).unwrap();
        assert_eq!(out.data(), &[0., 5., 1., 2., 0., 9., 4., 3., 0.]);
    }

    #[test]
    fn topk_tie_prefers_lower_column() {
        let a = Tensor::new(vec![3, 3], vec![0., 7., 7., 1., 0., 2., 3., 2., 0.]).unwrap();
        let out = sparsify_topk(&a, 1).unwrap();
        assert_eq!(out.at(&[0, 1]), 7.0);
        assert_eq!(out.at(&[0, 2]), 0.0);
    }

    #[test]
    fn topk_brute_force_oracle() {
        let mut rng = SeededRng::new(250);
        for _ in 0..50 {
            let a = Tensor::uniform(&[8, 8], -2.0, 2.0, &mut rng);
            let k = 1 + rng.below(7);
            let fast = sparsify_topk(&a, k).unwrap();
            // Brute force: enumerate every off-diagonal entry per row and
            // keep one with rank < k under (value desc, column asc).
            for i in 0..8 {
                for j in 0..8 {
                    let kept = fast.at(&[i, j]) != 0.0 || a.at(&[i, j]) == 0.0 && fast.at(&[i, j]) == 0.0;
                    let mut rank = 0;
                    if i != j {
                        for u in 0..8 {
                            if u == i || u == j {
                                continue;
                            }
                            let better = a.at(&[i, u]) > a.at(&[i, j])
                                || (a.at(&[i, u]) == a.at(&[i, j]) && u < j);
                            if better {
                                rank += 1;
                            }
                        }
                    }
                    let expect_kept = i != j && rank < k;
                    if expect_kept {
                        assert!(kept, "row {i} col {j} should be kept");
                        assert_eq!(fast.at(&[i, j]), a.at(&[i, j]));
                    } else {
                        assert_eq!(fast.at(&[i, j]), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn propagate_zero_rho_is_identity() {
        let emb = init_embeddings(4, 3, 7).unwrap();
        let out = propagate(&emb, 0.0).unwrap();
        assert_eq!(out.theta.data(), emb.theta.data());
        assert_eq!(out.psi.data(), emb.psi.data());
    }

    #[test]
    fn propagate_hand_recurrence() {
        let emb = NodeEmbeddings {
            theta: Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap(),
            psi: Tensor::zeros(&[2, 2]),
        };
        let out = propagate(&emb, 0.5).unwrap();
        assert_eq!(out.theta.data(), &[1., 0., 0.5, 1.]);
    }

    #[test]
    fn propagate_geometric_series_on_constant_windows() {
        let row = [0.3, -0.8, 1.1];
        let data: Vec<f64> = row.iter().copied().cycle().take(12).collect();
        let emb = NodeEmbeddings {
            theta: Tensor::new(vec![4, 3], data.clone()).unwrap(),
            psi: Tensor::new(vec![4, 3], data).unwrap(),
        };
        let rho: f64 = 0.5;
        let out = propagate(&emb, rho).unwrap();
        for t in 0..4 {
            let factor: f64 = (0..=t).map(|i| rho.powi(i as i32)).sum();
            for (f, base) in row.iter().enumerate() {
                let got = out.theta.at(&[t, f]);
                assert!((got - base * factor).abs() < 1e-12, "t={t} f={f}");
            }
        }
    }

    #[test]
    fn stack_structure_invariants() {
        let emb = init_embeddings(6, 4, 213).unwrap();
        let stack = build_stack(&emb, 2, 0.5).unwrap();
        assert_eq!(stack.windows(), 4);
        for slice in &stack.slices {
            for i in 0..6 {
                assert_eq!(slice.at(&[i, i]), 0.0, "diagonal must be zero");
                let nnz = (0..6).filter(|&j| slice.at(&[i, j]) != 0.0).count();
                assert!(nnz <= 2, "row {i} has {nnz} nonzeros");
            }
        }
    }

    #[test]
    fn stack_gradients_match_finite_differences_with_fixed_masks() {
        let emb = init_embeddings(4, 3, 99).unwrap();
        let k = 2;
        let rho = 0.5;
        // Freeze the masks at the base point so perturbations stay on
        // the same top-k branch.
        let base = build_stack(&emb, k, rho).unwrap();
        let masks: Vec<Vec<f64>> = {
            let eff = propagate(&emb, rho).unwrap();
            (0..3)
                .map(|t| {
                    let dense = build_adjacency(
                        &eff.theta.row(t).unwrap(),
                        &eff.psi.row(t).unwrap(),
                    )
                    .unwrap();
                    topk_mask(&dense, k).unwrap()
                })
                .collect()
        };
        drop(base);
        let psi = emb.psi.clone();
        let err = grad_check(
            |theta| {
                let eff = propagate(
                    &NodeEmbeddings {
                        theta: theta.clone(),
                        psi: psi.clone(),
                    },
                    rho,
                )?;
                let mut total: Option<Tensor> = None;
                for t in 0..3 {
                    let dense = build_adjacency(&eff.theta.row(t)?, &eff.psi.row(t)?)?;
                    let masked = dense.apply_mask(&masks[t])?;
                    let part = masked.sum()?;
                    total = Some(match total {
                        None => part,
                        Some(acc) => acc.add(&part)?,
                    });
                }
                Ok(total.unwrap())
            },
            &emb.theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn propagation_is_causal() {
        // dA_t / dtheta_{t'} = 0 for t' > t.
        let emb = init_embeddings(3, 3, 5).unwrap();
        let tape = Tape::new();
        let theta = tape.attach(&emb.theta);
        let psi = tape.attach(&emb.psi);
        let stack = build_stack(&NodeEmbeddings { theta: theta.clone(), psi }, 1, 0.7).unwrap();
        let loss = stack.slices[1].sum().unwrap(); // depends on windows 0 and 1 only
        let grads = tape.backward(&loss).unwrap();
        let g = grads.wrt(&theta).unwrap();
        for f in 0..3 {
            assert_eq!(g.at(&[2, f]), 0.0, "window 2 must not affect slice 1");
        }
        assert!(g.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn permutation_equivariance() {
        let emb = init_embeddings(5, 2, 17).unwrap();
        let k = 2;
        let stack = build_stack(&emb, k, 0.4).unwrap();

        // Permute feature columns of both embeddings.
        let perm = [3usize, 0, 4, 1, 2];
        let permute_cols = |m: &Tensor| {
            let mut data = vec![0.0; 10];
            for t in 0..2 {
                for f in 0..5 {
                    data[t * 5 + f] = m.at(&[t, perm[f]]);
                }
            }
            Tensor::new(vec![2, 5], data).unwrap()
        };
        let permuted = NodeEmbeddings {
            theta: permute_cols(&emb.theta),
            psi: permute_cols(&emb.psi),
        };
        let pstack = build_stack(&permuted, k, 0.4).unwrap();
        for t in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    let expect = stack.slices[t].at(&[perm[i], perm[j]]);
                    assert!(
                        (pstack.slices[t].at(&[i, j]) - expect).abs() < 1e-12,
                        "slice {t} entry ({i},{j})"
                    );
                }
            }
        }
    }
}
