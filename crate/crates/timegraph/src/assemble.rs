//! Fusion of adjacency, importance, and embedding slices into the final
//! per-window graph representation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the three constituents combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssembleMode {
    /// `G_t = (A_t ⊙ I_t) + E_t`; keeps slices `d x d`, which the
    /// pooling stage requires. The default.
    #[default]
    HadamardAdd,
    /// Literal side-by-side concatenation `[A_t | I_t | E_t]`,
    /// producing `d x 3d` slices. Retained for comparison runs.
    Concat,
}

/// Combined per-window representation.
#[derive(Debug, Clone)]
pub struct AssembledGraph {
    pub slices: Vec<Tensor>,
    pub mode: AssembleMode,
}

/// Fuses per-window slices. All three stacks must share shape; gradients
/// flow to each constituent.
pub fn assemble(
    adjacency: &[Tensor],
    importance: &[Tensor],
    embedding: &[Tensor],
    mode: AssembleMode,
) -> Result<AssembledGraph> {
    if adjacency.len() != importance.len() || adjacency.len() != embedding.len() {
        return Err(Error::dim(
            "assemble",
            format!("{} windows", adjacency.len()),
            format!("{} / {}", importance.len(), embedding.len()),
        ));
    }
    let mut slices = Vec::with_capacity(adjacency.len());
    for ((a, i), e) in adjacency.iter().zip(importance).zip(embedding) {
        if a.shape() != i.shape() || a.shape() != e.shape() {
            return Err(Error::dim(
                "assemble",
                format!("{:?}", a.shape()),
                format!("{:?} / {:?}", i.shape(), e.shape()),
            ));
        }
        let slice = match mode {
            AssembleMode::HadamardAdd => a.mul(i)?.add(e)?,
            AssembleMode::Concat => Tensor::concat_last(&[a, i, e])?,
        };
        slices.push(slice);
    }
    Ok(AssembledGraph { slices, mode })
}
