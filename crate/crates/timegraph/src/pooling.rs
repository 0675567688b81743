//! Convolutional temporal graph pooling and the classifier head.
//!
//! Nodes act as channels of a 2-D convolution whose kernel spans
//! `[1, k]` along the window axis, producing cluster embeddings. The
//! same convolution weights, contracted with a learnable kernel vector,
//! yield the mixing matrix `M` that pools the adjacency as
//! `A_out = M A M^T`. The pooled graph is flattened into a four-layer
//! perceptron for multi-label logits.

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

/// Pooling parameters: conv weights `[n_out, n_in, 1, k]`, per-cluster
/// bias, and the `[1, k]` kernel-mixing vector.
#[derive(Debug, Clone)]
pub struct PoolLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub v: Tensor,
}

impl PoolLayer {
    pub fn init(n_in: usize, n_out: usize, kernel: usize, rng: &mut SeededRng) -> Result<Self> {
        if n_out >= n_in {
            return Err(Error::Contract(format!(
                "pooling must reduce nodes: {n_out} >= {n_in}"
            )));
        }
        if kernel == 0 {
            return Err(Error::Contract("kernel size must be >= 1".into()));
        }
        let bound = (6.0 / ((n_in + n_out) * kernel) as f64).sqrt();
        Ok(PoolLayer {
            w: Tensor::uniform(&[n_out, n_in, 1, kernel], -bound, bound, rng),
            b: Tensor::zeros(&[n_out]),
            v: Tensor::uniform(&[1, kernel], -bound, bound, rng),
        })
    }

    pub fn n_in(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[3]
    }
}

/// Clusters node series by valid-mode cross-correlation along the
/// window axis: input `[n_in, f, T]`, output `[n_out, f, T - k + 1]`.
pub fn pool_features(x_in: &Tensor, layer: &PoolLayer) -> Result<Tensor> {
    let t_len = match x_in.shape() {
        [n, _, t] if *n == layer.n_in() => *t,
        other => {
            return Err(Error::dim(
                "pool_features",
                format!("[{}, f, T] input", layer.n_in()),
                format!("{other:?}"),
            ));
        }
    };
    if t_len < layer.kernel() {
        return Err(Error::dim(
            "pool_features",
            format!("time axis >= kernel {}", layer.kernel()),
            format!("{t_len}"),
        ));
    }
    let y = x_in.cross_correlate2d(&layer.w)?;
    // Per-cluster bias, broadcast over the remaining axes.
    let (f, t_out) = (y.shape()[1], y.shape()[2]);
    let ones = Tensor::ones(&[f * t_out]);
    let bias = layer.b.outer(&ones)?.reshape(&[layer.n_out(), f, t_out])?;
    y.add(&bias)
}

/// `M[i][j] = sum_k W[i][j][0][k] * V[0][k]`.
pub fn mixing_matrix(layer: &PoolLayer) -> Result<Tensor> {
    let (n_out, n_in, k) = (layer.n_out(), layer.n_in(), layer.kernel());
    let flat = layer.w.reshape(&[n_out * n_in, k])?;
    flat.matmul(&layer.v.flatten()?)?.reshape(&[n_out, n_in])
}

/// Pools an adjacency through the mixing matrix: `A_out = M A M^T`.
pub fn pool_adjacency(m: &Tensor, a_in: &Tensor) -> Result<Tensor> {
    let n_in = match m.shape() {
        [_, n_in] => *n_in,
        other => return Err(Error::dim("pool_adjacency", "rank-2 M", format!("{other:?}"))),
    };
    match a_in.shape() {
        [r, c] if *r == n_in && *c == n_in => {}
        other => {
            return Err(Error::dim(
                "pool_adjacency",
                format!("[{n_in}, {n_in}] adjacency"),
                format!("{other:?}"),
            ));
        }
    }
    m.matmul(a_in)?.matmul(&m.transpose()?)
}

/// Pooled cluster embeddings plus the pooled adjacency for every
/// window.
#[derive(Debug, Clone)]
pub struct PooledGraph {
    /// `[n_out, f, T - k + 1]` cluster series.
    pub x_out: Tensor,
    /// One `[n_out, n_out]` pooled adjacency per window.
    pub a_out: Vec<Tensor>,
}

/// Four-layer perceptron with tanh hidden activations and linear
/// output.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl ClassifierHead {
    pub fn init(input: usize, hidden: usize, classes: usize, depth: usize, rng: &mut SeededRng) -> Self {
        assert!(depth >= 2);
        let mut dims = vec![input];
        dims.extend(std::iter::repeat(hidden).take(depth - 1));
        dims.push(classes);
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        for i in 0..depth {
            let bound = (6.0 / (dims[i] + dims[i + 1]) as f64).sqrt();
            weights.push(Tensor::uniform(&[dims[i + 1], dims[i]], -bound, bound, rng));
            biases.push(Tensor::zeros(&[dims[i + 1]]));
        }
        ClassifierHead { weights, biases }
    }

    pub fn input_width(&self) -> usize {
        self.weights[0].shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.weights.last().unwrap().shape()[0]
    }
}

/// Raw logits from a flattened input. `dropout` zeroes the first
/// hidden layer's activations with the given probability (inverted
/// scaling); pass `None` during evaluation.
pub fn classify(
    head: &ClassifierHead,
    x: &Tensor,
    dropout: Option<(f64, &mut SeededRng)>,
) -> Result<Tensor> {
    if x.shape() != [head.input_width()] {
        return Err(Error::dim(
            "classify",
            format!("[{}] input", head.input_width()),
            format!("{:?}", x.shape()),
        ));
    }
    let mut masks: Option<(f64, &mut SeededRng)> = dropout;
    let depth = head.weights.len();
    let mut h = x.clone();
    for i in 0..depth {
        h = head.weights[i].matmul(&h)?.add(&head.biases[i])?;
        if i + 1 < depth {
            h = h.tanh()?;
            if i == 0 {
                if let Some((p, rng)) = masks.as_mut() {
                    if *p > 0.0 {
                        let keep = 1.0 - *p;
                        let mask: Vec<f64> = (0..h.numel())
                            .map(|_| if rng.bernoulli(*p) { 0.0 } else { 1.0 / keep })
                            .collect();
                        h = h.apply_mask(&mask)?;
                    }
                }
            }
        }
    }
    Ok(h)
}
