//! Variational graph autoencoding with GIN message passing.
//!
//! The encoder runs two GIN layers over the assembled slice (the slice
//! acts as both the weighted adjacency and the initial node features),
//! then two linear heads produce the latent mean and log-variance per
//! node. Decoding runs GIN layers over a parameter-free uniform
//! complete graph and projects back to edge logits; the reconstruction
//! target is the binarized sparsified adjacency. The objective is mean
//! binary cross-entropy plus the closed-form KL divergence to a
//! standard normal prior.

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

/// One GIN layer: a learnable self-loop weight and a two-layer
/// perceptron with tanh after the first layer.
#[derive(Debug, Clone)]
pub struct GinLayer {
    /// Learnable scalar weighting the node's own features.
    pub eps: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GinLayer {
    pub fn init(f_in: usize, f_out: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let bound1 = (6.0 / (f_in + hidden) as f64).sqrt();
        let bound2 = (6.0 / (hidden + f_out) as f64).sqrt();
        GinLayer {
            eps: Tensor::scalar(0.0),
            w1: Tensor::uniform(&[f_in, hidden], -bound1, bound1, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::uniform(&[hidden, f_out], -bound2, bound2, rng),
            b2: Tensor::zeros(&[f_out]),
        }
    }
}

/// `(1 + eps) * H + A_w * H` — the neighbor-sum aggregation with edge
/// weights, before the layer MLP.
pub fn gin_aggregate(h: &Tensor, a_w: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let n = h.shape()[0];
    match a_w.shape() {
        [r, c] if *r == n && *c == n => {}
        other => {
            return Err(Error::dim(
                "gin_forward",
                format!("[{n}, {n}] adjacency"),
                format!("{other:?}"),
            ));
        }
    }
    let self_term = h.mul(&eps.add_const(1.0)?)?;
    self_term.add(&a_w.matmul(h)?)
}

/// Adds a bias vector to every row of `[n, f]` features.
fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let ones = Tensor::ones(&[n]);
    x.add(&ones.outer(bias)?)
}

/// One GIN layer forward: aggregation followed by the layer MLP.
pub fn gin_forward(h: &Tensor, a_w: &Tensor, layer: &GinLayer) -> Result<Tensor> {
    let pre = gin_aggregate(h, a_w, &layer.eps)?;
    let hidden = add_row_bias(&pre.matmul(&layer.w1)?, &layer.b1)?.tanh()?;
    add_row_bias(&hidden.matmul(&layer.w2)?, &layer.b2)
}

/// All encoder/decoder parameters of the per-slice autoencoder. The
/// same parameters are shared across windows.
#[derive(Debug, Clone)]
pub struct VgaeParams {
    pub enc: Vec<GinLayer>,
    pub w_mu: Tensor,
    pub b_mu: Tensor,
    pub w_logvar: Tensor,
    pub b_logvar: Tensor,
    pub dec: Vec<GinLayer>,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

impl VgaeParams {
    /// `slice_width` is the feature width of the assembled slices (d in
    /// the default fused mode).
    pub fn init(
        nodes: usize,
        slice_width: usize,
        hidden: usize,
        latent: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let head_bound = |out: usize| (6.0 / (hidden + out) as f64).sqrt();
        let bh = head_bound(latent);
        let bp = head_bound(nodes);
        VgaeParams {
            enc: vec![
                GinLayer::init(slice_width, hidden, hidden, rng),
                GinLayer::init(hidden, hidden, hidden, rng),
            ],
            w_mu: Tensor::uniform(&[hidden, latent], -bh, bh, rng),
            b_mu: Tensor::zeros(&[latent]),
            w_logvar: Tensor::uniform(&[hidden, latent], -bh, bh, rng),
            b_logvar: Tensor::zeros(&[latent]),
            dec: vec![
                GinLayer::init(latent, hidden, hidden, rng),
                GinLayer::init(hidden, hidden, hidden, rng),
            ],
            w_proj: Tensor::uniform(&[hidden, nodes], -bp, bp, rng),
            b_proj: Tensor::zeros(&[nodes]),
        }
    }

    pub fn latent(&self) -> usize {
        self.w_mu.shape()[1]
    }
}

/// Log-variance clamp bounds; exp(30) is still finite in f64 but far
/// beyond any useful variance.
pub const LOGVAR_CLAMP: (f64, f64) = (-30.0, 30.0);

/// Encodes one assembled slice into per-node latent mean and
/// log-variance. Also returns the GIN layer outputs for gradient-based
/// node scoring.
pub fn encode(g_slice: &Tensor, params: &VgaeParams) -> Result<(Tensor, Tensor, Vec<Tensor>)> {
    let mut h = g_slice.clone();
    let mut hidden = Vec::with_capacity(params.enc.len());
    for layer in &params.enc {
        h = gin_forward(&h, g_slice, layer)?;
        hidden.push(h.clone());
    }
    let mu = add_row_bias(&h.matmul(&params.w_mu)?, &params.b_mu)?;
    let logvar = add_row_bias(&h.matmul(&params.w_logvar)?, &params.b_logvar)?
        .clamp(LOGVAR_CLAMP.0, LOGVAR_CLAMP.1)?;
    Ok((mu, logvar, hidden))
}

/// `z = mu + exp(logvar / 2) * noise` with externally supplied standard
/// normal noise, so gradients reach `mu` and `logvar` but not the draw.
pub fn reparameterize_with(mu: &Tensor, logvar: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if mu.shape() != logvar.shape() || mu.shape() != noise.shape() {
        return Err(Error::dim(
            "reparameterize",
            format!("{:?}", mu.shape()),
            format!("{:?} / {:?}", logvar.shape(), noise.shape()),
        ));
    }
    let sigma = logvar.scale(0.5)?.exp()?;
    mu.add(&sigma.mul(&noise.detach())?)
}

/// Reparameterized sample with seeded noise.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
    let noise = Tensor::normal(mu.shape(), 1.0, rng);
    reparameterize_with(mu, logvar, &noise)
}

/// Decoder message passing runs over a uniform complete graph with
/// weight `1/n` off the diagonal.
fn decoder_adjacency(n: usize) -> Tensor {
    let w = 1.0 / n as f64;
    let mut data = vec![w; n * n];
    for i in 0..n {
        data[i * n + i] = 0.0;
    }
    Tensor::from_parts(vec![n, n], data)
}

/// Reconstructs edge probabilities from latent node samples.
pub fn decode(z: &Tensor, params: &VgaeParams) -> Result<Tensor> {
    if !z.all_finite() {
        return Err(Error::Numerical("non-finite latent sample".into()));
    }
    let n = z.shape()[0];
    let a_dec = decoder_adjacency(n);
    let mut h = z.clone();
    for layer in &params.dec {
        h = gin_forward(&h, &a_dec, layer)?;
    }
    add_row_bias(&h.matmul(&params.w_proj)?, &params.b_proj)?.sigmoid()
}

/// Detached 0/1 copy: nonzero entries become one.
pub fn binarize(a: &Tensor) -> Tensor {
    let data = a
        .data()
        .iter()
        .map(|&v| if v != 0.0 { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Mean binary cross-entropy between a 0/1 target and predicted
/// probabilities, clamped away from the log singularities.
pub fn bce_matrix(target: &Tensor, probs: &Tensor) -> Result<Tensor> {
    if target.shape() != probs.shape() {
        return Err(Error::dim(
            "bce",
            format!("{:?}", target.shape()),
            format!("{:?}", probs.shape()),
        ));
    }
    let p = probs.clamp(1e-7, 1.0 - 1e-7)?;
    let t = target.detach();
    let pos = t.mul(&p.log()?)?;
    let neg = t.neg()?.add_const(1.0)?.mul(&p.neg()?.add_const(1.0)?.log()?)?;
    pos.add(&neg)?.mean()?.neg()
}

/// Closed-form KL divergence of `N(mu, sigma^2)` against the standard
/// normal prior: `0.5 * sum(mu^2 + sigma^2 - logvar - 1)`.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let mu2 = mu.mul(mu)?;
    let var = logvar.exp()?;
    mu2.add(&var)?.sub(logvar)?.add_const(-1.0)?.sum()?.scale(0.5)
}

/// Reconstruction BCE plus prior KL for one slice.
pub fn vgae_loss(
    a_target: &Tensor,
    a_hat: &Tensor,
    mu: &Tensor,
    logvar: &Tensor,
) -> Result<Tensor> {
    bce_matrix(a_target, a_hat)?.add(&kl_divergence(mu, logvar)?)
}
