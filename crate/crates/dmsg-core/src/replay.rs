//! Structure-aware embedding replay.
//!
//! Buffered nodes are replayed not as frozen vectors but as samples from a
//! small variational model around their embeddings: `sigma = relu(Z * W + b)`
//! and `Zhat = Z + sigma .* eps` with standard-normal `eps`. Three losses
//! keep the sampled embeddings useful:
//!
//! * an adversarial alignment term that pushes sampled embeddings toward the
//!   distribution of real ones, trained min-max in a single backward pass
//!   through gradient-reversal markers;
//! * a structure term that asks pairs of sampled embeddings to predict
//!   whether their nodes share a label, regularized by a KL pull toward the
//!   standard normal;
//! * a plain cross-entropy on the classifier's output for sampled
//!   embeddings of buffered nodes.

use crate::model::{classify, glorot, BoundHead};
use crate::numerics::{DiffGraph, NodeId, NumericsError, Tensor};
use crate::seeds::derive_seed;

/// Clamp bounds for probabilities inside logarithms.
const PROB_FLOOR: f64 = 1e-7;
/// Floor for sampled variances inside the KL term.
const VAR_FLOOR: f64 = 1e-6;

/// Weights of the variational sampler: `sigma = relu(Z * w + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub w_sigma: Tensor,
    pub b_sigma: Tensor,
}

impl VariationalParams {
    /// Glorot-uniform weight, zero bias, on a dedicated seeded stream.
    pub fn init(hidden: usize, seed: u64) -> Self {
        VariationalParams {
            w_sigma: glorot(hidden, hidden, derive_seed(seed, "var.w_sigma")),
            b_sigma: Tensor::zeros(1, hidden),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_sigma.rows()
    }
}

/// Weights of the embedding discriminator, a one-hidden-layer MLP with a
/// sigmoid output: `D(z) = sigmoid(relu(z * W1 + b1) * W2 + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl DiscriminatorParams {
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mid = (hidden / 2).max(1);
        DiscriminatorParams {
            w1: glorot(hidden, mid, derive_seed(seed, "disc.w1")),
            b1: Tensor::zeros(1, mid),
            w2: glorot(mid, 1, derive_seed(seed, "disc.w2")),
            b2: Tensor::zeros(1, 1),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }
}

/// Tape handles for the variational sampler.
#[derive(Debug, Clone, Copy)]
pub struct BoundVariational {
    pub w_sigma: NodeId,
    pub b_sigma: NodeId,
}

/// Tape handles for the discriminator.
#[derive(Debug, Clone, Copy)]
pub struct BoundDiscriminator {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub fn bind_variational(
    g: &mut DiffGraph,
    p: &VariationalParams,
) -> Result<BoundVariational, NumericsError> {
    Ok(BoundVariational {
        w_sigma: g.input(p.w_sigma.clone())?,
        b_sigma: g.input(p.b_sigma.clone())?,
    })
}

pub fn bind_discriminator(
    g: &mut DiffGraph,
    p: &DiscriminatorParams,
) -> Result<BoundDiscriminator, NumericsError> {
    Ok(BoundDiscriminator {
        w1: g.input(p.w1.clone())?,
        b1: g.input(p.b1.clone())?,
        w2: g.input(p.w2.clone())?,
        b2: g.input(p.b2.clone())?,
    })
}

/// Reparameterized sample around `z`: returns `(sigma, zhat)` with
/// `sigma = relu(z * W + b)` and `zhat = z + sigma .* eps`. The noise `eps`
/// must be a node of the same shape as `z` (draw it outside the tape so
/// repeated builds stay deterministic).
pub fn variational_sample(
    g: &mut DiffGraph,
    z: NodeId,
    var: &BoundVariational,
    eps: NodeId,
) -> Result<(NodeId, NodeId), NumericsError> {
    let lin = g.matmul(z, var.w_sigma)?;
    let pre = g.add_row(lin, var.b_sigma)?;
    let sigma = g.relu(pre)?;
    let noise = g.mul(sigma, eps)?;
    let zhat = g.add(z, noise)?;
    Ok((sigma, zhat))
}

/// Discriminator forward pass: per-row probability that a row of `z` is a
/// real (non-sampled) embedding.
pub fn discriminator_forward(
    g: &mut DiffGraph,
    z: NodeId,
    disc: &BoundDiscriminator,
) -> Result<NodeId, NumericsError> {
    let h = g.matmul(z, disc.w1)?;
    let h = g.add_row(h, disc.b1)?;
    let h = g.relu(h)?;
    let out = g.matmul(h, disc.w2)?;
    let out = g.add_row(out, disc.b2)?;
    g.sigmoid(out)
}

/// `ln p` with the probability clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
fn safe_log(g: &mut DiffGraph, p: NodeId) -> Result<NodeId, NumericsError> {
    let clamped = g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    g.log(clamped)
}

/// Adversarial alignment objective between real embeddings `z` and sampled
/// embeddings `zhat`:
///
/// `mean_rows[ ln D(z) + ln(1 - D(zhat)) ]`
///
/// With `reverse` on, gradient-reversal markers make one descent step on the
/// returned scalar perform ascent for the discriminator and descent for the
/// encoder and sampler: both inputs enter the discriminator through a
/// reversal, and the whole mean is wrapped in another. The two flips cancel
/// along the embedding paths (the encoder and sampler descend the objective,
/// pushing the two distributions toward each other) while the discriminator's
/// own parameters see a single flip (ascent). The forward value is identical
/// either way; turn `reverse` off for finite-difference checks, which can
/// only see the true derivative of the forward value.
pub fn mise_loss(
    g: &mut DiffGraph,
    z: NodeId,
    zhat: NodeId,
    disc: &BoundDiscriminator,
    reverse: bool,
) -> Result<NodeId, NumericsError> {
    let real_in = if reverse { g.grad_reverse(z)? } else { z };
    let d_real = discriminator_forward(g, real_in, disc)?;
    let fake_in = if reverse { g.grad_reverse(zhat)? } else { zhat };
    let d_fake = discriminator_forward(g, fake_in, disc)?;

    let ln_real = safe_log(g, d_real)?;
    let ones = {
        let (rows, cols) = g.value(d_fake).shape();
        g.constant(Tensor::filled(rows, cols, 1.0))?
    };
    let one_minus_fake = g.sub(ones, d_fake)?;
    let ln_fake = safe_log(g, one_minus_fake)?;

    let per_row = g.add(ln_real, ln_fake)?;
    let mean = g.mean_all(per_row)?;
    if reverse {
        g.grad_reverse(mean)
    } else {
        Ok(mean)
    }
}

/// KL divergence from `N(mu_r, diag(sigma_r^2))` to the standard normal,
/// summed over rows:
///
/// `0.5 * sum_{r,d} ( sigma^2 + mu^2 - 1 - ln sigma^2 )`
///
/// with `sigma^2` floored at `VAR_FLOOR` inside both the quadratic and the
/// logarithm, so a collapsed sampler cannot produce an infinite loss.
pub fn kl_std_normal(
    g: &mut DiffGraph,
    mu: NodeId,
    sigma: NodeId,
) -> Result<NodeId, NumericsError> {
    let var = g.mul(sigma, sigma)?;
    let var = g.clamp(var, VAR_FLOOR, f64::INFINITY)?;
    let mu_sq = g.mul(mu, mu)?;
    let ln_var = g.log(var)?;
    let sum = g.add(var, mu_sq)?;
    let sum = g.sub(sum, ln_var)?;
    // Each element contributes (sigma^2 + mu^2 - ln sigma^2) - 1.
    let shifted = g.affine(sum, 1.0, -1.0)?;
    let total = g.sum_all(shifted)?;
    g.affine(total, 0.5, 0.0)
}

/// Same-label adjacency over a label list: entry `(i, j)` is 1 when
/// `labels[i] == labels[j]` and `i != j`, else 0. Symmetric, zero diagonal.
pub fn label_adjacency(labels: &[usize]) -> Tensor {
    let n = labels.len();
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && labels[i] == labels[j] {
                a.set(i, j, 1.0);
            }
        }
    }
    a
}

/// Structure objective for sampled embeddings: binary cross-entropy between
/// `sigmoid(zhat_i . zhat_j)` and the same-label indicator, averaged over
/// the `n(n-1)/2` unordered pairs, plus [`kl_std_normal`] of the sampler's
/// `(mu, sigma)`. With fewer than two rows there are no pairs and only the
/// KL term remains.
pub fn cgse_loss(
    g: &mut DiffGraph,
    zhat: NodeId,
    mu: NodeId,
    sigma: NodeId,
    labels: &[usize],
) -> Result<NodeId, NumericsError> {
    let n = g.value(zhat).rows();
    if labels.len() != n {
        return Err(NumericsError::invalid(
            "cgse_loss",
            format!("{} labels for {} embedding rows", labels.len(), n),
        ));
    }
    let kl = kl_std_normal(g, mu, sigma)?;
    if n < 2 {
        return Ok(kl);
    }

    let scores = g.matmul_nt(zhat, zhat)?;
    let probs = g.sigmoid(scores)?;
    let ln_p = safe_log(g, probs)?;
    let ones = g.constant(Tensor::filled(n, n, 1.0))?;
    let one_minus = g.sub(ones, probs)?;
    let ln_q = safe_log(g, one_minus)?;

    let target = g.constant(label_adjacency(labels))?;
    let anti_target = {
        let mut t = label_adjacency(labels);
        for v in t.data_mut() {
            *v = 1.0 - *v;
        }
        g.constant(t)?
    };
    // Restrict to unordered pairs i < j via a strict upper-triangular mask;
    // the diagonal (and its 1 - a_ii = 1 "target") never contributes.
    let mut upper = Tensor::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            upper.set(i, j, 1.0);
        }
    }
    let mask = g.constant(upper)?;

    let pos = g.mul(target, ln_p)?;
    let neg = g.mul(anti_target, ln_q)?;
    let both = g.add(pos, neg)?;
    let masked = g.mul(both, mask)?;
    let total = g.sum_all(masked)?;
    let pairs = (n * (n - 1) / 2) as f64;
    let bce = g.affine(total, -1.0 / pairs, 0.0)?;
    g.add(bce, kl)
}

/// Replayed-prediction loss: cross-entropy of the classifier on sampled
/// embeddings of buffered nodes against their stored labels.
pub fn replay_prediction_loss(
    g: &mut DiffGraph,
    zhat: NodeId,
    head: &BoundHead,
    labels: &[usize],
) -> Result<NodeId, NumericsError> {
    let logits = classify(g, zhat, head)?;
    g.softmax_cross_entropy(logits, labels)
}
