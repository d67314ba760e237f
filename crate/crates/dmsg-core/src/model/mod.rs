//! Two-layer graph-convolutional encoder with an expandable classifier head.
//!
//! The encoder computes `Z = A_hat * relu(A_hat * X * W1 + b1) * W2 + b2`
//! with `A_hat` the symmetrically normalized adjacency; the head maps
//! embeddings to logits over every class seen so far and grows by columns as
//! new classes arrive, never touching the columns already trained.

mod checkpoint;

pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{DiffGraph, NodeId, NumericsError, SparseMatrix, Tensor};
use crate::seeds::derive_seed;

/// Errors from model construction or checkpoint handling.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Encoder weights: `W1 (feature_dim x hidden)`, `W2 (hidden x hidden)` and
/// their row biases.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GcnParams {
    /// Glorot-uniform initialization from a dedicated seeded stream.
    pub fn init(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        GcnParams {
            w1: glorot(feature_dim, hidden, derive_seed(seed, "gcn.w1")),
            b1: Tensor::zeros(1, hidden),
            w2: glorot(hidden, hidden, derive_seed(seed, "gcn.w2")),
            b2: Tensor::zeros(1, hidden),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }
}

/// Linear classifier over the classes seen so far: `logits = Z * W + b`.
/// Starts with zero columns; [`extend_head`] appends columns for new classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    /// A head over no classes yet.
    pub fn empty(hidden: usize) -> Self {
        ClassifierHead {
            weight: Tensor::zeros(hidden, 0),
            bias: Tensor::zeros(1, 0),
        }
    }

    /// Number of classes currently covered.
    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Returns a head widened by `n_new` columns. Existing weight columns and
/// bias entries are preserved bit for bit; new weight entries are drawn
/// uniformly from `(-init_scale, init_scale)` on a stream derived from
/// `seed`, and new bias entries are zero, so with `init_scale = 0` every
/// new class starts at logit 0.
pub fn extend_head(
    head: &ClassifierHead,
    n_new: usize,
    init_scale: f64,
    seed: u64,
) -> Result<ClassifierHead, ModelError> {
    if n_new < 1 {
        return Err(ModelError::Invalid(
            "extend_head needs at least one new class".into(),
        ));
    }
    if !init_scale.is_finite() || init_scale < 0.0 {
        return Err(ModelError::Invalid(format!(
            "init_scale must be finite and non-negative, got {init_scale}"
        )));
    }
    let hidden = head.hidden_dim();
    let old = head.out_dim();
    let mut weight = Tensor::zeros(hidden, old + n_new);
    let mut bias = Tensor::zeros(1, old + n_new);
    for r in 0..hidden {
        weight.row_mut(r)[..old].copy_from_slice(head.weight.row(r));
    }
    bias.row_mut(0)[..old].copy_from_slice(head.bias.row(0));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "head.extend"));
    for c in old..old + n_new {
        for r in 0..hidden {
            let v = if init_scale == 0.0 {
                0.0
            } else {
                rng.random_range(-init_scale..init_scale)
            };
            weight.set(r, c, v);
        }
    }
    Ok(ClassifierHead { weight, bias })
}

/// Tape handles for the encoder parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundGcn {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Tape handles for the classifier head.
#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Registers the encoder parameters as gradient-carrying leaves.
pub fn bind_gcn(g: &mut DiffGraph, p: &GcnParams) -> Result<BoundGcn, NumericsError> {
    Ok(BoundGcn {
        w1: g.input(p.w1.clone())?,
        b1: g.input(p.b1.clone())?,
        w2: g.input(p.w2.clone())?,
        b2: g.input(p.b2.clone())?,
    })
}

/// Registers the head parameters as gradient-carrying leaves.
pub fn bind_head(g: &mut DiffGraph, h: &ClassifierHead) -> Result<BoundHead, NumericsError> {
    Ok(BoundHead {
        weight: g.input(h.weight.clone())?,
        bias: g.input(h.bias.clone())?,
    })
}

/// Two propagation layers: `A_hat * relu(A_hat * X * W1 + b1) * W2 + b2`
/// (the second layer is linear). `dropout_mask`, when given, multiplies the
/// hidden activations elementwise — callers precompute an inverted-dropout
/// mask as a constant node; training with dropout off never touches it.
pub fn encode(
    g: &mut DiffGraph,
    adjacency: &Rc<SparseMatrix>,
    features: NodeId,
    gcn: &BoundGcn,
    dropout_mask: Option<NodeId>,
) -> Result<NodeId, NumericsError> {
    let xw = g.matmul(features, gcn.w1)?;
    let agg = g.spmm(Rc::clone(adjacency), xw)?;
    let pre = g.add_row(agg, gcn.b1)?;
    let mut hidden = g.relu(pre)?;
    if let Some(mask) = dropout_mask {
        hidden = g.mul(hidden, mask)?;
    }
    let hw = g.matmul(hidden, gcn.w2)?;
    let agg2 = g.spmm(Rc::clone(adjacency), hw)?;
    g.add_row(agg2, gcn.b2)
}

/// Logits over all classes seen so far.
pub fn classify(g: &mut DiffGraph, z: NodeId, head: &BoundHead) -> Result<NodeId, NumericsError> {
    let zw = g.matmul(z, head.weight)?;
    g.add_row(zw, head.bias)
}

/// Forward-only convenience: embeddings and row-softmax probabilities for a
/// whole snapshot, without tracking gradients.
pub fn forward_probs(
    adjacency: &Rc<SparseMatrix>,
    features: &Tensor,
    gcn: &GcnParams,
    head: &ClassifierHead,
) -> Result<(Tensor, Tensor), NumericsError> {
    let mut g = DiffGraph::new();
    let x = g.constant(features.clone())?;
    let bound_gcn = BoundGcn {
        w1: g.constant(gcn.w1.clone())?,
        b1: g.constant(gcn.b1.clone())?,
        w2: g.constant(gcn.w2.clone())?,
        b2: g.constant(gcn.b2.clone())?,
    };
    let bound_head = BoundHead {
        weight: g.constant(head.weight.clone())?,
        bias: g.constant(head.bias.clone())?,
    };
    let z = encode(&mut g, adjacency, x, &bound_gcn, None)?;
    let logits = classify(&mut g, z, &bound_head)?;
    let probs = g.softmax_rows(logits)?;
    Ok((g.value(z).clone(), g.value(probs).clone()))
}

pub(crate) fn glorot(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::normalize_adjacency;

    fn identity_gcn(dim: usize) -> GcnParams {
        GcnParams {
            w1: Tensor::eye(dim),
            b1: Tensor::zeros(1, dim),
            w2: Tensor::eye(dim),
            b2: Tensor::zeros(1, dim),
        }
    }

    #[test]
    fn self_loop_node_with_identity_weights_passes_features_through() {
        let adj = Rc::new(normalize_adjacency(1, &[]).unwrap());
        let x = Tensor::from_vec(1, 3, vec![0.5, 2.0, 0.0]).unwrap();
        let head = ClassifierHead::empty(3);
        let (z, _) = forward_probs(&adj, &x, &identity_gcn(3), &extend_head(&head, 1, 0.0, 0).unwrap())
            .unwrap();
        assert!(z.bits_eq(&x));
    }

    #[test]
    fn zero_features_give_zero_embeddings() {
        let adj = Rc::new(normalize_adjacency(3, &[(0, 1), (1, 2)]).unwrap());
        let x = Tensor::zeros(3, 4);
        let gcn = GcnParams::init(4, 4, 77);
        let head = extend_head(&ClassifierHead::empty(4), 2, 0.1, 0).unwrap();
        let (z, _) = forward_probs(&adj, &x, &gcn, &head).unwrap();
        assert_eq!(z.data(), Tensor::zeros(3, 4).data());
    }

    #[test]
    fn encoder_matches_dense_oracle_on_a_path() {
        let adj = Rc::new(normalize_adjacency(3, &[(0, 1), (1, 2)]).unwrap());
        let x = Tensor::from_rows(&[
            vec![0.2, -1.0],
            vec![1.5, 0.3],
            vec![-0.4, 0.8],
        ])
        .unwrap();
        let gcn = GcnParams::init(2, 3, 5);
        let head = extend_head(&ClassifierHead::empty(3), 2, 0.1, 5).unwrap();
        let (z, _) = forward_probs(&adj, &x, &gcn, &head).unwrap();

        // Dense oracle computed with plain matrix algebra.
        let a = adj.to_dense();
        let h = a
            .matmul(&x.matmul(&gcn.w1))
            .map(|v| if v > 0.0 { v } else { 0.0 });
        let expect = a.matmul(&h.matmul(&gcn.w2));
        for (zi, ei) in z.data().iter().zip(expect.data()) {
            assert!((zi - ei).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_embeddings_classify_uniformly() {
        let adj = Rc::new(normalize_adjacency(2, &[(0, 1)]).unwrap());
        let x = Tensor::zeros(2, 3);
        let gcn = GcnParams::init(3, 3, 1);
        let head = extend_head(&ClassifierHead::empty(3), 4, 0.2, 9).unwrap();
        let (_, probs) = forward_probs(&adj, &x, &gcn, &head).unwrap();
        for r in 0..2 {
            for &p in probs.row(r) {
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probabilities_are_rows_of_a_stochastic_matrix() {
        let adj = Rc::new(normalize_adjacency(4, &[(0, 1), (2, 3), (1, 2)]).unwrap());
        let x = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 2.0],
            vec![-1.0, 1.0],
            vec![3.0, -2.0],
        ])
        .unwrap();
        let gcn = GcnParams::init(2, 5, 2);
        let head = extend_head(&ClassifierHead::empty(5), 3, 0.3, 2).unwrap();
        let (_, probs) = forward_probs(&adj, &x, &gcn, &head).unwrap();
        for r in 0..4 {
            let sum: f64 = probs.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(probs.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn extend_head_preserves_old_columns_bit_for_bit() {
        let head = extend_head(&ClassifierHead::empty(4), 3, 0.5, 11).unwrap();
        let wider = extend_head(&head, 2, 0.5, 12).unwrap();
        assert_eq!(wider.out_dim(), 5);
        for r in 0..4 {
            assert_eq!(
                head.weight.row(r),
                &wider.weight.row(r)[..3],
                "old weights moved"
            );
        }
        assert_eq!(head.bias.row(0), &wider.bias.row(0)[..3]);
        assert_eq!(&wider.bias.row(0)[3..], &[0.0, 0.0]);
    }

    #[test]
    fn extend_head_is_deterministic_and_scale_zero_is_zero() {
        let a = extend_head(&ClassifierHead::empty(4), 2, 0.3, 5).unwrap();
        let b = extend_head(&ClassifierHead::empty(4), 2, 0.3, 5).unwrap();
        assert!(a.weight.bits_eq(&b.weight));
        let c = extend_head(&ClassifierHead::empty(4), 2, 0.3, 6).unwrap();
        assert!(!a.weight.bits_eq(&c.weight));

        let z = extend_head(&ClassifierHead::empty(4), 2, 0.0, 5).unwrap();
        assert!(z.weight.data().iter().all(|&v| v == 0.0));

        assert!(extend_head(&ClassifierHead::empty(4), 0, 0.1, 5).is_err());
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        use rand::seq::SliceRandom;

        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..20 {
            let n = 6;
            let edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5)];
            let mut x = Tensor::zeros(n, 3);
            for v in x.data_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
            let gcn = GcnParams::init(3, 4, rng.random());
            let head = extend_head(&ClassifierHead::empty(4), 2, 0.1, rng.random()).unwrap();

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            // perm[i] = new index of original node i.
            let permuted_edges: Vec<(usize, usize)> =
                edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
            let mut px = Tensor::zeros(n, 3);
            for i in 0..n {
                px.row_mut(perm[i]).copy_from_slice(x.row(i));
            }

            let adj = Rc::new(normalize_adjacency(n, &edges).unwrap());
            let padj = Rc::new(normalize_adjacency(n, &permuted_edges).unwrap());
            let (z, _) = forward_probs(&adj, &x, &gcn, &head).unwrap();
            let (pz, _) = forward_probs(&padj, &px, &gcn, &head).unwrap();
            for i in 0..n {
                for (a, b) in z.row(i).iter().zip(pz.row(perm[i])) {
                    assert!((a - b).abs() < 1e-12, "row {i} moved under relabeling");
                }
            }
        }
    }

    #[test]
    fn encode_classify_passes_a_gradient_check() {
        use crate::numerics::gradient_check;

        let adj = Rc::new(normalize_adjacency(4, &[(0, 1), (1, 2), (2, 3)]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut x = Tensor::zeros(4, 3);
        for v in x.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let gcn = GcnParams::init(3, 4, 8);
        let head = extend_head(&ClassifierHead::empty(4), 3, 0.2, 8).unwrap();
        let params = vec![
            gcn.w1.clone(),
            gcn.b1.clone(),
            gcn.w2.clone(),
            gcn.b2.clone(),
            head.weight.clone(),
            head.bias.clone(),
        ];
        let targets = vec![0usize, 1, 2, 1];
        let err = gradient_check(
            |g, ids| {
                let x = g.constant(x.clone())?;
                let bound = BoundGcn {
                    w1: ids[0],
                    b1: ids[1],
                    w2: ids[2],
                    b2: ids[3],
                };
                let bh = BoundHead {
                    weight: ids[4],
                    bias: ids[5],
                };
                let z = encode(g, &adj, x, &bound, None)?;
                let logits = classify(g, z, &bh)?;
                g.softmax_cross_entropy(logits, &targets)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "gradient error {err}");
    }
}
