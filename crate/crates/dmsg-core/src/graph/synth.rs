//! Synthetic growing graphs: Gaussian class features over a stochastic
//! block model.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{GraphError, GrowingGraphSource};
use crate::numerics::Tensor;
use crate::seeds::derive_seed;

/// Parameters for [`synth_growing_graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n_classes: usize,
    pub nodes_per_class: usize,
    pub feature_dim: usize,
    /// Edge probability between same-class node pairs.
    pub intra_p: f64,
    /// Edge probability between different-class node pairs.
    pub inter_p: f64,
    /// Distance scale between class feature means.
    pub class_sep: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_classes: 6,
            nodes_per_class: 100,
            feature_dim: 16,
            intra_p: 0.05,
            inter_p: 0.002,
            class_sep: 4.0,
            seed: 0,
        }
    }
}

/// Generates a class-blocked graph: node `v` has class `v / nodes_per_class`,
/// features are an isotropic unit Gaussian around that class's mean (signed
/// coordinate axes scaled by `class_sep`, so means are mutually distant),
/// and each node pair draws an edge with the intra- or inter-class
/// probability. Identical parameters and seed reproduce the graph exactly.
pub fn synth_growing_graph(params: &SynthParams) -> Result<GrowingGraphSource, GraphError> {
    let SynthParams {
        n_classes,
        nodes_per_class,
        feature_dim,
        intra_p,
        inter_p,
        class_sep,
        seed,
    } = *params;
    if n_classes == 0 || nodes_per_class == 0 || feature_dim == 0 {
        return Err(GraphError::Invalid(
            "n_classes, nodes_per_class and feature_dim must all be >= 1".into(),
        ));
    }
    if n_classes > 2 * feature_dim {
        return Err(GraphError::Invalid(format!(
            "cannot place {n_classes} mutually distant class means in {feature_dim} dimensions \
             (need n_classes <= 2 * feature_dim)"
        )));
    }
    for (name, p) in [("intra_p", intra_p), ("inter_p", inter_p)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(GraphError::Invalid(format!(
                "{name} must be in [0, 1], got {p}"
            )));
        }
    }
    if !class_sep.is_finite() || class_sep < 0.0 {
        return Err(GraphError::Invalid(format!(
            "class_sep must be finite and non-negative, got {class_sep}"
        )));
    }

    let n = n_classes * nodes_per_class;
    let labels: Vec<usize> = (0..n).map(|v| v / nodes_per_class).collect();

    // Class means on signed coordinate axes: class c sits at
    // +class_sep * e_c for c < d and at -class_sep * e_{c-d} beyond.
    let mean = |class: usize, dim: usize| -> f64 {
        if class < feature_dim {
            if dim == class {
                class_sep
            } else {
                0.0
            }
        } else if dim == class - feature_dim {
            -class_sep
        } else {
            0.0
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth.features"));
    let mut features = Tensor::zeros(n, feature_dim);
    for v in 0..n {
        let row = features.row_mut(v);
        for (dim, x) in row.iter_mut().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            *x = mean(labels[v], dim) + noise;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth.edges"));
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { intra_p } else { inter_p };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    GrowingGraphSource::new(features, labels, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seeds_reproduce_the_graph_exactly() {
        let params = SynthParams {
            n_classes: 3,
            nodes_per_class: 20,
            feature_dim: 4,
            seed: 42,
            ..SynthParams::default()
        };
        let a = synth_growing_graph(&params).unwrap();
        let b = synth_growing_graph(&params).unwrap();
        assert!(a.features().bits_eq(b.features()));
        assert_eq!(a.edges(), b.edges());

        let c = synth_growing_graph(&SynthParams {
            seed: 43,
            ..params
        })
        .unwrap();
        assert!(!a.features().bits_eq(c.features()));
    }

    #[test]
    fn labels_are_blocked_by_class() {
        let source = synth_growing_graph(&SynthParams {
            n_classes: 4,
            nodes_per_class: 5,
            feature_dim: 3,
            intra_p: 0.0,
            inter_p: 0.0,
            class_sep: 1.0,
            seed: 1,
        })
        .unwrap();
        assert_eq!(source.node_count(), 20);
        assert_eq!(source.labels()[0..5], [0, 0, 0, 0, 0]);
        assert_eq!(source.labels()[15..20], [3, 3, 3, 3, 3]);
        assert!(source.edges().is_empty());
    }

    #[test]
    fn edge_counts_track_block_probabilities() {
        let source = synth_growing_graph(&SynthParams {
            n_classes: 2,
            nodes_per_class: 100,
            feature_dim: 2,
            intra_p: 0.2,
            inter_p: 0.01,
            class_sep: 1.0,
            seed: 7,
        })
        .unwrap();
        let (mut intra, mut inter) = (0usize, 0usize);
        for &(u, v) in source.edges() {
            if source.labels()[u] == source.labels()[v] {
                intra += 1;
            } else {
                inter += 1;
            }
        }
        // Expectations: 2 * C(100,2) * 0.2 = 1980 intra, 100*100*0.01 = 100
        // inter; allow ~5 standard deviations.
        assert!(
            (intra as f64 - 1980.0).abs() < 5.0 * (9900.0f64 * 0.2 * 0.8).sqrt(),
            "intra={intra}"
        );
        assert!(
            (inter as f64 - 100.0).abs() < 5.0 * (10_000.0f64 * 0.01 * 0.99).sqrt(),
            "inter={inter}"
        );
    }

    #[test]
    fn too_many_classes_for_the_feature_dim_is_an_error() {
        let params = SynthParams {
            n_classes: 5,
            feature_dim: 2,
            ..SynthParams::default()
        };
        assert!(synth_growing_graph(&params).is_err());
    }

    #[test]
    fn well_separated_two_class_features_are_linearly_separable() {
        // Oracle: a ridge least-squares separator fit on the features alone
        // must reach 99% accuracy when the means are 6 apart per axis.
        let source = synth_growing_graph(&SynthParams {
            n_classes: 2,
            nodes_per_class: 150,
            feature_dim: 4,
            intra_p: 0.0,
            inter_p: 0.0,
            class_sep: 6.0,
            seed: 3,
        })
        .unwrap();
        let n = source.node_count();
        let d = source.feature_dim() + 1; // affine term
        // Normal equations (X^T X + eps I) w = X^T y with y in {-1, +1}.
        let mut xtx = vec![vec![0.0f64; d]; d];
        let mut xty = vec![0.0f64; d];
        for v in 0..n {
            let mut row = source.features().row(v).to_vec();
            row.push(1.0);
            let y = if source.labels()[v] == 0 { -1.0 } else { 1.0 };
            for i in 0..d {
                xty[i] += row[i] * y;
                for j in 0..d {
                    xtx[i][j] += row[i] * row[j];
                }
            }
        }
        for (i, row) in xtx.iter_mut().enumerate() {
            row[i] += 1e-6;
        }
        let w = solve(xtx, xty);
        let mut correct = 0;
        for v in 0..n {
            let mut score = w[d - 1];
            for (i, &x) in source.features().row(v).iter().enumerate() {
                score += w[i] * x;
            }
            let predicted = if score < 0.0 { 0 } else { 1 };
            if predicted == source.labels()[v] {
                correct += 1;
            }
        }
        let acc = correct as f64 / n as f64;
        assert!(acc >= 0.99, "linear separator accuracy {acc}");
    }

    /// Gaussian elimination with partial pivoting, for the tiny oracle system.
    fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, pivot);
            b.swap(col, pivot);
            for row in (col + 1)..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let mut acc = b[row];
            for k in (row + 1)..n {
                acc -= a[row][k] * x[k];
            }
            x[row] = acc / a[row][row];
        }
        x
    }
}
