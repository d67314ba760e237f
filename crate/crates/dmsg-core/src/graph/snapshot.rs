//! Cumulative task snapshots with normalized adjacencies and splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GraphError, GrowingGraphSource, TaskSequence};
use crate::numerics::{SparseMatrix, Tensor};
use crate::seeds::derive_seed_indexed;

/// Which split a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Train/val/test fractions. Must be positive and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, GraphError> {
        let sum = train + val + test;
        if !(train > 0.0 && val >= 0.0 && test > 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(GraphError::Invalid(format!(
                "split ratios must be positive and sum to 1, got {train}/{val}/{test}"
            )));
        }
        Ok(SplitRatios { train, val, test })
    }
}

impl Default for SplitRatios {
    /// The conventional 60/20/20 split.
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Per-class train/val/test node id sets (global ids, ascending within each
/// set), along with the ratios and seed that produced them.
#[derive(Debug, Clone)]
pub struct Split {
    pub ratios: SplitRatios,
    pub seed: u64,
    pub train: BTreeMap<usize, Vec<usize>>,
    pub val: BTreeMap<usize, Vec<usize>>,
    pub test: BTreeMap<usize, Vec<usize>>,
}

/// The graph visible at task `t`: all nodes of classes from tasks `1..=t`,
/// the subgraph they induce, a symmetrically normalized adjacency over local
/// indices, and per-node split tags.
#[derive(Debug, Clone)]
pub struct Snapshot {
    task_index: usize,
    nodes: Vec<usize>,
    features: Tensor,
    labels: Vec<usize>,
    edges: Vec<(usize, usize)>,
    adjacency: SparseMatrix,
    split: Split,
    tags: Vec<SplitTag>,
}

impl Snapshot {
    /// 1-based index of the task this snapshot belongs to.
    pub fn task_index(&self) -> usize {
        self.task_index
    }

    /// Global node ids, ascending; position in this slice is the local index.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Local index of a global node id, if present.
    pub fn local_index(&self, global: usize) -> Option<usize> {
        self.nodes.binary_search(&global).ok()
    }

    /// Features in local row order.
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Class label per local node.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Induced undirected edges as global `(min, max)` pairs, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` over local indices.
    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    /// The per-class split sets (global ids).
    pub fn split(&self) -> &Split {
        &self.split
    }

    /// Split tag per local node.
    pub fn tags(&self) -> &[SplitTag] {
        &self.tags
    }

    /// Local indices of nodes with the given tag whose class is in
    /// `classes`, ascending.
    pub fn nodes_with(&self, tag: SplitTag, classes: &[usize]) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.tags[i] == tag && classes.contains(&self.labels[i]))
            .collect()
    }
}

/// Builds `D^{-1/2} (A + I) D^{-1/2}` for an undirected edge list over
/// `n` nodes. Degrees count the added self-loop, so every entry lies in
/// (0, 1] and an isolated node keeps a diagonal entry of exactly 1.
pub fn normalize_adjacency(
    n: usize,
    edges: &[(usize, usize)],
) -> Result<SparseMatrix, GraphError> {
    let mut degree = vec![1.0f64; n]; // self-loop included
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(GraphError::DanglingReference {
                context: "normalize_adjacency".into(),
                node: u.max(v),
                node_count: n,
            });
        }
        if u == v {
            return Err(GraphError::Invalid(format!("self-loop at node {u}")));
        }
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let mut triplets = Vec::with_capacity(n + 2 * edges.len());
    for i in 0..n {
        triplets.push((i, i, 1.0 / degree[i]));
    }
    for &(u, v) in edges {
        let w = 1.0 / (degree[u] * degree[v]).sqrt();
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    Ok(SparseMatrix::from_triplets(n, n, &triplets)?)
}

/// Slices the snapshot visible at task `t` (1-based) out of the source.
///
/// Splits are stratified per class: each class's nodes are shuffled by a
/// stream derived from `(seed, class)` and cut at the given ratios, with
/// set sizes within one node of the exact fractions. Because a class's node
/// set never changes after it arrives, a node keeps the same tag in every
/// later snapshot.
pub fn snapshot_at(
    source: &GrowingGraphSource,
    seq: &TaskSequence,
    t: usize,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Snapshot, GraphError> {
    if t == 0 || t > seq.len() {
        return Err(GraphError::Invalid(format!(
            "task index {t} out of range 1..={}",
            seq.len()
        )));
    }
    let classes = seq.classes_up_to(t);
    let nodes: Vec<usize> = (0..source.node_count())
        .filter(|&v| classes.contains(&source.labels()[v]))
        .collect();
    if nodes.is_empty() {
        return Err(GraphError::Invalid(format!("snapshot at task {t} is empty")));
    }

    let mut features = Tensor::zeros(nodes.len(), source.feature_dim());
    let mut labels = Vec::with_capacity(nodes.len());
    for (i, &v) in nodes.iter().enumerate() {
        features.row_mut(i).copy_from_slice(source.features().row(v));
        labels.push(source.labels()[v]);
    }

    let edges: Vec<(usize, usize)> = source
        .edges()
        .iter()
        .copied()
        .filter(|&(u, v)| {
            nodes.binary_search(&u).is_ok() && nodes.binary_search(&v).is_ok()
        })
        .collect();
    let local_edges: Vec<(usize, usize)> = edges
        .iter()
        .map(|&(u, v)| {
            (
                nodes.binary_search(&u).unwrap(),
                nodes.binary_search(&v).unwrap(),
            )
        })
        .collect();
    let adjacency = normalize_adjacency(nodes.len(), &local_edges)?;

    let split = split_classes(source, &classes, ratios, seed)?;
    let mut tags = vec![SplitTag::Train; nodes.len()];
    for (i, &v) in nodes.iter().enumerate() {
        let class = source.labels()[v];
        tags[i] = if split.train[&class].binary_search(&v).is_ok() {
            SplitTag::Train
        } else if split.val[&class].binary_search(&v).is_ok() {
            SplitTag::Val
        } else {
            SplitTag::Test
        };
    }

    Ok(Snapshot {
        task_index: t,
        nodes,
        features,
        labels,
        edges,
        adjacency,
        split,
        tags,
    })
}

fn split_classes(
    source: &GrowingGraphSource,
    classes: &[usize],
    ratios: SplitRatios,
    seed: u64,
) -> Result<Split, GraphError> {
    let mut split = Split {
        ratios,
        seed,
        train: BTreeMap::new(),
        val: BTreeMap::new(),
        test: BTreeMap::new(),
    };
    for &class in classes {
        let mut members = source.nodes_of_class(class);
        if members.is_empty() {
            return Err(GraphError::Invalid(format!("class {class} has no nodes")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, "split", class as u64));
        members.shuffle(&mut rng);
        let n = members.len();
        // Cumulative rounding keeps each set within one node of its exact
        // fraction while the three sizes always sum to n.
        let train_end = (n as f64 * ratios.train).round() as usize;
        let val_end = ((n as f64 * (ratios.train + ratios.val)).round() as usize).max(train_end);
        let (mut train, mut val, mut test) = (
            members[..train_end.min(n)].to_vec(),
            members[train_end.min(n)..val_end.min(n)].to_vec(),
            members[val_end.min(n)..].to_vec(),
        );
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        split.train.insert(class, train);
        split.val.insert(class, val);
        split.test.insert(class, test);
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::partition_tasks;

    fn blocked_source(classes: usize, per_class: usize) -> GrowingGraphSource {
        let n = classes * per_class;
        let labels: Vec<usize> = (0..n).map(|v| v / per_class).collect();
        let mut features = Tensor::zeros(n, 3);
        for v in 0..n {
            features.set(v, 0, v as f64);
        }
        // A chain inside each class plus one bridge between consecutive
        // classes, so snapshots have both intra- and cross-task edges.
        let mut edges = Vec::new();
        for v in 0..n - 1 {
            edges.push((v, v + 1));
        }
        GrowingGraphSource::new(features, labels, edges).unwrap()
    }

    #[test]
    fn isolated_node_normalizes_to_one() {
        let adj = normalize_adjacency(1, &[]).unwrap();
        assert_eq!(adj.to_dense().data(), &[1.0]);
    }

    #[test]
    fn two_connected_nodes_normalize_to_half_everywhere() {
        let adj = normalize_adjacency(2, &[(0, 1)]).unwrap();
        assert_eq!(adj.to_dense().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn path_off_diagonal_is_one_over_sqrt_six() {
        let adj = normalize_adjacency(3, &[(0, 1), (1, 2)]).unwrap();
        let dense = adj.to_dense();
        assert!((dense.at(0, 1) - 1.0 / 6.0f64.sqrt()).abs() < 1e-15);
        assert!((dense.at(1, 0) - 1.0 / 6.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn entries_are_positive_and_at_most_one() {
        let adj = normalize_adjacency(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        for r in 0..4 {
            for (_, v) in adj.row_entries(r) {
                assert!(v > 0.0 && v <= 1.0);
            }
        }
    }

    #[test]
    fn snapshots_grow_cumulatively() {
        let source = blocked_source(6, 10);
        let order: Vec<usize> = (0..6).collect();
        let seq = partition_tasks(&source, &order, 2).unwrap();
        let ratios = SplitRatios::default();
        let s1 = snapshot_at(&source, &seq, 1, ratios, 9).unwrap();
        let s2 = snapshot_at(&source, &seq, 2, ratios, 9).unwrap();
        let s3 = snapshot_at(&source, &seq, 3, ratios, 9).unwrap();
        assert_eq!(s1.nodes().len(), 20);
        assert_eq!(s2.nodes().len(), 40);
        assert_eq!(s3.nodes().len(), 60);
        for v in s1.nodes() {
            assert!(s2.local_index(*v).is_some());
        }
        for e in s1.edges() {
            assert!(s2.edges().contains(e));
        }
        for e in s2.edges() {
            assert!(s3.edges().contains(e));
        }
    }

    #[test]
    fn splits_partition_each_class_at_the_ratios() {
        let source = blocked_source(2, 100);
        let seq = partition_tasks(&source, &[0, 1], 2).unwrap();
        let snap = snapshot_at(&source, &seq, 1, SplitRatios::default(), 3).unwrap();
        for class in [0usize, 1] {
            let split = snap.split();
            assert_eq!(split.train[&class].len(), 60);
            assert_eq!(split.val[&class].len(), 20);
            assert_eq!(split.test[&class].len(), 20);
            // The three sets are disjoint and cover the class.
            let mut all: Vec<usize> = split.train[&class]
                .iter()
                .chain(&split.val[&class])
                .chain(&split.test[&class])
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, source.nodes_of_class(class));
        }
    }

    #[test]
    fn split_sizes_stay_within_one_node_of_exact() {
        // 7 nodes at 60/20/20: sizes must be within +-1 of 4.2/1.4/1.4.
        let source = blocked_source(1, 7);
        let seq = partition_tasks(&source, &[0], 1).unwrap();
        let snap = snapshot_at(&source, &seq, 1, SplitRatios::default(), 11).unwrap();
        let split = snap.split();
        let sizes = (
            split.train[&0].len(),
            split.val[&0].len(),
            split.test[&0].len(),
        );
        assert_eq!(sizes.0 + sizes.1 + sizes.2, 7);
        assert!((sizes.0 as f64 - 4.2).abs() <= 1.0);
        assert!((sizes.1 as f64 - 1.4).abs() <= 1.0);
        assert!((sizes.2 as f64 - 1.4).abs() <= 1.0);
    }

    #[test]
    fn same_seed_same_split_different_seed_same_sizes() {
        let source = blocked_source(2, 50);
        let seq = partition_tasks(&source, &[0, 1], 2).unwrap();
        let a = snapshot_at(&source, &seq, 1, SplitRatios::default(), 5).unwrap();
        let b = snapshot_at(&source, &seq, 1, SplitRatios::default(), 5).unwrap();
        let c = snapshot_at(&source, &seq, 1, SplitRatios::default(), 6).unwrap();
        assert_eq!(a.split().train, b.split().train);
        assert_eq!(a.split().train[&0].len(), c.split().train[&0].len());
        assert_ne!(a.split().train, c.split().train);
    }

    #[test]
    fn tags_are_stable_across_snapshots() {
        let source = blocked_source(4, 25);
        let order: Vec<usize> = (0..4).collect();
        let seq = partition_tasks(&source, &order, 2).unwrap();
        let s1 = snapshot_at(&source, &seq, 1, SplitRatios::default(), 21).unwrap();
        let s2 = snapshot_at(&source, &seq, 2, SplitRatios::default(), 21).unwrap();
        for (i, &v) in s1.nodes().iter().enumerate() {
            let j = s2.local_index(v).unwrap();
            assert_eq!(s1.tags()[i], s2.tags()[j]);
        }
    }

    #[test]
    fn out_of_range_task_index_is_an_error() {
        let source = blocked_source(2, 10);
        let seq = partition_tasks(&source, &[0, 1], 2).unwrap();
        assert!(snapshot_at(&source, &seq, 0, SplitRatios::default(), 1).is_err());
        assert!(snapshot_at(&source, &seq, 2, SplitRatios::default(), 1).is_err());
    }
}
