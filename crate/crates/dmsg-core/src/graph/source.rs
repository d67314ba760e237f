//! The full growing graph and its partition into class-incremental tasks.

use super::GraphError;
use crate::numerics::Tensor;

/// An undirected graph with dense node features and one class label per
/// node. Node ids are `0..node_count`; edges are stored canonically as
/// `(min, max)` pairs, sorted, without duplicates or self-loops.
#[derive(Debug, Clone)]
pub struct GrowingGraphSource {
    features: Tensor,
    labels: Vec<usize>,
    edges: Vec<(usize, usize)>,
    classes: Vec<usize>,
}

impl GrowingGraphSource {
    /// Validates and assembles a source graph. Edges may be given in either
    /// orientation; duplicates (in any orientation) and self-loops are
    /// rejected, as are endpoints outside `0..features.rows()`.
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        edges: Vec<(usize, usize)>,
    ) -> Result<Self, GraphError> {
        let n = features.rows();
        if labels.len() != n {
            return Err(GraphError::Invalid(format!(
                "{} labels for {} nodes",
                labels.len(),
                n
            )));
        }
        if n == 0 {
            return Err(GraphError::Invalid("graph has no nodes".into()));
        }
        let mut canon: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(u, v) in &edges {
            for node in [u, v] {
                if node >= n {
                    return Err(GraphError::DanglingReference {
                        context: "edge list".into(),
                        node,
                        node_count: n,
                    });
                }
            }
            if u == v {
                return Err(GraphError::Invalid(format!("self-loop at node {u}")));
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        if let Some(dup) = canon.windows(2).find(|w| w[0] == w[1]) {
            return Err(GraphError::Invalid(format!(
                "duplicate undirected edge ({}, {})",
                dup[0].0, dup[0].1
            )));
        }
        let mut classes: Vec<usize> = labels.clone();
        classes.sort_unstable();
        classes.dedup();
        Ok(GrowingGraphSource {
            features,
            labels,
            edges: canon,
            classes,
        })
    }

    pub fn node_count(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Node features, `node_count x feature_dim`.
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Class label of each node.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Canonical `(min, max)` undirected edges, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Distinct class ids, ascending.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// All node ids of one class, ascending.
    pub fn nodes_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&v| self.labels[v] == class)
            .collect()
    }
}

/// A partition of the class set into consecutive tasks of
/// `classes_per_task` classes each (the last task may be smaller).
#[derive(Debug, Clone)]
pub struct TaskSequence {
    tasks: Vec<Vec<usize>>,
    class_order: Vec<usize>,
}

impl TaskSequence {
    /// Number of tasks.
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Classes of task `t` (1-based).
    pub fn task_classes(&self, t: usize) -> &[usize] {
        &self.tasks[t - 1]
    }

    /// Classes of tasks `1..=t`, in arrival order.
    pub fn classes_up_to(&self, t: usize) -> Vec<usize> {
        self.tasks[..t].iter().flatten().copied().collect()
    }

    /// The full class arrival order.
    pub fn class_order(&self) -> &[usize] {
        &self.class_order
    }

    /// Classifier column assigned to a class: its position in the arrival
    /// order. Columns are allocated task by task, so they never move once
    /// assigned.
    pub fn column_of(&self, class: usize) -> Option<usize> {
        self.class_order.iter().position(|&c| c == class)
    }
}

/// Splits the classes of `source` into tasks of `classes_per_task` classes,
/// following `class_order`. Produces `ceil(C / classes_per_task)` tasks.
///
/// `class_order` must be a permutation of the source's class set, and
/// `classes_per_task` must be between 1 and the number of classes.
pub fn partition_tasks(
    source: &GrowingGraphSource,
    class_order: &[usize],
    classes_per_task: usize,
) -> Result<TaskSequence, GraphError> {
    let c = source.classes().len();
    if classes_per_task == 0 {
        return Err(GraphError::Invalid("classes_per_task must be >= 1".into()));
    }
    if classes_per_task > c {
        return Err(GraphError::Invalid(format!(
            "classes_per_task {classes_per_task} exceeds class count {c}"
        )));
    }
    let mut sorted = class_order.to_vec();
    sorted.sort_unstable();
    if sorted != source.classes() {
        return Err(GraphError::Invalid(
            "class_order is not a permutation of the source classes".into(),
        ));
    }
    let tasks: Vec<Vec<usize>> = class_order
        .chunks(classes_per_task)
        .map(|chunk| chunk.to_vec())
        .collect();
    Ok(TaskSequence {
        tasks,
        class_order: class_order.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_source(labels: Vec<usize>, edges: Vec<(usize, usize)>) -> GrowingGraphSource {
        let n = labels.len();
        let features = Tensor::zeros(n, 2);
        GrowingGraphSource::new(features, labels, edges).unwrap()
    }

    #[test]
    fn rejects_dangling_edges_self_loops_and_duplicates() {
        let features = Tensor::zeros(3, 2);
        assert!(matches!(
            GrowingGraphSource::new(features.clone(), vec![0, 0, 1], vec![(0, 3)]),
            Err(GraphError::DanglingReference { node: 3, .. })
        ));
        assert!(GrowingGraphSource::new(features.clone(), vec![0, 0, 1], vec![(1, 1)]).is_err());
        // Same edge in both orientations is a duplicate.
        assert!(
            GrowingGraphSource::new(features, vec![0, 0, 1], vec![(0, 1), (1, 0)]).is_err()
        );
    }

    #[test]
    fn seventy_classes_in_pairs_make_thirty_five_tasks() {
        let labels: Vec<usize> = (0..70).flat_map(|c| [c, c]).collect();
        let source = tiny_source(labels, vec![]);
        let order: Vec<usize> = (0..70).collect();
        let seq = partition_tasks(&source, &order, 2).unwrap();
        assert_eq!(seq.len(), 35);
        assert_eq!(seq.task_classes(1), &[0, 1]);
        assert_eq!(seq.task_classes(35), &[68, 69]);
    }

    #[test]
    fn uneven_class_count_rounds_up() {
        let source = tiny_source(vec![0, 1, 2, 3, 4], vec![]);
        let seq = partition_tasks(&source, &[0, 1, 2, 3, 4], 2).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.task_classes(3), &[4]);
    }

    #[test]
    fn k_larger_than_class_count_is_an_error() {
        let source = tiny_source(vec![0, 1], vec![]);
        assert!(partition_tasks(&source, &[0, 1], 3).is_err());
        assert!(partition_tasks(&source, &[0, 1], 0).is_err());
    }

    #[test]
    fn class_order_must_be_a_permutation() {
        let source = tiny_source(vec![0, 1, 2], vec![]);
        assert!(partition_tasks(&source, &[0, 1], 1).is_err());
        assert!(partition_tasks(&source, &[0, 1, 1], 1).is_err());
        let seq = partition_tasks(&source, &[2, 0, 1], 1).unwrap();
        assert_eq!(seq.column_of(2), Some(0));
        assert_eq!(seq.column_of(1), Some(2));
    }
}
