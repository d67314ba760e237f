//! Growing graphs, class-incremental task sequences, and snapshots.
//!
//! A [`GrowingGraphSource`] is the full graph with features and labels. A
//! [`TaskSequence`] partitions its classes into consecutive tasks; the
//! snapshot at task `t` contains every node whose class belongs to tasks
//! `1..=t`, the subgraph they induce, a symmetrically normalized adjacency,
//! and deterministic per-class train/val/test splits. Snapshots grow
//! monotonically: nodes and edges present at `t` are present at `t+1`.

mod io;
mod snapshot;
mod source;
mod synth;

pub use io::{load_graph, parse_edges, parse_features, parse_labels, save_graph};
pub use snapshot::{normalize_adjacency, snapshot_at, Snapshot, Split, SplitRatios, SplitTag};
pub use source::{partition_tasks, GrowingGraphSource, TaskSequence};
pub use synth::{synth_growing_graph, SynthParams};

use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::NumericsError;

/// Errors from loading, validating, or slicing graphs.
#[derive(Debug, Error)]
pub enum GraphError {
    /// A dataset file that must exist does not.
    #[error("missing dataset file: {0}")]
    MissingFile(PathBuf),
    /// Underlying I/O failure other than a missing file.
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A malformed line in one of the TSV files.
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    /// A node id referenced outside the node set.
    #[error("{context}: dangling reference to node {node} (node count {node_count})")]
    DanglingReference {
        context: String,
        node: usize,
        node_count: usize,
    },
    /// Structural validation failure (duplicate edges, missing labels, ...).
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
