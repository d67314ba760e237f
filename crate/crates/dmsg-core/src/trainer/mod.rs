//! Task-sequence orchestration: per-task optimization, head extension,
//! buffer maintenance, evaluation, and metric artifacts.
//!
//! Three modes share one loop. `dmsg` trains the combined objective
//! (new-task cross-entropy plus weighted replay losses) and refreshes the
//! memory buffers after each task; `finetune` trains only on the newly
//! arrived nodes; `joint` trains on all training nodes seen so far. The
//! modes collapse into one another in the documented degenerate cases
//! (task 1, or all replay weights zero), bit for bit.

mod batch;
mod config;
mod metrics;
mod run;

pub use batch::{sample_two_hop, SampledSubgraph};
pub use config::{Mode, OptimizerChoice, TrainConfig};
pub use metrics::{aa_af, aa_curve, AccuracyMatrix, ClassW2, ExperimentResult, RunMetrics};
pub use run::{
    build_loss, evaluate, run_sequence, train_task, BoundModel, LossInputs, LossWeights,
    ReplayInputs,
};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::buffer::BufferError;
use crate::graph::GraphError;
use crate::model::{ClassifierHead, GcnParams, ModelError};
use crate::numerics::{NumericsError, Tensor};
use crate::replay::{DiscriminatorParams, VariationalParams};

/// Errors from configuration, training, or artifact handling.
#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("config: {0}")]
    Config(String),
    #[error("config {origin} line {line}: {msg}")]
    ConfigParse {
        origin: String,
        line: usize,
        msg: String,
    },
    #[error("training diverged in task {task}, epoch {epoch}: {msg}")]
    Diverged {
        task: usize,
        epoch: usize,
        msg: String,
    },
    #[error("replay mode needs non-empty buffers at task {task}")]
    EmptyBuffers { task: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// All trainable parameters of one experiment. The twelve tensors have a
/// canonical order (see [`ModelState::tensor_names`]) shared by the
/// optimizer slots, gradient lists, and checkpoint keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub gcn: GcnParams,
    pub head: ClassifierHead,
    pub var: VariationalParams,
    pub disc: DiscriminatorParams,
}

impl ModelState {
    /// Freshly initialized parameters; the head starts with zero classes
    /// and is widened by the task loop. Identical seeds give identical
    /// parameters regardless of the training mode picked later.
    pub fn init(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        ModelState {
            gcn: GcnParams::init(feature_dim, hidden, seed),
            head: ClassifierHead::empty(hidden),
            var: VariationalParams::init(hidden, seed),
            disc: DiscriminatorParams::init(hidden, seed),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.gcn.hidden_dim()
    }

    /// Canonical parameter names, in the canonical order.
    pub fn tensor_names() -> [&'static str; 12] {
        [
            "gcn.w1",
            "gcn.b1",
            "gcn.w2",
            "gcn.b2",
            "head.weight",
            "head.bias",
            "var.w_sigma",
            "var.b_sigma",
            "disc.w1",
            "disc.b1",
            "disc.w2",
            "disc.b2",
        ]
    }

    /// The twelve parameter tensors in canonical order.
    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.gcn.w1,
            &self.gcn.b1,
            &self.gcn.w2,
            &self.gcn.b2,
            &self.head.weight,
            &self.head.bias,
            &self.var.w_sigma,
            &self.var.b_sigma,
            &self.disc.w1,
            &self.disc.b1,
            &self.disc.w2,
            &self.disc.b2,
        ]
    }

    /// Replaces the parameters from a canonical-order list (as produced by
    /// [`ModelState::tensors`] and evolved by the optimizer).
    pub fn write_back(&mut self, tensors: Vec<Tensor>) -> Result<(), TrainerError> {
        if tensors.len() != 12 {
            return Err(TrainerError::Invalid(format!(
                "expected 12 parameter tensors, got {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        self.gcn.w1 = it.next().unwrap();
        self.gcn.b1 = it.next().unwrap();
        self.gcn.w2 = it.next().unwrap();
        self.gcn.b2 = it.next().unwrap();
        self.head.weight = it.next().unwrap();
        self.head.bias = it.next().unwrap();
        self.var.w_sigma = it.next().unwrap();
        self.var.b_sigma = it.next().unwrap();
        self.disc.w1 = it.next().unwrap();
        self.disc.b1 = it.next().unwrap();
        self.disc.w2 = it.next().unwrap();
        self.disc.b2 = it.next().unwrap();
        Ok(())
    }

    /// Named tensors for the checkpoint format.
    pub fn checkpoint_map(&self) -> BTreeMap<String, Tensor> {
        Self::tensor_names()
            .iter()
            .zip(self.tensors())
            .map(|(&name, t)| (name.to_string(), t.clone()))
            .collect()
    }
}
