//! Loss assembly, per-task optimization, evaluation, and the task loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::batch::{neighbor_lists, sample_two_hop};
use super::{
    aa_af, AccuracyMatrix, ClassW2, ExperimentResult, Mode, ModelState, RunMetrics, TrainConfig,
    TrainerError,
};
use crate::buffer::{buffer_w2_diagnostic, greedy_select, MemoryBuffers, NodeProbabilities};
use crate::graph::{
    partition_tasks, snapshot_at, GrowingGraphSource, Snapshot, SplitTag, TaskSequence,
};
use crate::model::{
    classify, encode, extend_head, forward_probs, save_checkpoint, BoundGcn, BoundHead,
};
use crate::numerics::{
    DiffGraph, NodeId, NumericsError, OptimizerState, SparseMatrix, Tensor,
};
use crate::replay::{
    cgse_loss, mise_loss, replay_prediction_loss, variational_sample, BoundDiscriminator,
    BoundVariational,
};
use crate::seeds::derive_seed_indexed;

/// Weights of the combined objective's terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_new: f64,
    pub lambda_rp: f64,
    pub lambda_mise: f64,
    pub lambda_cgse: f64,
}

impl LossWeights {
    pub fn of(cfg: &TrainConfig) -> LossWeights {
        LossWeights {
            w_new: cfg.w_new,
            lambda_rp: cfg.lambda_rp,
            lambda_mise: cfg.lambda_mise,
            lambda_cgse: cfg.lambda_cgse,
        }
    }

    fn any_replay(&self) -> bool {
        self.lambda_rp > 0.0 || self.lambda_mise > 0.0 || self.lambda_cgse > 0.0
    }
}

/// Replay-side inputs of one training step.
#[derive(Debug)]
pub struct ReplayInputs<'a> {
    /// Rows of the step's feature matrix holding the buffered nodes.
    pub rows: &'a [usize],
    /// Their class ids (same-label pair targets).
    pub classes: &'a [usize],
    /// Their head columns (replayed cross-entropy targets).
    pub targets: &'a [usize],
    /// Standard-normal noise, one row per buffered node.
    pub eps: &'a Tensor,
}

/// Everything one training step's loss depends on.
#[derive(Debug)]
pub struct LossInputs<'a> {
    pub adjacency: Rc<SparseMatrix>,
    /// Node features, rows matching the adjacency.
    pub features: &'a Tensor,
    /// Feature-matrix rows of the new-task training nodes.
    pub new_rows: &'a [usize],
    /// Their head columns.
    pub new_targets: &'a [usize],
    pub replay: Option<ReplayInputs<'a>>,
    pub weights: LossWeights,
}

/// Tape handles for the full parameter set, in canonical order.
#[derive(Debug, Clone, Copy)]
pub struct BoundModel {
    pub gcn: BoundGcn,
    pub head: BoundHead,
    pub var: BoundVariational,
    pub disc: BoundDiscriminator,
}

impl BoundModel {
    /// Registers twelve canonical-order tensors as gradient leaves.
    pub fn bind(g: &mut DiffGraph, params: &[Tensor]) -> Result<BoundModel, NumericsError> {
        let ids: Vec<NodeId> = params
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<_, _>>()?;
        Self::from_ids(&ids)
    }

    /// Wraps already-registered leaves (e.g. inside a gradient check).
    pub fn from_ids(ids: &[NodeId]) -> Result<BoundModel, NumericsError> {
        if ids.len() != 12 {
            return Err(NumericsError::invalid(
                "bind_model",
                format!("expected 12 parameter leaves, got {}", ids.len()),
            ));
        }
        Ok(BoundModel {
            gcn: BoundGcn {
                w1: ids[0],
                b1: ids[1],
                w2: ids[2],
                b2: ids[3],
            },
            head: BoundHead {
                weight: ids[4],
                bias: ids[5],
            },
            var: BoundVariational {
                w_sigma: ids[6],
                b_sigma: ids[7],
            },
            disc: BoundDiscriminator {
                w1: ids[8],
                b1: ids[9],
                w2: ids[10],
                b2: ids[11],
            },
        })
    }

    pub fn ids(&self) -> [NodeId; 12] {
        [
            self.gcn.w1,
            self.gcn.b1,
            self.gcn.w2,
            self.gcn.b2,
            self.head.weight,
            self.head.bias,
            self.var.w_sigma,
            self.var.b_sigma,
            self.disc.w1,
            self.disc.b1,
            self.disc.w2,
            self.disc.b2,
        ]
    }
}

/// Assembles the combined objective on the tape:
///
/// `w_new * CE(new nodes) + l_rp * RP + l_mise * MISE + l_cgse * CGSE`
///
/// Zero-weight terms are left off the tape entirely, so a configuration
/// with all replay weights zero builds exactly the tape plain fine-tuning
/// builds, and produces bit-identical gradients. `reverse` controls the
/// adversarial term's gradient-reversal markers; disable it only for
/// finite-difference validation, which can only see true derivatives.
pub fn build_loss(
    g: &mut DiffGraph,
    bound: &BoundModel,
    inputs: &LossInputs<'_>,
    reverse: bool,
    dropout_mask: Option<&Tensor>,
) -> Result<NodeId, NumericsError> {
    let x = g.constant(inputs.features.clone())?;
    let mask = match dropout_mask {
        Some(m) => Some(g.constant(m.clone())?),
        None => None,
    };
    let z_all = encode(g, &inputs.adjacency, x, &bound.gcn, mask)?;

    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    if inputs.weights.w_new > 0.0 {
        let z_new = g.gather_rows(z_all, inputs.new_rows.to_vec())?;
        let logits = classify(g, z_new, &bound.head)?;
        let ce = g.softmax_cross_entropy(logits, inputs.new_targets)?;
        terms.push((ce, inputs.weights.w_new));
    }
    if let Some(rep) = &inputs.replay {
        let w = inputs.weights;
        if w.any_replay() {
            let z_buf = g.gather_rows(z_all, rep.rows.to_vec())?;
            let eps = g.constant(rep.eps.clone())?;
            let (sigma, zhat) = variational_sample(g, z_buf, &bound.var, eps)?;
            if w.lambda_rp > 0.0 {
                let rp = replay_prediction_loss(g, zhat, &bound.head, rep.targets)?;
                terms.push((rp, w.lambda_rp));
            }
            if w.lambda_mise > 0.0 {
                let mise = mise_loss(g, z_buf, zhat, &bound.disc, reverse)?;
                terms.push((mise, w.lambda_mise));
            }
            if w.lambda_cgse > 0.0 {
                let cgse = cgse_loss(g, zhat, z_buf, sigma, rep.classes)?;
                terms.push((cgse, w.lambda_cgse));
            }
        }
    }
    if terms.is_empty() {
        return Err(NumericsError::invalid(
            "build_loss",
            "every loss term has zero weight",
        ));
    }
    let mut acc: Option<NodeId> = None;
    for (node, w) in terms {
        let scaled = if w == 1.0 { node } else { g.affine(node, w, 0.0)? };
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.expect("at least one term"))
}

/// Buffered-node bookkeeping resolved against one snapshot.
struct ReplayPlan {
    rows: Vec<usize>,
    classes: Vec<usize>,
    targets: Vec<usize>,
}

/// Independent RNG stream per (component, task, epoch, step).
fn stream(seed: u64, label: &str, task: usize, epoch: usize, step: usize) -> u64 {
    let a = derive_seed_indexed(seed, label, task as u64);
    let b = derive_seed_indexed(a, "epoch", epoch as u64);
    derive_seed_indexed(b, "step", step as u64)
}

fn draw_eps(seed: u64, task: usize, epoch: usize, step: usize, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(stream(seed, "train.eps", task, epoch, step));
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    t
}

/// Inverted-dropout mask over the hidden activations, or `None` when off.
fn draw_dropout(
    cfg: &TrainConfig,
    rows: usize,
    hidden: usize,
    task: usize,
    epoch: usize,
    step: usize,
) -> Option<Tensor> {
    if cfg.dropout == 0.0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, "train.dropout", task, epoch, step));
    let keep = 1.0 - cfg.dropout;
    let mut t = Tensor::zeros(rows, hidden);
    for v in t.data_mut() {
        *v = if rng.random::<f64>() < cfg.dropout {
            0.0
        } else {
            1.0 / keep
        };
    }
    Some(t)
}

/// One optimizer update from one freshly built tape.
fn step_once(
    params: &mut [Tensor],
    optimizer: &mut OptimizerState,
    inputs: &LossInputs<'_>,
    dropout_mask: Option<&Tensor>,
) -> Result<f64, TrainerError> {
    let mut g = DiffGraph::new();
    let bound = BoundModel::bind(&mut g, params)?;
    let loss = build_loss(&mut g, &bound, inputs, true, dropout_mask)?;
    let grads = g.grad(loss, &bound.ids())?;
    let value = g.value(loss).item();
    optimizer.step(params, &grads)?;
    Ok(value)
}

/// Buffer nodes drawn per mini-batch step. With no explicit size the
/// population-ratio contract applies: new batch : buffer batch equals
/// new training nodes : buffer nodes, rounded (at least one).
pub(crate) fn buffer_batch_size(
    batch_new: usize,
    explicit: usize,
    n_new: usize,
    n_buffer: usize,
) -> usize {
    if n_buffer == 0 {
        return 0;
    }
    let derived = if explicit > 0 {
        explicit
    } else {
        let exact = batch_new as f64 * n_buffer as f64 / n_new as f64;
        (exact.round() as usize).max(1)
    };
    derived.min(n_buffer)
}

fn mini_batch_epoch(
    params: &mut [Tensor],
    optimizer: &mut OptimizerState,
    snapshot: &Snapshot,
    neighbors: &[Vec<usize>],
    train_rows: &[usize],
    train_targets: &[usize],
    plan: Option<&ReplayPlan>,
    weights: LossWeights,
    hidden: usize,
    cfg: &TrainConfig,
    task: usize,
    epoch: usize,
) -> Result<f64, TrainerError> {
    let mut order: Vec<usize> = (0..train_rows.len()).collect();
    let mut shuffle_rng =
        ChaCha8Rng::seed_from_u64(stream(cfg.seed, "train.batch", task, epoch, 0));
    order.shuffle(&mut shuffle_rng);
    let bn = cfg.batch_new.min(train_rows.len());
    let steps = train_rows.len().div_ceil(bn);
    let n_buffer = plan.map_or(0, |p| p.rows.len());

    let mut last = 0.0;
    for step in 0..steps {
        let chunk = &order[step * bn..((step + 1) * bn).min(order.len())];
        let mut new_rows: Vec<usize> = chunk.iter().map(|&i| train_rows[i]).collect();
        let mut new_targets: Vec<usize> = chunk.iter().map(|&i| train_targets[i]).collect();
        // Keep ascending row order so the tape layout is reproducible.
        let mut paired: Vec<(usize, usize)> =
            new_rows.drain(..).zip(new_targets.drain(..)).collect();
        paired.sort_unstable();
        new_rows = paired.iter().map(|&(r, _)| r).collect();
        new_targets = paired.iter().map(|&(_, t)| t).collect();

        // Buffer-side sample for this step.
        let mut buf_rows = Vec::new();
        let mut buf_classes = Vec::new();
        let mut buf_targets = Vec::new();
        if let Some(p) = plan {
            let bb = buffer_batch_size(cfg.batch_new, cfg.batch_buffer, train_rows.len(), n_buffer);
            let mut idx: Vec<usize> = (0..n_buffer).collect();
            let mut buf_rng = ChaCha8Rng::seed_from_u64(stream(
                cfg.seed,
                "train.buffer_batch",
                task,
                epoch,
                step,
            ));
            idx.shuffle(&mut buf_rng);
            idx.truncate(bb);
            idx.sort_unstable();
            for i in idx {
                buf_rows.push(p.rows[i]);
                buf_classes.push(p.classes[i]);
                buf_targets.push(p.targets[i]);
            }
        }

        // Two-hop neighborhood around all seed nodes.
        let mut seeds: Vec<usize> = new_rows.iter().chain(buf_rows.iter()).copied().collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut hop_rng =
            ChaCha8Rng::seed_from_u64(stream(cfg.seed, "train.fanout", task, epoch, step));
        let sub = sample_two_hop(neighbors, &seeds, cfg.fanout, &mut hop_rng)?;

        let feature_rows: Vec<Vec<f64>> = sub
            .nodes
            .iter()
            .map(|&i| snapshot.features().row(i).to_vec())
            .collect();
        let features = Tensor::from_rows(&feature_rows)?;
        let remap = |rows: &[usize]| -> Vec<usize> {
            rows.iter()
                .map(|&r| sub.row_of(r).expect("seed kept in its own subgraph"))
                .collect()
        };
        let new_rows_sub = remap(&new_rows);
        let buf_rows_sub = remap(&buf_rows);

        let eps;
        let replay_inputs = if buf_rows_sub.is_empty() {
            None
        } else {
            eps = draw_eps(cfg.seed, task, epoch, step, buf_rows_sub.len(), hidden);
            Some(ReplayInputs {
                rows: &buf_rows_sub,
                classes: &buf_classes,
                targets: &buf_targets,
                eps: &eps,
            })
        };
        let dropout = draw_dropout(cfg, sub.nodes.len(), hidden, task, epoch, step);
        let inputs = LossInputs {
            adjacency: Rc::new(sub.adjacency.clone()),
            features: &features,
            new_rows: &new_rows_sub,
            new_targets: &new_targets,
            replay: replay_inputs,
            weights,
        };
        last = step_once(params, optimizer, &inputs, dropout.as_ref())?;
    }
    Ok(last)
}

/// Optimizes one task for `cfg.epochs` epochs and writes the updated
/// parameters back into `state`. Returns the last step's loss value.
///
/// The head must already be extended to cover the task's classes. In the
/// replay mode, tasks after the first require non-empty buffers. A
/// non-finite value anywhere in the computation aborts with a divergence
/// error naming the task and epoch.
pub fn train_task(
    state: &mut ModelState,
    snapshot: &Snapshot,
    seq: &TaskSequence,
    task: usize,
    buffers: &MemoryBuffers,
    cfg: &TrainConfig,
) -> Result<f64, TrainerError> {
    cfg.validate()?;
    if task == 0 || task > seq.len() {
        return Err(TrainerError::Invalid(format!(
            "task {task} outside the sequence of {}",
            seq.len()
        )));
    }
    if snapshot.task_index() != task {
        return Err(TrainerError::Invalid(format!(
            "snapshot belongs to task {}, not {task}",
            snapshot.task_index()
        )));
    }
    let seen = seq.classes_up_to(task);
    if state.head.out_dim() != seen.len() {
        return Err(TrainerError::Invalid(format!(
            "head covers {} classes but task {task} needs {}",
            state.head.out_dim(),
            seen.len()
        )));
    }

    let class_pool: &[usize] = match cfg.mode {
        Mode::Joint => &seen,
        _ => seq.task_classes(task),
    };
    let train_rows = snapshot.nodes_with(SplitTag::Train, class_pool);
    if train_rows.is_empty() {
        return Err(TrainerError::Invalid(format!(
            "task {task} has no training nodes"
        )));
    }
    let column = |class: usize| -> Result<usize, TrainerError> {
        seq.column_of(class)
            .ok_or_else(|| TrainerError::Invalid(format!("class {class} not in the sequence")))
    };
    let train_targets: Vec<usize> = train_rows
        .iter()
        .map(|&i| column(snapshot.labels()[i]))
        .collect::<Result<_, _>>()?;

    let replay_mode = cfg.mode == Mode::Dmsg && task > 1;
    if replay_mode && buffers.is_empty() {
        return Err(TrainerError::EmptyBuffers { task });
    }
    let weights = LossWeights::of(cfg);
    let plan: Option<ReplayPlan> = if replay_mode && weights.any_replay() {
        let mut rows = Vec::with_capacity(buffers.len());
        let mut classes = Vec::with_capacity(buffers.len());
        let mut targets = Vec::with_capacity(buffers.len());
        for (node, class) in buffers.labeled_nodes() {
            let local = snapshot.local_index(node).ok_or_else(|| {
                TrainerError::Invalid(format!("buffered node {node} is not in snapshot {task}"))
            })?;
            rows.push(local);
            classes.push(class);
            targets.push(column(class)?);
        }
        Some(ReplayPlan {
            rows,
            classes,
            targets,
        })
    } else {
        None
    };

    let adjacency = Rc::new(snapshot.adjacency().clone());
    let neighbors = if cfg.batch_new > 0 {
        neighbor_lists(
            snapshot.nodes().len(),
            &snapshot
                .edges()
                .iter()
                .map(|&(u, v)| {
                    (
                        snapshot.local_index(u).expect("own edge endpoint"),
                        snapshot.local_index(v).expect("own edge endpoint"),
                    )
                })
                .collect::<Vec<_>>(),
        )
    } else {
        Vec::new()
    };

    let hidden = state.hidden_dim();
    let mut params: Vec<Tensor> = state.tensors().iter().map(|&t| t.clone()).collect();
    let shapes: Vec<(usize, usize)> = params.iter().map(|t| t.shape()).collect();
    let mut optimizer = OptimizerState::new(
        cfg.optimizer.kind(),
        cfg.learning_rate,
        cfg.weight_decay,
        &shapes,
    );

    let mut last = 0.0;
    for epoch in 0..cfg.epochs {
        let outcome = if cfg.batch_new == 0 {
            let eps;
            let replay_inputs = match &plan {
                Some(p) => {
                    eps = draw_eps(cfg.seed, task, epoch, 0, p.rows.len(), hidden);
                    Some(ReplayInputs {
                        rows: &p.rows,
                        classes: &p.classes,
                        targets: &p.targets,
                        eps: &eps,
                    })
                }
                None => None,
            };
            let dropout = draw_dropout(cfg, snapshot.nodes().len(), hidden, task, epoch, 0);
            let inputs = LossInputs {
                adjacency: Rc::clone(&adjacency),
                features: snapshot.features(),
                new_rows: &train_rows,
                new_targets: &train_targets,
                replay: replay_inputs,
                weights,
            };
            step_once(&mut params, &mut optimizer, &inputs, dropout.as_ref())
        } else {
            mini_batch_epoch(
                &mut params,
                &mut optimizer,
                snapshot,
                &neighbors,
                &train_rows,
                &train_targets,
                plan.as_ref(),
                weights,
                hidden,
                cfg,
                task,
                epoch,
            )
        };
        last = match outcome {
            Ok(v) => v,
            Err(TrainerError::Numerics(NumericsError::NonFinite { op })) => {
                return Err(TrainerError::Diverged {
                    task,
                    epoch,
                    msg: format!("non-finite value produced by {op}"),
                });
            }
            Err(e) => return Err(e),
        };
    }
    state.write_back(params)?;
    Ok(last)
}

/// First index of the row maximum (ties resolve to the lowest index).
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Test accuracy on every task `1..=upto`, measured on `snapshot` with
/// predictions over all classes seen so far. Entry `j-1` is task `j`'s
/// accuracy.
pub fn evaluate(
    state: &ModelState,
    snapshot: &Snapshot,
    seq: &TaskSequence,
    upto: usize,
) -> Result<Vec<f64>, TrainerError> {
    if upto == 0 || upto > seq.len() {
        return Err(TrainerError::Invalid(format!(
            "cannot evaluate through task {upto} of {}",
            seq.len()
        )));
    }
    if state.head.out_dim() != seq.classes_up_to(upto).len() {
        return Err(TrainerError::Invalid(format!(
            "head covers {} classes but tasks 1..={upto} have {}",
            state.head.out_dim(),
            seq.classes_up_to(upto).len()
        )));
    }
    let adjacency = Rc::new(snapshot.adjacency().clone());
    let (_, probs) = forward_probs(&adjacency, snapshot.features(), &state.gcn, &state.head)?;
    let labels = snapshot.labels();
    let mut row = Vec::with_capacity(upto);
    for j in 1..=upto {
        let test = snapshot.nodes_with(SplitTag::Test, seq.task_classes(j));
        if test.is_empty() {
            return Err(TrainerError::Invalid(format!(
                "task {j} has no test nodes in snapshot {}",
                snapshot.task_index()
            )));
        }
        let mut correct = 0usize;
        for &i in &test {
            let target = seq
                .column_of(labels[i])
                .ok_or_else(|| TrainerError::Invalid(format!("class {} unmapped", labels[i])))?;
            if argmax(probs.row(i)) == target {
                correct += 1;
            }
        }
        row.push(correct as f64 / test.len() as f64);
    }
    Ok(row)
}

#[derive(Serialize)]
struct BufferTaskDoc<'a> {
    task: usize,
    classes: BTreeMap<usize, &'a [usize]>,
}

#[derive(Serialize)]
struct BuffersDoc<'a> {
    capacity: usize,
    tasks: Vec<BufferTaskDoc<'a>>,
}

/// Runs the whole task sequence: per task, extend the head, train, refresh
/// the memory buffers (replay mode only), record diagnostics, and evaluate.
/// With an output directory, writes `accuracy_matrix.csv`, `metrics.json`,
/// `buffers.json`, and (if configured) a parameter checkpoint per task.
pub fn run_sequence(
    cfg: &TrainConfig,
    source: &GrowingGraphSource,
    out_dir: Option<&Path>,
) -> Result<ExperimentResult, TrainerError> {
    cfg.validate()?;
    let seq = partition_tasks(source, source.classes(), cfg.classes_per_task)?;
    let ratios = cfg.split_ratios()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut state = ModelState::init(source.feature_dim(), cfg.hidden_dim, cfg.seed);
    let mut buffers = MemoryBuffers::new(cfg.buffer_capacity);
    let mut matrix = AccuracyMatrix::new();
    let mut per_task_seconds = Vec::new();
    let mut w2_diagnostics: Vec<Vec<ClassW2>> = Vec::new();
    let mut buffer_history: Vec<MemoryBuffers> = Vec::new();

    for task in 1..=seq.len() {
        let started = Instant::now();
        let snapshot = snapshot_at(source, &seq, task, ratios, cfg.seed)?;
        let novel = seq.task_classes(task);
        state.head = extend_head(
            &state.head,
            novel.len(),
            cfg.init_scale,
            derive_seed_indexed(cfg.seed, "head.extend", task as u64),
        )?;

        train_task(&mut state, &snapshot, &seq, task, &buffers, cfg)?;

        let mut task_w2 = Vec::new();
        if cfg.mode == Mode::Dmsg {
            let adjacency = Rc::new(snapshot.adjacency().clone());
            let (z, probs) =
                forward_probs(&adjacency, snapshot.features(), &state.gcn, &state.head)?;
            let node_probs = NodeProbabilities::new(probs, snapshot.nodes())?;
            let mut candidates = BTreeMap::new();
            let mut columns = BTreeMap::new();
            for &class in novel {
                let rows = snapshot.nodes_with(SplitTag::Train, &[class]);
                let globals: Vec<usize> = rows.iter().map(|&i| snapshot.nodes()[i]).collect();
                if globals.is_empty() {
                    return Err(TrainerError::Invalid(format!(
                        "class {class} has no training nodes to buffer"
                    )));
                }
                candidates.insert(class, globals);
                columns.insert(
                    class,
                    seq.column_of(class)
                        .ok_or_else(|| TrainerError::Invalid(format!("class {class} unmapped")))?,
                );
            }
            buffers = greedy_select(
                &buffers,
                &candidates,
                &columns,
                &node_probs,
                cfg.buffer_capacity,
            )?;

            // How well each buffer's spread matches its class's, in the
            // current embedding space.
            for (class, members) in buffers.iter() {
                let class_rows = snapshot.nodes_with(SplitTag::Train, &[class]);
                let class_emb: Vec<Vec<f64>> =
                    class_rows.iter().map(|&i| z.row(i).to_vec()).collect();
                let member_emb: Vec<Vec<f64>> = members
                    .iter()
                    .map(|&node| {
                        let local = snapshot
                            .local_index(node)
                            .expect("buffered node inside snapshot");
                        z.row(local).to_vec()
                    })
                    .collect();
                let diag = buffer_w2_diagnostic(
                    &Tensor::from_rows(&class_emb)?,
                    &Tensor::from_rows(&member_emb)?,
                )?;
                task_w2.push(ClassW2 {
                    class,
                    w2_sq: diag.w2_sq,
                    singleton: diag.singleton,
                });
            }
        }
        w2_diagnostics.push(task_w2);
        buffer_history.push(buffers.clone());

        let row = evaluate(&state, &snapshot, &seq, task)?;
        matrix.push_row(row)?;
        per_task_seconds.push(started.elapsed().as_secs_f64());

        if let Some(dir) = out_dir {
            if cfg.checkpoint_per_task {
                save_checkpoint(
                    &dir.join(format!("checkpoint_task_{task}.txt")),
                    &state.checkpoint_map(),
                )?;
            }
        }
    }

    let (aa, af) = aa_af(&matrix)?;
    if let Some(dir) = out_dir {
        fs::write(dir.join("accuracy_matrix.csv"), matrix.to_csv())?;
        let metrics = RunMetrics {
            mode: cfg.mode.to_string(),
            seed: cfg.seed,
            aa,
            af,
            per_task_times: per_task_seconds.clone(),
            w2_diagnostics: w2_diagnostics.clone(),
        };
        fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&metrics)? + "\n",
        )?;
        let doc = BuffersDoc {
            capacity: cfg.buffer_capacity,
            tasks: buffer_history
                .iter()
                .enumerate()
                .map(|(i, b)| BufferTaskDoc {
                    task: i + 1,
                    classes: b.iter().collect(),
                })
                .collect(),
        };
        fs::write(
            dir.join("buffers.json"),
            serde_json::to_string_pretty(&doc)? + "\n",
        )?;
    }

    Ok(ExperimentResult {
        matrix,
        aa,
        af,
        per_task_seconds,
        w2_diagnostics,
        buffer_history,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SynthParams;

    fn tiny_source() -> GrowingGraphSource {
        crate::graph::synth_growing_graph(&SynthParams {
            n_classes: 4,
            nodes_per_class: 20,
            feature_dim: 6,
            intra_p: 0.15,
            inter_p: 0.01,
            class_sep: 3.0,
            seed: 11,
        })
        .unwrap()
    }

    fn tiny_config(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 12,
            hidden_dim: 8,
            buffer_capacity: 3,
            classes_per_task: 2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_the_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0]), 0);
        assert_eq!(argmax(&[0.3, 0.1, 0.4]), 2);
    }

    #[test]
    fn buffer_batch_size_follows_the_population_ratio() {
        // 100 new nodes, 50 buffered: a batch of 10 pairs with 5.
        assert_eq!(buffer_batch_size(10, 0, 100, 50), 5);
        // Rounding, not truncation: 10 * 30 / 100 = 3.
        assert_eq!(buffer_batch_size(10, 0, 100, 34), 3);
        // Never zero while buffers exist; never above the population.
        assert_eq!(buffer_batch_size(1, 0, 1000, 40), 1);
        assert_eq!(buffer_batch_size(500, 0, 100, 40), 40);
        // Explicit size wins but is still capped.
        assert_eq!(buffer_batch_size(10, 7, 100, 50), 7);
        assert_eq!(buffer_batch_size(10, 70, 100, 50), 50);
        // No buffers, no batch.
        assert_eq!(buffer_batch_size(10, 7, 100, 0), 0);
    }

    #[test]
    fn first_task_training_is_identical_across_modes() {
        let source = tiny_source();
        let mut finals = Vec::new();
        for mode in [Mode::Dmsg, Mode::Finetune, Mode::Joint] {
            let cfg = tiny_config(mode);
            let seq = partition_tasks(&source, source.classes(), 2).unwrap();
            let snapshot =
                snapshot_at(&source, &seq, 1, cfg.split_ratios().unwrap(), cfg.seed).unwrap();
            let mut state = ModelState::init(source.feature_dim(), cfg.hidden_dim, cfg.seed);
            state.head = extend_head(&state.head, 2, cfg.init_scale, 1).unwrap();
            let buffers = MemoryBuffers::new(cfg.buffer_capacity);
            train_task(&mut state, &snapshot, &seq, 1, &buffers, &cfg).unwrap();
            finals.push(state);
        }
        for other in &finals[1..] {
            for (a, b) in finals[0].tensors().iter().zip(other.tensors()) {
                assert!(a.bits_eq(b), "task-1 parameters differ between modes");
            }
        }
    }

    #[test]
    fn zero_replay_weights_make_replay_mode_equal_finetune() {
        let source = tiny_source();
        let seq = partition_tasks(&source, source.classes(), 2).unwrap();

        let run = |mode: Mode, zero_lambdas: bool| {
            let mut cfg = tiny_config(mode);
            if zero_lambdas {
                cfg.lambda_rp = 0.0;
                cfg.lambda_mise = 0.0;
                cfg.lambda_cgse = 0.0;
            }
            let ratios = cfg.split_ratios().unwrap();
            let mut state = ModelState::init(source.feature_dim(), cfg.hidden_dim, cfg.seed);
            let mut buffers = MemoryBuffers::new(cfg.buffer_capacity);
            for task in 1..=2 {
                let snapshot = snapshot_at(&source, &seq, task, ratios, cfg.seed).unwrap();
                state.head = extend_head(
                    &state.head,
                    seq.task_classes(task).len(),
                    cfg.init_scale,
                    derive_seed_indexed(cfg.seed, "head.extend", task as u64),
                )
                .unwrap();
                train_task(&mut state, &snapshot, &seq, task, &buffers, &cfg).unwrap();
                if task == 1 {
                    // Hand the second task a plausible non-empty buffer in
                    // both runs so the replay mode's precondition holds.
                    buffers.set_members(0, vec![0, 1]);
                    buffers.set_members(1, vec![20, 21]);
                }
            }
            state
        };

        let dmsg_zero = run(Mode::Dmsg, true);
        let finetune = run(Mode::Finetune, false);
        for (a, b) in dmsg_zero.tensors().iter().zip(finetune.tensors()) {
            assert!(a.bits_eq(b), "zero-weight replay diverged from finetune");
        }
    }

    #[test]
    fn replay_mode_requires_buffers_after_task_one() {
        let source = tiny_source();
        let cfg = tiny_config(Mode::Dmsg);
        let seq = partition_tasks(&source, source.classes(), 2).unwrap();
        let snapshot = snapshot_at(&source, &seq, 2, cfg.split_ratios().unwrap(), 5).unwrap();
        let mut state = ModelState::init(source.feature_dim(), cfg.hidden_dim, cfg.seed);
        state.head = extend_head(&state.head, 4, 0.0, 1).unwrap();
        let empty = MemoryBuffers::new(cfg.buffer_capacity);
        let err = train_task(&mut state, &snapshot, &seq, 2, &empty, &cfg).unwrap_err();
        assert!(matches!(err, TrainerError::EmptyBuffers { task: 2 }));
    }

    #[test]
    fn head_must_cover_the_task_before_training() {
        let source = tiny_source();
        let cfg = tiny_config(Mode::Finetune);
        let seq = partition_tasks(&source, source.classes(), 2).unwrap();
        let snapshot = snapshot_at(&source, &seq, 1, cfg.split_ratios().unwrap(), 5).unwrap();
        let mut state = ModelState::init(source.feature_dim(), cfg.hidden_dim, cfg.seed);
        // Head still has zero classes.
        let buffers = MemoryBuffers::new(3);
        assert!(train_task(&mut state, &snapshot, &seq, 1, &buffers, &cfg).is_err());
    }

    #[test]
    fn oracle_head_evaluates_to_a_row_of_ones() {
        // A model that classifies from leaked one-hot label features gets
        // every test node right: accuracy row must be exactly 1.0.
        let n_classes = 3;
        let per_class = 10;
        let n = n_classes * per_class;
        let mut features = Tensor::zeros(n, n_classes);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i / per_class;
            features.set(i, class, 10.0);
            labels.push(class);
        }
        let source = GrowingGraphSource::new(features, labels, Vec::new()).unwrap();
        let seq = partition_tasks(&source, &[0, 1, 2], 1).unwrap();
        let ratios = crate::graph::SplitRatios::new(0.5, 0.2, 0.3).unwrap();
        let snapshot = snapshot_at(&source, &seq, 3, ratios, 7).unwrap();

        let mut state = ModelState::init(n_classes, n_classes, 0);
        // Identity everywhere: embeddings = features (self-loops only),
        // head = identity, so logits peak at the true class.
        state.gcn.w1 = Tensor::eye(n_classes);
        state.gcn.w2 = Tensor::eye(n_classes);
        state.head.weight = Tensor::eye(n_classes);
        state.head.bias = Tensor::zeros(1, n_classes);
        let row = evaluate(&state, &snapshot, &seq, 3).unwrap();
        assert_eq!(row, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_predictor_scores_near_chance() {
        // Untrained zero-ish model with equal logits predicts class 0 for
        // everything (tie-break), which on balanced classes is exactly the
        // 1/C chance level for task 1 and 0 for the others' classes.
        let source = tiny_source();
        let cfg = tiny_config(Mode::Finetune);
        let seq = partition_tasks(&source, source.classes(), 2).unwrap();
        let snapshot = snapshot_at(&source, &seq, 2, cfg.split_ratios().unwrap(), 5).unwrap();
        let mut state = ModelState::init(source.feature_dim(), cfg.hidden_dim, cfg.seed);
        state.head = extend_head(&state.head, 4, 0.0, 1).unwrap();
        state.gcn.w1 = Tensor::zeros(source.feature_dim(), cfg.hidden_dim);
        let row = evaluate(&state, &snapshot, &seq, 2).unwrap();
        // All logits zero -> every node predicted as column 0 = class 0.
        // Task 1 holds classes {0, 1}: half its test nodes are class 0.
        assert!((row[0] - 0.5).abs() < 1e-12, "got {}", row[0]);
        assert_eq!(row[1], 0.0);
    }

    #[test]
    fn build_loss_rejects_all_zero_weights() {
        let mut g = DiffGraph::new();
        let state = ModelState::init(3, 4, 0);
        let mut state = state;
        state.head = extend_head(&state.head, 2, 0.0, 0).unwrap();
        let params: Vec<Tensor> = state.tensors().iter().map(|&t| t.clone()).collect();
        let bound = BoundModel::bind(&mut g, &params).unwrap();
        let adjacency = Rc::new(crate::graph::normalize_adjacency(2, &[(0, 1)]).unwrap());
        let features = Tensor::filled(2, 3, 0.5);
        let inputs = LossInputs {
            adjacency,
            features: &features,
            new_rows: &[0, 1],
            new_targets: &[0, 1],
            replay: None,
            weights: LossWeights {
                w_new: 0.0,
                lambda_rp: 0.0,
                lambda_mise: 0.0,
                lambda_cgse: 0.0,
            },
        };
        assert!(build_loss(&mut g, &bound, &inputs, true, None).is_err());
    }

    #[test]
    fn mini_batching_trains_and_stays_deterministic() {
        let source = tiny_source();
        let seq = partition_tasks(&source, source.classes(), 2).unwrap();
        let run = || {
            let mut cfg = tiny_config(Mode::Dmsg);
            cfg.batch_new = 8;
            cfg.fanout = 4;
            cfg.epochs = 6;
            let ratios = cfg.split_ratios().unwrap();
            let mut state = ModelState::init(source.feature_dim(), cfg.hidden_dim, cfg.seed);
            let mut buffers = MemoryBuffers::new(cfg.buffer_capacity);
            for task in 1..=2 {
                let snapshot = snapshot_at(&source, &seq, task, ratios, cfg.seed).unwrap();
                state.head = extend_head(&state.head, 2, 0.0, task as u64).unwrap();
                train_task(&mut state, &snapshot, &seq, task, &buffers, &cfg).unwrap();
                if task == 1 {
                    buffers.set_members(0, vec![0, 1, 2]);
                    buffers.set_members(1, vec![20, 21]);
                }
            }
            state
        };
        let a = run();
        let b = run();
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert!(x.bits_eq(y), "mini-batch training is not deterministic");
        }
    }
}
