//! Diversified memory buffer selection.
//!
//! Each class keeps a small buffer of representative nodes. A buffer set is
//! scored by how spread out its members are in prediction space: every
//! member contributes its distance to the closest other member of its own
//! buffer (intra-diversity) plus the average, over the other buffers, of its
//! distance to the closest member of each (inter-diversity). New buffers are
//! grown greedily, one node at a time round-robin across the new classes,
//! always adding the candidate with the largest marginal score gain.
//!
//! Distances are plain L2 between rows of the model's class-probability
//! matrix, so "diverse" means "the classifier sees them differently".

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

/// Errors from buffer scoring and selection.
#[derive(Debug, Error)]
pub enum BufferError {
    #[error("node {0} has no probability row")]
    MissingRow(usize),
    #[error("buffer for class {0} is empty")]
    EmptyBuffer(usize),
    #[error("no buffer for class {0}")]
    UnknownClass(usize),
    #[error("scoring needs at least two non-empty buffers, found {0}")]
    TooFewBuffers(usize),
    #[error("{0}")]
    Invalid(String),
}

/// Class-probability rows addressable by node id. Row order is whatever the
/// caller produced; ids do not need to be contiguous.
#[derive(Debug, Clone)]
pub struct NodeProbabilities {
    probs: Tensor,
    row_of: HashMap<usize, usize>,
}

impl NodeProbabilities {
    /// Associates row `i` of `probs` with `node_ids[i]`.
    pub fn new(probs: Tensor, node_ids: &[usize]) -> Result<Self, BufferError> {
        if node_ids.len() != probs.rows() {
            return Err(BufferError::Invalid(format!(
                "{} node ids for {} probability rows",
                node_ids.len(),
                probs.rows()
            )));
        }
        let mut row_of = HashMap::with_capacity(node_ids.len());
        for (i, &id) in node_ids.iter().enumerate() {
            if row_of.insert(id, i).is_some() {
                return Err(BufferError::Invalid(format!("duplicate node id {id}")));
            }
        }
        Ok(NodeProbabilities { probs, row_of })
    }

    /// Convenience for tests and tools: node ids are the row indices.
    pub fn from_rows(probs: Tensor) -> Self {
        let ids: Vec<usize> = (0..probs.rows()).collect();
        NodeProbabilities::new(probs, &ids).expect("contiguous ids cannot collide")
    }

    /// Probability vector of one node.
    pub fn row(&self, node: usize) -> Result<&[f64], BufferError> {
        self.row_of
            .get(&node)
            .map(|&r| self.probs.row(r))
            .ok_or(BufferError::MissingRow(node))
    }

    /// Width of the probability vectors (classes seen so far).
    pub fn dim(&self) -> usize {
        self.probs.cols()
    }
}

/// Per-class memory buffers. Members are stored in selection order; the
/// capacity records the per-class budget the buffers were selected under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBuffers {
    capacity: usize,
    buffers: BTreeMap<usize, Vec<usize>>,
}

impl MemoryBuffers {
    pub fn new(capacity: usize) -> Self {
        MemoryBuffers {
            capacity,
            buffers: BTreeMap::new(),
        }
    }

    /// Per-class budget.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Classes that own a buffer, ascending.
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.buffers.keys().copied()
    }

    /// Members of one class's buffer, in selection order.
    pub fn members(&self, class: usize) -> Result<&[usize], BufferError> {
        self.buffers
            .get(&class)
            .map(Vec::as_slice)
            .ok_or(BufferError::UnknownClass(class))
    }

    /// Replaces (or creates) one class's buffer.
    pub fn set_members(&mut self, class: usize, members: Vec<usize>) {
        self.buffers.insert(class, members);
    }

    /// `(class, members)` pairs, ascending by class.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> + '_ {
        self.buffers.iter().map(|(&c, m)| (c, m.as_slice()))
    }

    /// All buffered nodes with their classes, ascending by class then
    /// selection order.
    pub fn labeled_nodes(&self) -> Vec<(usize, usize)> {
        self.buffers
            .iter()
            .flat_map(|(&c, members)| members.iter().map(move |&v| (v, c)))
            .collect()
    }

    /// Total number of buffered nodes.
    pub fn len(&self) -> usize {
        self.buffers.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// L2 distance from node `v`'s probability vector to the closest member of
/// `buffer`. Errors if the buffer is empty or any row is missing.
pub fn prob_distance(
    v: usize,
    buffer: &[usize],
    probs: &NodeProbabilities,
) -> Result<f64, BufferError> {
    if buffer.is_empty() {
        return Err(BufferError::Invalid(
            "prob_distance against an empty buffer".into(),
        ));
    }
    let pv = probs.row(v)?;
    let mut best = f64::INFINITY;
    for &u in buffer {
        let pu = probs.row(u)?;
        best = best.min(l2(pv, pu));
    }
    Ok(best)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Diversity score of class `class`'s buffer against all buffers:
/// for each member, its distance to the closest *other* member of its own
/// buffer (zero for a singleton) plus the mean over the other non-empty
/// buffers of its distance to the closest member of each.
///
/// Requires at least two non-empty buffers overall, otherwise the
/// inter-diversity normalizer is undefined.
pub fn buffer_score(
    class: usize,
    buffers: &MemoryBuffers,
    probs: &NodeProbabilities,
) -> Result<f64, BufferError> {
    score_allowing_single(class, buffers, probs, false)
}

/// Like [`buffer_score`] but treats "no other buffers" as a zero inter-term
/// instead of an error. The greedy loop uses this so a lone first class can
/// still be grown; the strict public scoring keeps the documented error.
fn score_allowing_single(
    class: usize,
    buffers: &MemoryBuffers,
    probs: &NodeProbabilities,
    allow_single: bool,
) -> Result<f64, BufferError> {
    let members = buffers.members(class)?;
    if members.is_empty() {
        return Err(BufferError::EmptyBuffer(class));
    }
    let others: Vec<(usize, &[usize])> = buffers
        .iter()
        .filter(|&(c, m)| c != class && !m.is_empty())
        .collect();
    let non_empty = others.len() + 1;
    if non_empty < 2 && !allow_single {
        return Err(BufferError::TooFewBuffers(non_empty));
    }

    let mut total = 0.0;
    for (i, &v) in members.iter().enumerate() {
        // Intra: closest other member of the same buffer.
        let mut intra = f64::INFINITY;
        for (j, &u) in members.iter().enumerate() {
            if i != j {
                intra = intra.min(l2(probs.row(v)?, probs.row(u)?));
            }
        }
        if members.len() == 1 {
            intra = 0.0;
        }
        // Inter: mean over other buffers of the closest-member distance.
        let mut inter = 0.0;
        for &(_, other) in &others {
            inter += prob_distance(v, other, probs)?;
        }
        if non_empty >= 2 {
            inter /= (non_empty - 1) as f64;
        }
        total += intra + inter;
    }
    Ok(total)
}

/// Exact change in `class`'s buffer score from adding node `v`, computed by
/// scoring before and after. `v` must not already be a member; an empty
/// buffer scores zero before insertion.
pub fn marginal_gain(
    v: usize,
    class: usize,
    buffers: &MemoryBuffers,
    probs: &NodeProbabilities,
) -> Result<f64, BufferError> {
    gain_allowing_single(v, class, buffers, probs, false)
}

fn gain_allowing_single(
    v: usize,
    class: usize,
    buffers: &MemoryBuffers,
    probs: &NodeProbabilities,
    allow_single: bool,
) -> Result<f64, BufferError> {
    let members = buffers.members(class)?;
    if members.contains(&v) {
        return Err(BufferError::Invalid(format!(
            "node {v} is already in the class {class} buffer"
        )));
    }
    let before = if members.is_empty() {
        0.0
    } else {
        score_allowing_single(class, buffers, probs, allow_single)?
    };
    let mut grown = buffers.clone();
    let mut new_members = members.to_vec();
    new_members.push(v);
    grown.set_members(class, new_members);
    let after = score_allowing_single(class, &grown, probs, allow_single)?;
    Ok(after - before)
}

/// Grows one buffer per novel class by greedy marginal-gain selection.
///
/// * `previous`: buffers of earlier classes, carried over untouched.
/// * `candidates`: for each novel class, its candidate node ids (training
///   nodes of that class). Every class must bring at least one candidate.
/// * `class_columns`: probability column of each novel class, used only to
///   seed the buffer with the candidate the model scores highest on its own
///   class.
/// * `capacity`: per-class budget `b`; each buffer ends at exactly
///   `min(b, candidate count)` members.
///
/// Selection is deterministic: candidates are visited in ascending node id
/// order and ties keep the earlier (lowest-id) candidate. Previous buffers
/// participate in the inter-diversity terms but are never modified.
pub fn greedy_select(
    previous: &MemoryBuffers,
    candidates: &BTreeMap<usize, Vec<usize>>,
    class_columns: &BTreeMap<usize, usize>,
    probs: &NodeProbabilities,
    capacity: usize,
) -> Result<MemoryBuffers, BufferError> {
    if capacity == 0 {
        return Err(BufferError::Invalid("capacity must be >= 1".into()));
    }
    if candidates.is_empty() {
        return Err(BufferError::Invalid("no novel classes to select for".into()));
    }
    let mut result = MemoryBuffers::new(capacity);
    for (class, members) in previous.iter() {
        if candidates.contains_key(&class) {
            return Err(BufferError::Invalid(format!(
                "class {class} already has a buffer"
            )));
        }
        result.set_members(class, members.to_vec());
    }

    // Validate candidate lists and seed each new buffer with the candidate
    // the model assigns the highest own-class probability.
    let mut sorted_candidates: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&class, list) in candidates {
        if list.is_empty() {
            return Err(BufferError::Invalid(format!(
                "class {class} has no candidates"
            )));
        }
        let mut sorted = list.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != list.len() {
            return Err(BufferError::Invalid(format!(
                "class {class} has duplicate candidates"
            )));
        }
        let &column = class_columns
            .get(&class)
            .ok_or_else(|| BufferError::Invalid(format!("class {class} has no column")))?;
        let mut seed = None;
        let mut best = f64::NEG_INFINITY;
        for &v in &sorted {
            let row = probs.row(v)?;
            if column >= row.len() {
                return Err(BufferError::Invalid(format!(
                    "column {column} out of range for {}-class probabilities",
                    row.len()
                )));
            }
            if row[column] > best {
                best = row[column];
                seed = Some(v);
            }
        }
        result.set_members(class, vec![seed.expect("non-empty candidates")]);
        sorted_candidates.insert(class, sorted);
    }

    // Round-robin growth: each pass adds at most one node per class, always
    // the candidate with the largest marginal gain.
    loop {
        let mut grew = false;
        for (&class, list) in &sorted_candidates {
            let target = capacity.min(list.len());
            if result.members(class)?.len() >= target {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for &v in list {
                if result.members(class)?.contains(&v) {
                    continue;
                }
                let gain = gain_allowing_single(v, class, &result, probs, true)?;
                // Strict comparison keeps the lowest node id on ties.
                if best.map_or(true, |(_, g)| gain > g) {
                    best = Some((v, gain));
                }
            }
            let (chosen, _) = best.expect("buffer below target implies a free candidate");
            let mut members = result.members(class)?.to_vec();
            members.push(chosen);
            result.set_members(class, members);
            grew = true;
        }
        if !grew {
            break;
        }
    }
    Ok(result)
}

/// Mean and per-dimension sample variance (n-1 normalizer) of a set of
/// embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Fits a diagonal Gaussian. Returns the stats and whether the variance was
/// undefined (a single row), in which case it is taken as zero.
pub fn fit_diag_gaussian(rows: &Tensor) -> Result<(GaussianStats, bool), BufferError> {
    let n = rows.rows();
    if n == 0 {
        return Err(BufferError::Invalid("cannot fit a Gaussian to no rows".into()));
    }
    let d = rows.cols();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &x) in mean.iter_mut().zip(rows.row(r)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let singleton = n == 1;
    let mut var = vec![0.0; d];
    if !singleton {
        for r in 0..n {
            for (j, &x) in rows.row(r).iter().enumerate() {
                let dx = x - mean[j];
                var[j] += dx * dx;
            }
        }
        for v in &mut var {
            *v /= (n - 1) as f64;
        }
    }
    Ok((GaussianStats { mean, var }, singleton))
}

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// `||mu_p - mu_q||^2 + sum_d (sigma_p,d - sigma_q,d)^2`.
pub fn gaussian_w2_sq(p: &GaussianStats, q: &GaussianStats) -> Result<f64, BufferError> {
    if p.mean.len() != q.mean.len() || p.var.len() != q.var.len() {
        return Err(BufferError::Invalid(
            "Gaussian dimensions do not match".into(),
        ));
    }
    let mean_term: f64 = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    let cov_term: f64 = p
        .var
        .iter()
        .zip(&q.var)
        .map(|(&a, &b)| {
            let (sa, sb) = (a.sqrt(), b.sqrt());
            (sa - sb) * (sa - sb)
        })
        .sum();
    Ok(mean_term + cov_term)
}

/// How far a buffer's fitted Gaussian sits from its class's: the squared
/// W2 distance between the two diagonal fits. `singleton` flags a buffer
/// (or class) of one row, whose undefined variance was taken as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W2Diagnostic {
    pub w2_sq: f64,
    pub singleton: bool,
}

/// Fits diagonal Gaussians to the class rows and the buffer rows and
/// returns their squared W2 distance. Smaller means the buffer's spread
/// matches the class distribution better.
pub fn buffer_w2_diagnostic(
    class_rows: &Tensor,
    buffer_rows: &Tensor,
) -> Result<W2Diagnostic, BufferError> {
    if class_rows.cols() != buffer_rows.cols() {
        return Err(BufferError::Invalid(
            "class and buffer embedding widths differ".into(),
        ));
    }
    let (class_stats, class_single) = fit_diag_gaussian(class_rows)?;
    let (buffer_stats, buffer_single) = fit_diag_gaussian(buffer_rows)?;
    Ok(W2Diagnostic {
        w2_sq: gaussian_w2_sq(&class_stats, &buffer_stats)?,
        singleton: class_single || buffer_single,
    })
}
