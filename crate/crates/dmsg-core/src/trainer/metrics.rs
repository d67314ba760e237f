//! Accuracy bookkeeping: the lower-triangular accuracy matrix, the two
//! summary metrics derived from it, and the serialized result artifacts.

use serde::{Deserialize, Serialize};

use super::{ModelState, TrainerError};
use crate::buffer::MemoryBuffers;

/// Lower-triangular record of per-task test accuracy: row `t` (1-based)
/// holds the accuracy on tasks `1..=t` measured after training task `t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix::default()
    }

    /// Appends the evaluation row of the next task. The row must be one
    /// longer than the previous row, with every entry a probability.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<(), TrainerError> {
        if row.len() != self.rows.len() + 1 {
            return Err(TrainerError::Invalid(format!(
                "accuracy row {} must have {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(&bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TrainerError::Invalid(format!(
                "accuracy {bad} outside [0, 1]"
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of completed tasks T.
    pub fn task_count(&self) -> usize {
        self.rows.len()
    }

    /// Accuracy on task `j` after task `i`, both 1-based, `i >= j`.
    pub fn at(&self, i: usize, j: usize) -> Option<f64> {
        if i == 0 || j == 0 || j > i {
            return None;
        }
        self.rows.get(i - 1).and_then(|r| r.get(j - 1)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// One line per task, comma-separated, shortest-round-trip floats; the
    /// byte-level determinism contract for identical runs.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainerError> {
        let mut m = AccuracyMatrix::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|e| {
                        TrainerError::Invalid(format!("matrix line {}: {e}", idx + 1))
                    })
                })
                .collect::<Result<_, _>>()?;
            m.push_row(row)?;
        }
        Ok(m)
    }
}

/// Average accuracy and average forgetting of a completed matrix:
/// `AA = mean_j M[T][j]`, `AF = mean_{j<T} (M[T][j] - M[j][j])`. AF needs
/// at least two tasks and is reported as absent otherwise. AF can be
/// positive when late training helps earlier tasks.
pub fn aa_af(m: &AccuracyMatrix) -> Result<(f64, Option<f64>), TrainerError> {
    let t = m.task_count();
    if t == 0 {
        return Err(TrainerError::Invalid("empty accuracy matrix".into()));
    }
    let last = &m.rows()[t - 1];
    let aa = last.iter().sum::<f64>() / t as f64;
    let af = if t < 2 {
        None
    } else {
        let drop: f64 = (1..t).map(|j| last[j - 1] - m.rows()[j - 1][j - 1]).sum();
        Some(drop / (t - 1) as f64)
    };
    Ok((aa, af))
}

/// Average accuracy after each task: entry `t-1` is the mean of row `t`.
/// This is the curve usually plotted to show accuracy dynamics.
pub fn aa_curve(m: &AccuracyMatrix) -> Vec<f64> {
    m.rows()
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect()
}

/// One class's buffer-vs-class distribution distance for the diagnostics
/// artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassW2 {
    pub class: usize,
    pub w2_sq: f64,
    /// True when either fitted Gaussian came from a single row.
    pub singleton: bool,
}

/// The `metrics.json` document of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: String,
    pub seed: u64,
    pub aa: f64,
    pub af: Option<f64>,
    pub per_task_times: Vec<f64>,
    /// Outer index = task; inner = every class buffered after that task.
    pub w2_diagnostics: Vec<Vec<ClassW2>>,
}

/// Everything a finished experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub matrix: AccuracyMatrix,
    pub aa: f64,
    pub af: Option<f64>,
    pub per_task_seconds: Vec<f64>,
    pub w2_diagnostics: Vec<Vec<ClassW2>>,
    /// Buffer contents after each task (empty maps outside dmsg mode).
    pub buffer_history: Vec<MemoryBuffers>,
    pub final_state: ModelState,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new();
        for row in rows {
            m.push_row(row.to_vec()).unwrap();
        }
        m
    }

    #[test]
    fn aa_af_match_the_two_task_hand_example() {
        let m = matrix(&[&[0.9], &[0.8, 0.7]]);
        let (aa, af) = aa_af(&m).unwrap();
        assert!((aa - 0.75).abs() < 1e-15);
        assert!((af.unwrap() - (-0.1)).abs() < 1e-15);
    }

    #[test]
    fn constant_matrix_has_no_forgetting() {
        let m = matrix(&[&[0.6], &[0.6, 0.6], &[0.6, 0.6, 0.6]]);
        let (aa, af) = aa_af(&m).unwrap();
        assert!((aa - 0.6).abs() < 1e-15);
        assert_eq!(af.unwrap(), 0.0);
    }

    #[test]
    fn forgetting_can_be_positive() {
        // Later training improves task 1: AF > 0, mirroring runs where
        // replay transfers backward.
        let m = matrix(&[&[0.5], &[0.9, 0.8]]);
        let (_, af) = aa_af(&m).unwrap();
        assert!((af.unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn single_task_has_aa_but_no_af() {
        let m = matrix(&[&[0.8]]);
        let (aa, af) = aa_af(&m).unwrap();
        assert_eq!(aa, 0.8);
        assert_eq!(af, None);
        assert!(aa_af(&AccuracyMatrix::new()).is_err());
    }

    #[test]
    fn aa_curve_averages_each_row() {
        let m = matrix(&[&[1.0], &[0.5, 0.7]]);
        let curve = aa_curve(&m);
        assert_eq!(curve.len(), 2);
        assert!((curve[0] - 1.0).abs() < 1e-15);
        assert!((curve[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trips_bit_for_bit() {
        let m = matrix(&[&[0.9], &[0.1 + 0.2, 0.7]]);
        let text = m.to_csv();
        assert_eq!(text.lines().count(), 2);
        let back = AccuracyMatrix::from_csv(&text).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.to_csv(), text);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let mut m = AccuracyMatrix::new();
        assert!(m.push_row(vec![0.5, 0.5]).is_err(), "first row must be len 1");
        m.push_row(vec![0.5]).unwrap();
        assert!(m.push_row(vec![0.5]).is_err(), "second row must be len 2");
        assert!(m.push_row(vec![0.5, 1.5]).is_err(), "accuracy above 1");
        assert!(AccuracyMatrix::from_csv("0.5\n0.4,x\n").is_err());
        assert_eq!(m.at(1, 1), Some(0.5));
        assert_eq!(m.at(2, 1), None);
        assert_eq!(m.at(0, 0), None);
    }
}
