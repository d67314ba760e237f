//! `dmsg report`: fold finished run directories into a summary table plus
//! two plot-ready data files.
//!
//! `aa_curve.csv` holds one row per (run, task): the average accuracy over
//! all tasks seen after training task t — the learning-dynamics curve.
//! `heatmap.tsv` flattens each run's lower-triangular accuracy matrix into
//! (trained_after, eval_task, accuracy) records for heat-map rendering.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use dmsg_core::trainer::{aa_curve, AccuracyMatrix, RunMetrics};

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories (each must hold metrics.json and accuracy_matrix.csv).
    #[arg(required = true, value_parser = crate::existing_dir)]
    runs: Vec<PathBuf>,
    /// Directory for aa_curve.csv and heatmap.tsv (default: current dir).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

struct LoadedRun {
    metrics: RunMetrics,
    matrix: AccuracyMatrix,
}

fn load_run(dir: &Path) -> anyhow::Result<LoadedRun> {
    let metrics_path = dir.join("metrics.json");
    let text = fs::read_to_string(&metrics_path)
        .with_context(|| format!("reading {}", metrics_path.display()))?;
    let metrics: RunMetrics = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", metrics_path.display()))?;

    let matrix_path = dir.join("accuracy_matrix.csv");
    let text = fs::read_to_string(&matrix_path)
        .with_context(|| format!("reading {}", matrix_path.display()))?;
    let matrix = AccuracyMatrix::from_csv(&text)
        .with_context(|| format!("parsing {}", matrix_path.display()))?;
    Ok(LoadedRun { metrics, matrix })
}

pub fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    let mut runs = Vec::new();
    for dir in &args.runs {
        runs.push((dir.clone(), load_run(dir)?));
    }
    runs.sort_by(|(_, a), (_, b)| {
        (a.metrics.mode.as_str(), a.metrics.seed).cmp(&(b.metrics.mode.as_str(), b.metrics.seed))
    });

    println!("{:<10} {:>6} {:>6} {:>10} {:>10}", "mode", "seed", "tasks", "aa", "af");
    for (_, run) in &runs {
        let af = match run.metrics.af {
            Some(af) => format!("{af:.4}"),
            None => "-".to_string(),
        };
        println!(
            "{:<10} {:>6} {:>6} {:>10.4} {:>10}",
            run.metrics.mode,
            run.metrics.seed,
            run.matrix.task_count(),
            run.metrics.aa,
            af
        );
    }

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut curve = String::from("mode,seed,task,aa\n");
    for (_, run) in &runs {
        for (idx, aa) in aa_curve(&run.matrix).iter().enumerate() {
            curve.push_str(&format!(
                "{},{},{},{}\n",
                run.metrics.mode,
                run.metrics.seed,
                idx + 1,
                aa
            ));
        }
    }
    let curve_path = args.out.join("aa_curve.csv");
    fs::write(&curve_path, curve).with_context(|| format!("writing {}", curve_path.display()))?;

    let mut heat = String::from("mode\tseed\ttrained_after\teval_task\taccuracy\n");
    for (_, run) in &runs {
        for (i, row) in run.matrix.rows().iter().enumerate() {
            for (j, acc) in row.iter().enumerate() {
                heat.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    run.metrics.mode,
                    run.metrics.seed,
                    i + 1,
                    j + 1,
                    acc
                ));
            }
        }
    }
    let heat_path = args.out.join("heatmap.tsv");
    fs::write(&heat_path, heat).with_context(|| format!("writing {}", heat_path.display()))?;

    Ok(())
}
