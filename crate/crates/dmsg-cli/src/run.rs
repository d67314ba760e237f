//! `dmsg run`: execute one experiment end to end.
//!
//! Resolution order for configuration: built-in defaults, then the
//! `--config` file, then repeated `--set key=value` flags, then the `--mode`
//! and `--seed` conveniences. The fully resolved configuration is written
//! into the run directory as `config.txt`, so any run can be reproduced from
//! its artifacts alone.

use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use dmsg_core::graph::load_graph;
use dmsg_core::trainer::{run_sequence, TrainConfig};

use crate::manifest::{run_id, timestamp, RunManifest};

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Flat key=value config file; omit to run on defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory holding edges.tsv / features.tsv / labels.tsv.
    #[arg(long)]
    data: PathBuf,
    /// Root under which a fresh run directory is created.
    #[arg(long, env = "DMSG_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    /// Exact run directory; overrides --out-root and may already exist
    /// (reruns then overwrite the same artifacts).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override a single config key, e.g. --set epochs=50. Repeatable;
    /// applied in order after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set mode=<MODE>.
    #[arg(long)]
    mode: Option<String>,
    /// Shorthand for --set seed=<SEED>.
    #[arg(long)]
    seed: Option<u64>,
}

fn resolve_config(args: &RunArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    for pair in &args.set {
        let (key, value) = pair
            .split_once('=')
            .with_context(|| format!("--set {pair:?}: expected KEY=VALUE"))?;
        cfg.set(key.trim(), value.trim())
            .with_context(|| format!("--set {pair:?}"))?;
    }
    if let Some(mode) = &args.mode {
        cfg.set("mode", mode).context("--mode")?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string()).context("--seed")?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_run(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(args)?;
    let source = load_graph(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;

    let started = timestamp();
    let id = run_id(&format!(
        "{}\n{}\n{}\n{}",
        cfg.to_text(),
        args.data.display(),
        started,
        std::process::id()
    ));
    let run_dir = match &args.out_dir {
        Some(dir) => dir.clone(),
        None => args.out_root.join(format!("{}-seed{}-{}", cfg.mode, cfg.seed, &id[..12])),
    };
    fs::create_dir_all(&run_dir)
        .with_context(|| format!("creating run directory {}", run_dir.display()))?;

    // The manifest goes down before training so an interrupted run still
    // records its provenance.
    let mut manifest = RunManifest {
        run_id: id,
        config_path: args.config.clone(),
        dataset_path: args.data.clone(),
        output_dir: run_dir.clone(),
        started,
        finished: None,
    };
    manifest.write(&run_dir)?;
    fs::write(run_dir.join("config.txt"), cfg.to_text())
        .with_context(|| format!("writing {}", run_dir.join("config.txt").display()))?;

    let result = run_sequence(&cfg, &source, Some(&run_dir))?;

    manifest.finished = Some(timestamp());
    manifest.write(&run_dir)?;

    println!("mode {}  seed {}  tasks {}", cfg.mode, cfg.seed, result.matrix.task_count());
    println!("aa {}", result.aa);
    match result.af {
        Some(af) => println!("af {af}"),
        None => println!("af -"),
    }
    println!("{}", run_dir.display());
    Ok(())
}
