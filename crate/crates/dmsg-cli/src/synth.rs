//! `dmsg synth`: write a synthetic dataset directory.

use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use dmsg_core::graph::{save_graph, synth_growing_graph, SynthParams};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of label classes.
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Nodes generated per class.
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Feature dimensionality.
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    /// Edge probability between same-class pairs.
    #[arg(long, default_value_t = 0.05)]
    intra_p: f64,
    /// Edge probability between cross-class pairs.
    #[arg(long, default_value_t = 0.002)]
    inter_p: f64,
    /// Distance scale between class feature means.
    #[arg(long, default_value_t = 4.0)]
    class_sep: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory to create edges.tsv / features.tsv / labels.tsv in.
    #[arg(long)]
    out: PathBuf,
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let params = SynthParams {
        n_classes: args.classes,
        nodes_per_class: args.per_class,
        feature_dim: args.feature_dim,
        intra_p: args.intra_p,
        inter_p: args.inter_p,
        class_sep: args.class_sep,
        seed: args.seed,
    };
    let source = synth_growing_graph(&params).context("generating dataset")?;
    save_graph(&args.out, &source)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    println!(
        "wrote {} nodes, {} edges, {} classes",
        source.node_count(),
        source.edges().len(),
        source.classes().len()
    );
    println!("{}", args.out.display());
    Ok(())
}
