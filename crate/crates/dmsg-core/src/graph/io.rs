//! Dataset directory I/O.
//!
//! A dataset directory holds three UTF-8 tab-separated files:
//!
//! * `edges.tsv` — one undirected edge per line: `src<TAB>dst`.
//! * `features.tsv` — one node per line: `node_id<TAB>f_1<TAB>...<TAB>f_d`.
//! * `labels.tsv` — one node per line: `node_id<TAB>class_id`.
//!
//! Blank lines and lines starting with `#` are ignored in all three files.
//! Node ids must cover `0..n` exactly (one feature row and one label row
//! per node); any edge or label referencing a node outside that range is a
//! dangling reference.

use std::fs;
use std::path::Path;

use super::{GraphError, GrowingGraphSource};
use crate::numerics::Tensor;

/// Parses `edges.tsv` content into `(src, dst)` pairs.
pub fn parse_edges(text: &str) -> Result<Vec<(usize, usize)>, GraphError> {
    let mut edges = Vec::new();
    for (lineno, raw) in content_lines(text) {
        let fields = split_fields(raw);
        if fields.len() != 2 {
            return Err(parse_err(
                "edges.tsv",
                lineno,
                format!("expected 2 tab-separated columns, got {}", fields.len()),
            ));
        }
        let src = parse_node_id("edges.tsv", lineno, fields[0])?;
        let dst = parse_node_id("edges.tsv", lineno, fields[1])?;
        edges.push((src, dst));
    }
    Ok(edges)
}

/// Parses `features.tsv` content into `(node_id, feature_row)` pairs. All
/// rows must have the same width.
pub fn parse_features(text: &str) -> Result<Vec<(usize, Vec<f64>)>, GraphError> {
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, raw) in content_lines(text) {
        let fields = split_fields(raw);
        if fields.len() < 2 {
            return Err(parse_err(
                "features.tsv",
                lineno,
                "expected a node id and at least one feature value",
            ));
        }
        let node = parse_node_id("features.tsv", lineno, fields[0])?;
        let mut values = Vec::with_capacity(fields.len() - 1);
        for field in &fields[1..] {
            let v: f64 = field.parse().map_err(|_| {
                parse_err(
                    "features.tsv",
                    lineno,
                    format!("non-numeric feature value {field:?}"),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    "features.tsv",
                    lineno,
                    format!("non-finite feature value {field:?}"),
                ));
            }
            values.push(v);
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(parse_err(
                    "features.tsv",
                    lineno,
                    format!("feature width {} differs from first row's {w}", values.len()),
                ));
            }
            _ => {}
        }
        rows.push((node, values));
    }
    Ok(rows)
}

/// Parses `labels.tsv` content into `(node_id, class_id)` pairs.
pub fn parse_labels(text: &str) -> Result<Vec<(usize, usize)>, GraphError> {
    let mut rows = Vec::new();
    for (lineno, raw) in content_lines(text) {
        let fields = split_fields(raw);
        if fields.len() != 2 {
            return Err(parse_err(
                "labels.tsv",
                lineno,
                format!("expected 2 tab-separated columns, got {}", fields.len()),
            ));
        }
        let node = parse_node_id("labels.tsv", lineno, fields[0])?;
        let class = parse_node_id("labels.tsv", lineno, fields[1])?;
        rows.push((node, class));
    }
    Ok(rows)
}

/// Loads and validates a dataset directory.
pub fn load_graph(dir: &Path) -> Result<GrowingGraphSource, GraphError> {
    let edges = parse_edges(&read(dir, "edges.tsv")?)?;
    let feature_rows = parse_features(&read(dir, "features.tsv")?)?;
    let label_rows = parse_labels(&read(dir, "labels.tsv")?)?;

    let n = feature_rows.len();
    if n == 0 {
        return Err(GraphError::Invalid("features.tsv defines no nodes".into()));
    }
    let dim = feature_rows[0].1.len();
    let mut features = Tensor::zeros(n, dim);
    let mut seen = vec![false; n];
    for (node, values) in &feature_rows {
        if *node >= n {
            return Err(GraphError::DanglingReference {
                context: "features.tsv".into(),
                node: *node,
                node_count: n,
            });
        }
        if seen[*node] {
            return Err(GraphError::Invalid(format!(
                "features.tsv: duplicate row for node {node}"
            )));
        }
        seen[*node] = true;
        features.row_mut(*node).copy_from_slice(values);
    }

    let mut labels = vec![usize::MAX; n];
    for (node, class) in &label_rows {
        if *node >= n {
            return Err(GraphError::DanglingReference {
                context: "labels.tsv".into(),
                node: *node,
                node_count: n,
            });
        }
        if labels[*node] != usize::MAX {
            return Err(GraphError::Invalid(format!(
                "labels.tsv: duplicate label for node {node}"
            )));
        }
        labels[*node] = *class;
    }
    if let Some(missing) = labels.iter().position(|&c| c == usize::MAX) {
        return Err(GraphError::Invalid(format!(
            "node {missing} has a feature row but no label"
        )));
    }

    for &(u, v) in &edges {
        let bad = if u >= n {
            Some(u)
        } else if v >= n {
            Some(v)
        } else {
            None
        };
        if let Some(node) = bad {
            return Err(GraphError::DanglingReference {
                context: "edges.tsv".into(),
                node,
                node_count: n,
            });
        }
    }

    GrowingGraphSource::new(features, labels, edges)
}

/// Writes a source graph back out as a dataset directory.
pub fn save_graph(dir: &Path, source: &GrowingGraphSource) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let mut edges = String::from("# src\tdst\n");
    for &(u, v) in source.edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write(dir, "edges.tsv", &edges)?;

    let mut feats = String::from("# node_id\tfeatures...\n");
    for v in 0..source.node_count() {
        feats.push_str(&v.to_string());
        for x in source.features().row(v) {
            feats.push('\t');
            feats.push_str(&format!("{x:e}"));
        }
        feats.push('\n');
    }
    write(dir, "features.tsv", &feats)?;

    let mut labels = String::from("# node_id\tclass_id\n");
    for v in 0..source.node_count() {
        labels.push_str(&format!("{v}\t{}\n", source.labels()[v]));
    }
    write(dir, "labels.tsv", &labels)?;
    Ok(())
}

fn read(dir: &Path, name: &str) -> Result<String, GraphError> {
    let path = dir.join(name);
    match fs::read_to_string(&path) {
        Ok(text) => Ok(text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(GraphError::MissingFile(path))
        }
        Err(e) => Err(io_err(&path, e)),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), GraphError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> GraphError {
    GraphError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Yields `(1-based line number, content)` for non-blank, non-comment lines.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, line)| (i + 1, line.trim_end_matches('\r')))
        .filter(|(_, line)| {
            let trimmed = line.trim_start();
            !trimmed.is_empty() && !trimmed.starts_with('#')
        })
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split('\t').map(str::trim).collect()
}

fn parse_node_id(file: &str, lineno: usize, field: &str) -> Result<usize, GraphError> {
    field
        .parse()
        .map_err(|_| parse_err(file, lineno, format!("expected an integer, got {field:?}")))
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Parse {
        file: file.into(),
        line,
        msg: msg.into(),
    }
}
