//! Text emitters for attention matrices (TSV) and beam-search graphs (DOT).

use std::fmt::Write as _;

use thiserror::Error;

use crate::decoding::SearchGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VizError {
    #[error("attention has {got} rows but there are {expected} target tokens")]
    Rows { expected: usize, got: usize },
    #[error("attention row {row} has {got} columns but there are {expected} source tokens")]
    Cols { row: usize, expected: usize, got: usize },
    #[error("TSV line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn clean(tok: &str) -> String {
    tok.replace(['\t', '\n'], " ")
}

/// Header row of source tokens (after an empty corner cell), then one row
/// per target token with its attention weights. Values are written in
/// shortest round-trip form.
pub fn emit_attention(source: &[String], target: &[String], alpha: &[Vec<f64>]) -> Result<String, VizError> {
    if alpha.len() != target.len() {
        return Err(VizError::Rows {
            expected: target.len(),
            got: alpha.len(),
        });
    }
    for (row, a) in alpha.iter().enumerate() {
        if a.len() != source.len() {
            return Err(VizError::Cols {
                row,
                expected: source.len(),
                got: a.len(),
            });
        }
    }
    let mut out = String::new();
    for s in source {
        out.push('\t');
        out.push_str(&clean(s));
    }
    out.push('\n');
    for (t, a) in target.iter().zip(alpha) {
        out.push_str(&clean(t));
        for v in a {
            write!(out, "\t{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Inverse of [`emit_attention`]: `(source, target, alpha)`.
pub fn parse_attention(tsv: &str) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>), VizError> {
    let mut lines = tsv.lines();
    let header = lines.next().ok_or(VizError::Parse {
        line: 1,
        reason: "missing header".into(),
    })?;
    let source: Vec<String> = header.split('\t').skip(1).map(str::to_string).collect();
    let mut target = Vec::new();
    let mut alpha = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut cells = line.split('\t');
        target.push(cells.next().unwrap_or_default().to_string());
        let row = cells
            .map(|c| {
                c.parse::<f64>().map_err(|_| VizError::Parse {
                    line: i + 2,
                    reason: format!("bad number {c:?}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != source.len() {
            return Err(VizError::Cols {
                row: i,
                expected: source.len(),
                got: row.len(),
            });
        }
        alpha.push(row);
    }
    Ok((source, target, alpha))
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// DOT digraph of a search graph. Nodes are labelled with their token and
/// cumulative log-probability; the best path is drawn bold red and pruned
/// nodes dashed grey.
pub fn emit_search_graph(graph: &SearchGraph, token: impl Fn(usize) -> String) -> String {
    let on_best: std::collections::HashSet<usize> = graph.best_path.iter().copied().collect();
    let mut out = String::from("digraph beam {\n  rankdir=LR;\n  node [shape=box, fontname=\"monospace\"];\n");
    for n in &graph.nodes {
        let label = match n.token {
            None => "<s>".to_string(),
            Some(t) => format!("{}\\n{:.3}", escape(&token(t)), n.logprob),
        };
        let style = if on_best.contains(&n.id) {
            ", color=red, penwidth=2"
        } else if n.pruned {
            ", style=dashed, color=gray, fontcolor=gray"
        } else {
            ""
        };
        writeln!(out, "  n{} [label=\"{}\"{}];", n.id, label, style).unwrap();
    }
    for n in &graph.nodes {
        if let Some(p) = n.parent {
            let style = if on_best.contains(&n.id) && on_best.contains(&p) {
                " [color=red, penwidth=2]"
            } else {
                ""
            };
            writeln!(out, "  n{p} -> n{}{style};", n.id).unwrap();
        }
    }
    out.push_str("}\n");
    out
}
