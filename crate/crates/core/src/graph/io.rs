//! Plain-text graph files.
//!
//! * edges: one `u v` pair per line, `#` starts a comment
//! * features: CSV, row `i` holds node `i`
//! * labels: CSV `node,label`, `-1` marks an unknown label

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Graph;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_err(file: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse { line, msg: format!("{}: {msg}", file.display()) }
}

fn parse_edges(path: &Path, text: &str) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (line, l) in content_lines(text) {
        let mut parts = l.split_whitespace();
        let mut next = || -> Result<usize> {
            let tok = parts.next().ok_or_else(|| parse_err(path, line, "expected `u v`"))?;
            tok.parse().map_err(|_| parse_err(path, line, format!("bad node index `{tok}`")))
        };
        let (u, v) = (next()?, next()?);
        if parts.next().is_some() {
            return Err(parse_err(path, line, "trailing tokens after `u v`"));
        }
        if u == v {
            return Err(parse_err(path, line, format!("self-loop on node {u}")));
        }
        edges.push((u, v));
    }
    Ok(edges)
}

fn parse_features(path: &Path, text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, l) in content_lines(text) {
        let row = l
            .split(',')
            .map(|t| {
                let t = t.trim();
                t.parse::<f64>()
                    .map_err(|_| parse_err(path, line, format!("bad feature value `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    path,
                    line,
                    format!("{} columns, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn parse_labels(path: &Path, text: &str) -> Result<Vec<(usize, Option<usize>)>> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let (a, b) = l
            .split_once(',')
            .ok_or_else(|| parse_err(path, line, "expected `node,label`"))?;
        let (a, b) = (a.trim(), b.trim());
        if out.is_empty() && a.parse::<usize>().is_err() && a.eq_ignore_ascii_case("node") {
            continue; // header
        }
        let node: usize =
            a.parse().map_err(|_| parse_err(path, line, format!("bad node index `{a}`")))?;
        let label: i64 =
            b.parse().map_err(|_| parse_err(path, line, format!("bad label `{b}`")))?;
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(parse_err(path, line, format!("negative label {l}"))),
        };
        out.push((node, label));
    }
    Ok(out)
}

/// Loads a graph. The node count is the number of label rows; the feature
/// file must have exactly that many rows.
pub fn load_graph(edges: &Path, features: &Path, labels: &Path) -> Result<Graph> {
    let label_rows = parse_labels(labels, &fs::read_to_string(labels)?)?;
    let n = label_rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    if n != label_rows.len() {
        return Err(Error::Dimension(format!(
            "{}: {} label rows do not cover nodes 0..{n}",
            labels.display(),
            label_rows.len()
        )));
    }
    let mut y = vec![None; n];
    for (node, label) in label_rows {
        y[node] = label;
    }
    let rows = parse_features(features, &fs::read_to_string(features)?)?;
    if rows.len() != n {
        return Err(Error::Dimension(format!(
            "{}: {} feature rows for {n} nodes",
            features.display(),
            rows.len()
        )));
    }
    let x = Matrix::from_rows(&rows)?;
    let edge_list = parse_edges(edges, &fs::read_to_string(edges)?)?;
    let num_classes = y.iter().flatten().map(|&c| c + 1).max().unwrap_or(0);
    Graph::new(n, edge_list, x, y, num_classes)
}

pub fn save_graph(graph: &Graph, edges: &Path, features: &Path, labels: &Path) -> Result<()> {
    save_graph_with_header(graph, edges, features, labels, None)
}

/// Writes the three files, each starting with `# <header>` when given.
pub fn save_graph_with_header(
    graph: &Graph,
    edges: &Path,
    features: &Path,
    labels: &Path,
    header: Option<&str>,
) -> Result<()> {
    let start = || header.map(|h| format!("# {h}\n")).unwrap_or_default();

    let mut e = start();
    for &(u, v) in graph.edges() {
        writeln!(e, "{u} {v}").unwrap();
    }
    fs::write(edges, e)?;

    let mut f = start();
    for i in 0..graph.num_nodes() {
        let row: Vec<String> = graph.features().row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(f, "{}", row.join(",")).unwrap();
    }
    fs::write(features, f)?;

    let mut l = start();
    l.push_str("node,label\n");
    for (i, y) in graph.labels().iter().enumerate() {
        match y {
            Some(c) => writeln!(l, "{i},{c}").unwrap(),
            None => writeln!(l, "{i},-1").unwrap(),
        }
    }
    fs::write(labels, l)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_edge_line_reports_line_number() {
        let err = parse_edges(Path::new("e.txt"), "# c\n0 1\n1 x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn reversed_edge_is_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let (e, f, l) = (dir.path().join("e"), dir.path().join("f"), dir.path().join("l"));
        fs::write(&e, "5 2\n").unwrap();
        fs::write(&f, "0\n0\n0\n0\n0\n0\n").unwrap();
        fs::write(&l, "node,label\n0,0\n1,1\n2,-1\n3,0\n4,0\n5,1\n").unwrap();
        let g = load_graph(&e, &f, &l).unwrap();
        assert_eq!(g.edges(), &[(2, 5)]);
        assert_eq!(g.labels()[2], None);
        assert_eq!(g.num_classes(), 2);
    }

    #[test]
    fn feature_row_mismatch_is_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        let (e, f, l) = (dir.path().join("e"), dir.path().join("f"), dir.path().join("l"));
        fs::write(&e, "0 1\n").unwrap();
        fs::write(&f, "1.0\n").unwrap();
        fs::write(&l, "0,0\n1,1\n").unwrap();
        assert!(matches!(load_graph(&e, &f, &l), Err(Error::Dimension(_))));
    }
}
