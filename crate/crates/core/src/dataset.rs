//! Labeled datasets and their on-disk text formats.
//!
//! * edges: one `u v` pair per line
//! * labels: one `node class` pair per line, covering nodes `0..n`
//! * features: one whitespace-separated dense row per node, or a header line
//!   `sparse <rows> <cols>` followed by `node col value` triplets
//!
//! Blank lines and anything after `#` are ignored in every format. The
//! Geom-GCN layout (`out1_graph_edges.txt`, `out1_node_feature_label.txt`) is
//! also understood by [`load_dir`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Features;
use crate::graph::{homophily_ratio, LabelAssignment, SparseGraph};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub name: String,
    pub graph: SparseGraph,
    pub labels: LabelAssignment,
    pub features: Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub edges: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub features: Option<PathBuf>,
}

impl DatasetPaths {
    /// `<prefix>.edges.txt`, `<prefix>.labels.txt`, `<prefix>.features.txt`.
    pub fn from_prefix(prefix: impl AsRef<Path>) -> Self {
        let p = prefix.as_ref().display().to_string();
        Self {
            edges: format!("{p}.edges.txt").into(),
            labels: format!("{p}.labels.txt").into(),
            features: Some(format!("{p}.features.txt").into()),
        }
    }

    /// `edges.txt`, `labels.txt`, `features.txt` inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            edges: d.join("edges.txt"),
            labels: d.join("labels.txt"),
            features: Some(d.join("features.txt")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub nodes: usize,
    pub edges: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub homophily: f64,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        graph: SparseGraph,
        labels: LabelAssignment,
        features: Features,
    ) -> Result<Self> {
        if labels.len() != graph.num_nodes() || features.num_rows() != graph.num_nodes() {
            return Err(Error::Input(format!(
                "dataset parts disagree: {} nodes, {} labels, {} feature rows",
                graph.num_nodes(),
                labels.len(),
                features.num_rows()
            )));
        }
        Ok(Self {
            name: name.into(),
            graph,
            labels,
            features,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    /// Same graph and labels with `X = I`.
    pub fn featureless(&self) -> Self {
        Self {
            features: Features::identity(self.num_nodes()),
            ..self.clone()
        }
    }

    pub fn stats(&self) -> Result<DatasetStats> {
        Ok(DatasetStats {
            nodes: self.num_nodes(),
            edges: self.graph.num_edges(),
            classes: self.num_classes(),
            feature_dim: self.features.dim(),
            homophily: homophily_ratio(&self.graph, &self.labels)?,
        })
    }

    /// Writes the dataset in the native text formats under `prefix`.
    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<DatasetPaths> {
        let paths = DatasetPaths::from_prefix(prefix);
        write_file(&paths.edges, &format_edges(&self.graph))?;
        write_file(&paths.labels, &format_labels(&self.labels))?;
        if let Some(f) = &paths.features {
            write_file(f, &format_features(&self.features))?;
        }
        Ok(paths)
    }
}

/// Loads a dataset. With `featureless`, the feature file is never opened.
pub fn load_dataset(paths: &DatasetPaths, featureless: bool) -> Result<LabeledDataset> {
    let labels = parse_labels(&read_file(&paths.labels)?, &paths.labels)?;
    let n = labels.len();
    let edges = parse_edges(&read_file(&paths.edges)?, &paths.edges, n)?;
    let graph = SparseGraph::build(n, edges)?;
    let features = if featureless {
        Features::identity(n)
    } else {
        let path = paths
            .features
            .as_ref()
            .ok_or_else(|| Error::Input("no feature file given; use featureless mode".into()))?;
        parse_features(&read_file(path)?, path, n)?
    };
    let name = paths
        .labels
        .file_stem()
        .map(|s| s.to_string_lossy().trim_end_matches(".labels").to_string())
        .unwrap_or_default();
    LabeledDataset::new(name, graph, labels, features)
}

/// Loads `edges.txt`/`labels.txt`/`features.txt` from `dir`, falling back to
/// the Geom-GCN file names.
pub fn load_dir(dir: impl AsRef<Path>, featureless: bool) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let geom_nodes = dir.join("out1_node_feature_label.txt");
    let mut ds = if !dir.join("labels.txt").exists() && geom_nodes.exists() {
        load_geom_gcn(&dir.join("out1_graph_edges.txt"), &geom_nodes, featureless)?
    } else {
        load_dataset(&DatasetPaths::in_dir(dir), featureless)?
    };
    ds.name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(ds)
}

/// Accepts either a dataset directory or a file prefix.
pub fn load_path(path: impl AsRef<Path>, featureless: bool) -> Result<LabeledDataset> {
    let path = path.as_ref();
    if path.is_dir() {
        load_dir(path, featureless)
    } else {
        load_dataset(&DatasetPaths::from_prefix(path), featureless)
    }
}

fn load_geom_gcn(edges_path: &Path, nodes_path: &Path, featureless: bool) -> Result<LabeledDataset> {
    let text = read_file(nodes_path)?;
    let mut rows: Vec<(usize, Vec<f64>, usize)> = Vec::new();
    for (line_no, line) in content_lines(&text) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 || cols[0] == "node_id" {
            if rows.is_empty() && line_no == 1 {
                continue;
            }
            return Err(parse_err(nodes_path, line_no, "expected `id<TAB>features<TAB>label`"));
        }
        let id = parse_num(cols[0], nodes_path, line_no)?;
        let label = parse_num(cols[2], nodes_path, line_no)?;
        let feats = if featureless {
            Vec::new()
        } else {
            cols[1]
                .split(',')
                .map(|s| parse_num::<f64>(s, nodes_path, line_no))
                .collect::<Result<_>>()?
        };
        rows.push((id, feats, label));
    }
    let n = rows.len();
    let mut labels = vec![usize::MAX; n];
    let mut feats = vec![Vec::new(); n];
    for (id, f, l) in rows {
        if id >= n || labels[id] != usize::MAX {
            return Err(Error::Input(format!(
                "{}: node id {id} duplicated or out of range",
                nodes_path.display()
            )));
        }
        labels[id] = l;
        feats[id] = f;
    }
    let labels = LabelAssignment::from_labels(labels)?;
    let features = if featureless {
        Features::identity(n)
    } else {
        let dim = feats.first().map_or(0, Vec::len);
        if feats.iter().any(|f| f.len() != dim) {
            return Err(Error::Input(format!("{}: ragged feature rows", nodes_path.display())));
        }
        Features::dense(Array2::from_shape_fn((n, dim), |(i, j)| feats[i][j]))
    };
    let edge_text = read_file(edges_path)?;
    let mut edges = Vec::new();
    for (line_no, line) in content_lines(&edge_text) {
        let mut it = line.split_whitespace();
        let (Some(a), Some(b)) = (it.next(), it.next()) else {
            return Err(parse_err(edges_path, line_no, "expected two node ids"));
        };
        if line_no == 1 && a.parse::<usize>().is_err() {
            continue;
        }
        let (u, v) = (parse_num(a, edges_path, line_no)?, parse_num(b, edges_path, line_no)?);
        check_node(u, n, edges_path, line_no)?;
        check_node(v, n, edges_path, line_no)?;
        edges.push((u, v));
    }
    LabeledDataset::new("", SparseGraph::build(n, edges)?, labels, features)
}

pub fn parse_edges(text: &str, path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (line_no, line) in content_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(path, line_no, "expected `u v`"));
        }
        let u = parse_num(fields[0], path, line_no)?;
        let v = parse_num(fields[1], path, line_no)?;
        check_node(u, n, path, line_no)?;
        check_node(v, n, path, line_no)?;
        out.push((u, v));
    }
    Ok(out)
}

pub fn parse_labels(text: &str, path: &Path) -> Result<LabelAssignment> {
    let mut pairs = Vec::new();
    for (line_no, line) in content_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(path, line_no, "expected `node class`"));
        }
        let v: usize = parse_num(fields[0], path, line_no)?;
        let c: usize = parse_num(fields[1], path, line_no)?;
        pairs.push((line_no, v, c));
    }
    let n = pairs.iter().map(|p| p.1 + 1).max().unwrap_or(0);
    let mut labels = vec![usize::MAX; n];
    for &(line_no, v, c) in &pairs {
        if labels[v] != usize::MAX {
            return Err(parse_err(path, line_no, &format!("node {v} labeled twice")));
        }
        labels[v] = c;
    }
    if let Some(v) = labels.iter().position(|&c| c == usize::MAX) {
        return Err(Error::Input(format!("{}: node {v} has no label", path.display())));
    }
    LabelAssignment::from_labels(labels)
}

pub fn parse_features(text: &str, path: &Path, n: usize) -> Result<Features> {
    let mut lines = content_lines(text).peekable();
    if let Some((line_no, header)) = lines.peek().copied() {
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.first() == Some(&"sparse") {
            lines.next();
            if fields.len() != 3 {
                return Err(parse_err(path, line_no, "expected `sparse <rows> <cols>`"));
            }
            let rows: usize = parse_num(fields[1], path, line_no)?;
            let cols: usize = parse_num(fields[2], path, line_no)?;
            if rows != n {
                return Err(parse_err(path, line_no, &format!("{rows} feature rows for {n} nodes")));
            }
            let mut triplets = Vec::new();
            for (line_no, line) in lines {
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 3 {
                    return Err(parse_err(path, line_no, "expected `node col value`"));
                }
                let (r, c): (usize, usize) = (parse_num(f[0], path, line_no)?, parse_num(f[1], path, line_no)?);
                if r >= rows || c >= cols {
                    return Err(parse_err(
                        path,
                        line_no,
                        &format!("entry ({r}, {c}) outside {rows}×{cols}"),
                    ));
                }
                triplets.push((r, c, parse_num(f[2], path, line_no)?));
            }
            return Ok(Features::Sparse(CsrMatrix::from_triplets(rows, cols, triplets)?.into()));
        }
    }
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (line_no, line) in lines {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|s| parse_num(s, path, line_no))
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(parse_err(
                    path,
                    line_no,
                    &format!("row has {} values, expected {d}", row.len()),
                ))
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    if rows != n {
        return Err(Error::Input(format!(
            "{}: {rows} feature rows for {n} nodes",
            path.display()
        )));
    }
    let x = Array2::from_shape_vec((rows, dim.unwrap_or(0)), data).expect("rows checked");
    Ok(Features::dense(x))
}

pub fn format_edges(g: &SparseGraph) -> String {
    let mut s = String::new();
    for &(u, v) in g.edges() {
        writeln!(s, "{u} {v}").unwrap();
    }
    s
}

pub fn format_labels(labels: &LabelAssignment) -> String {
    let mut s = String::new();
    for (v, c) in labels.labels().iter().enumerate() {
        writeln!(s, "{v} {c}").unwrap();
    }
    s
}

pub fn format_features(x: &Features) -> String {
    let mut s = String::new();
    match x {
        Features::Dense(x) => {
            for row in x.rows() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(s, "{}", cells.join(" ")).unwrap();
            }
        }
        Features::Sparse(m) => {
            writeln!(s, "sparse {} {}", m.rows(), m.cols()).unwrap();
            for r in 0..m.rows() {
                for (c, v) in m.row(r) {
                    writeln!(s, "{r} {c} {v}").unwrap();
                }
            }
        }
    }
    s
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Non-empty lines with comments stripped, paired with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn parse_num<T: std::str::FromStr>(s: &str, path: &Path, line: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(path, line, &format!("cannot parse `{s}`")))
}

fn check_node(v: usize, n: usize, path: &Path, line: usize) -> Result<()> {
    if v >= n {
        return Err(parse_err(path, line, &format!("node {v} has no label (n = {n})")));
    }
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: &str) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.to_string(),
    }
}
