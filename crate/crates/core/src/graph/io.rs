//! Dataset container formats.
//!
//! JSON container:
//! `{"num_nodes", "features", "labels" (-1 = unknown), "edges", "train_mask", "val_mask", "test_mask"}`.
//!
//! TSV: a node file with one header line and rows `id  label  mask  f_0 .. f_{d-1}`
//! (`mask` is one of `train`, `val`, `test`, `-`; `label` is `-1` when unknown), and a
//! companion edge file with one `u  v` pair per line. The companion of `name.tsv` is
//! `name.edges.tsv`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFormat {
    Json,
    Tsv,
}

impl std::str::FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(GraphFormat::Json),
            "tsv" => Ok(GraphFormat::Tsv),
            other => Err(Error::Config(format!("unknown dataset format '{other}'"))),
        }
    }
}

/// Serialized form of [`Graph`]; field names are part of the file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub num_nodes: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<i64>,
    pub edges: Vec<[usize; 2]>,
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

impl GraphFile {
    pub fn from_graph(g: &Graph) -> Self {
        GraphFile {
            num_nodes: g.num_nodes(),
            features: g.features().to_rows(),
            labels: g.labels().iter().map(|l| l.map_or(-1, |c| c as i64)).collect(),
            edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
            train_mask: g.train_mask.clone(),
            val_mask: g.val_mask.clone(),
            test_mask: g.test_mask.clone(),
        }
    }

    pub fn into_graph(self) -> Result<Graph> {
        if self.features.len() != self.num_nodes {
            return Err(Error::Validation(format!(
                "num_nodes is {} but {} feature rows were given",
                self.num_nodes,
                self.features.len()
            )));
        }
        let features = Tensor::from_rows(&self.features)
            .map_err(|e| Error::Validation(format!("feature rows have unequal length: {e}")))?;
        let features = if self.num_nodes == 0 {
            Tensor::zeros(0, 0)
        } else {
            features
        };
        let labels = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| match l {
                -1 => Ok(None),
                l if l >= 0 => Ok(Some(l as usize)),
                l => Err(Error::Validation(format!("node {i} has invalid label {l}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Graph::new(
            features,
            labels,
            self.edges.into_iter().map(|[u, v]| (u, v)),
            self.train_mask,
            self.val_mask,
            self.test_mask,
        )
    }
}

pub fn load_graph(path: &Path, format: GraphFormat) -> Result<Graph> {
    match format {
        GraphFormat::Json => load_json(path),
        GraphFormat::Tsv => load_tsv(path, &companion_edge_path(path)),
    }
}

fn load_json(path: &Path) -> Result<Graph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: GraphFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: format!("column {}: {e}", e.column()),
    })?;
    file.into_graph()
}

fn companion_edge_path(nodes: &Path) -> PathBuf {
    let stem = nodes.file_stem().and_then(|s| s.to_str()).unwrap_or("graph");
    nodes.with_file_name(format!("{stem}.edges.tsv"))
}

pub fn load_tsv(nodes_path: &Path, edges_path: &Path) -> Result<Graph> {
    let parse_err = |path: &Path, line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let text = fs::read_to_string(nodes_path).map_err(|e| Error::io(nodes_path, e))?;
    let mut rows: Vec<(usize, Option<usize>, String, Vec<f64>)> = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in text.lines().enumerate().skip(1) {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(parse_err(
                nodes_path,
                lineno,
                format!("expected at least 3 fields, found {}", fields.len()),
            ));
        }
        let id: usize = fields[0].trim().parse().map_err(|_| {
            parse_err(
                nodes_path,
                lineno,
                format!("field 'id': invalid integer '{}'", fields[0]),
            )
        })?;
        let label: i64 = fields[1].trim().parse().map_err(|_| {
            parse_err(
                nodes_path,
                lineno,
                format!("field 'label': invalid integer '{}'", fields[1]),
            )
        })?;
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => {
                return Err(parse_err(
                    nodes_path,
                    lineno,
                    format!("field 'label': invalid label {l}"),
                ))
            }
        };
        let mask = fields[2].trim().to_string();
        if !matches!(mask.as_str(), "train" | "val" | "test" | "-") {
            return Err(parse_err(
                nodes_path,
                lineno,
                format!("field 'mask': unknown value '{mask}'"),
            ));
        }
        let feats = fields[3..]
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(nodes_path, lineno, format!("feature column {j}: invalid number '{f}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(parse_err(
                    nodes_path,
                    lineno,
                    format!("expected {w} feature columns, found {}", feats.len()),
                ))
            }
            _ => {}
        }
        rows.push((id, label, mask, feats));
    }
    let n = rows.len();
    let d = width.unwrap_or(0);
    let mut features = Tensor::zeros(n, d);
    let mut labels = vec![None; n];
    let (mut train, mut val, mut test) = (vec![false; n], vec![false; n], vec![false; n]);
    let mut seen = vec![false; n];
    for (id, label, mask, feats) in rows {
        if id >= n || seen[id] {
            return Err(Error::Validation(format!(
                "node ids must be a permutation of 0..{n}; bad id {id}"
            )));
        }
        seen[id] = true;
        features.row_mut(id).copy_from_slice(&feats);
        labels[id] = label;
        match mask.as_str() {
            "train" => train[id] = true,
            "val" => val[id] = true,
            "test" => test[id] = true,
            _ => {}
        }
    }

    let text = fs::read_to_string(edges_path).map_err(|e| Error::io(edges_path, e))?;
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let mut next = |name: &str| -> Result<usize> {
            let tok = parts
                .next()
                .ok_or_else(|| parse_err(edges_path, i + 1, format!("missing field '{name}'")))?;
            tok.parse()
                .map_err(|_| parse_err(edges_path, i + 1, format!("field '{name}': invalid integer '{tok}'")))
        };
        let u = next("u")?;
        let v = next("v")?;
        edges.push((u, v));
    }
    Graph::new(features, labels, edges, train, val, test)
}

pub fn save_json(g: &Graph) -> Result<String> {
    Ok(serde_json::to_string(&GraphFile::from_graph(g))?)
}

/// Writes the JSON container atomically.
pub fn save_graph(g: &Graph, path: &Path) -> Result<()> {
    crate::util::write_atomic(path, save_json(g)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.json");
        fs::write(
            &p,
            r#"{"num_nodes":2,"features":[[1,0],[0,1]],"labels":[0,-1],"edges":[[1,0]],
               "train_mask":[true,false],"val_mask":[false,false],"test_mask":[false,true]}"#,
        )
        .unwrap();
        let g = load_graph(&p, GraphFormat::Json).unwrap();
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(g.labels(), &[Some(0), None]);
    }

    #[test]
    fn mask_overlap_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.json");
        fs::write(
            &p,
            r#"{"num_nodes":1,"features":[[1]],"labels":[0],"edges":[],
               "train_mask":[true],"val_mask":[false],"test_mask":[true]}"#,
        )
        .unwrap();
        assert!(matches!(load_graph(&p, GraphFormat::Json), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.json");
        fs::write(&p, "{\n\"num_nodes\": 1,\n\"features\": [[1, oops]]}").unwrap();
        match load_graph(&p, GraphFormat::Json) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn tsv_with_companion_edges() {
        let dir = tempfile::tempdir().unwrap();
        let nodes = dir.path().join("toy.tsv");
        fs::write(&nodes, "id\tlabel\tmask\tf0\tf1\n1\t1\ttest\t0\t1\n0\t0\ttrain\t1\t0\n").unwrap();
        fs::write(dir.path().join("toy.edges.tsv"), "0\t1\n1\t0\n").unwrap();
        let g = load_graph(&nodes, GraphFormat::Tsv).unwrap();
        assert_eq!(g.features().row(0), &[1.0, 0.0]);
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(g.indices(super::super::Split::Test), vec![1]);
    }

    #[test]
    fn tsv_bad_feature_has_context() {
        let dir = tempfile::tempdir().unwrap();
        let nodes = dir.path().join("toy.tsv");
        fs::write(&nodes, "id\tlabel\tmask\tf0\n0\t0\ttrain\tx\n").unwrap();
        fs::write(dir.path().join("toy.edges.tsv"), "").unwrap();
        let err = load_graph(&nodes, GraphFormat::Tsv).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("feature column 0"), "{msg}");
    }
}
