//! Dataset directories: `manifest.json` plus feature, edge, label and split
//! files whose paths are relative to the directory.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EdgeType, HeteroGraph, NodeType, Schema, Splits};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    /// Headerless decimal text, one node per row.
    #[default]
    Csv,
    /// Row-major little-endian 32-bit floats.
    F32le,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub node_types: Vec<ManifestNodeType>,
    pub edge_types: Vec<ManifestEdgeType>,
    pub target_type: String,
    pub num_classes: usize,
    pub labels_file: String,
    pub splits_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestNodeType {
    pub name: String,
    pub count: usize,
    pub feature_dim: usize,
    pub feature_file: String,
    #[serde(default)]
    pub format: FeatureFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEdgeType {
    pub name: String,
    pub src: String,
    pub dst: String,
    pub edge_file: String,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::data(path, None, "missing file"),
        _ => Error::io(path, e),
    })
}

/// Reads and fully validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<HeteroGraph> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read_bytes(&manifest_path)?)
        .map_err(|e| Error::data(&manifest_path, Some(e.line()), format!("invalid manifest: {e}")))?;
    let schema = schema_of(&manifest).map_err(|e| Error::data(&manifest_path, None, e.to_string()))?;

    let mut features = Vec::with_capacity(manifest.node_types.len());
    for nt in &manifest.node_types {
        let path = dir.join(&nt.feature_file);
        features.push(match nt.format {
            FeatureFormat::Csv => read_csv_features(&path, nt)?,
            FeatureFormat::F32le => read_f32le_features(&path, nt)?,
        });
    }

    let mut edges = Vec::with_capacity(manifest.edge_types.len());
    for (k, et) in manifest.edge_types.iter().enumerate() {
        let path = dir.join(&et.edge_file);
        let e = schema.edge_types()[k].clone();
        let (ns, nd) = (schema.node_types()[e.src].count, schema.node_types()[e.dst].count);
        let rows = read_id_pairs(&path, "src_local_id", "dst_local_id")?;
        for &(line, s, d) in &rows {
            if s >= ns {
                return Err(Error::data(
                    &path,
                    Some(line),
                    format!("source id {s} out of range for `{}` ({ns} nodes)", et.src),
                ));
            }
            if d >= nd {
                return Err(Error::data(
                    &path,
                    Some(line),
                    format!("destination id {d} out of range for `{}` ({nd} nodes)", et.dst),
                ));
            }
        }
        edges.push(rows.into_iter().map(|(_, s, d)| (s, d)).collect());
    }

    let target = schema.target_type();
    let n_target = schema.node_types()[target].count;
    let labels_path = dir.join(&manifest.labels_file);
    let mut labels = vec![None; n_target];
    for (line, id, label) in read_id_pairs(&labels_path, "local_id", "label")? {
        if id >= n_target {
            return Err(Error::data(
                &labels_path,
                Some(line),
                format!("node id {id} out of range ({n_target} target nodes)"),
            ));
        }
        if label >= manifest.num_classes {
            return Err(Error::data(
                &labels_path,
                Some(line),
                format!("label {label} outside [0, {})", manifest.num_classes),
            ));
        }
        if labels[id].replace(label).is_some() {
            return Err(Error::data(
                &labels_path,
                Some(line),
                format!("node {id} labelled twice"),
            ));
        }
    }
    if let Some(missing) = labels.iter().position(Option::is_none) {
        return Err(Error::data(
            &labels_path,
            None,
            format!("target node {missing} has no label"),
        ));
    }
    let labels = labels.into_iter().map(Option::unwrap).collect();

    let splits_path = dir.join(&manifest.splits_file);
    let splits: Splits = serde_json::from_slice(&read_bytes(&splits_path)?)
        .map_err(|e| Error::data(&splits_path, Some(e.line()), format!("invalid splits: {e}")))?;
    super::check_splits(&splits, n_target).map_err(|e| Error::data(&splits_path, None, e.to_string()))?;

    HeteroGraph::new(schema, features, edges, labels, splits)
        .map_err(|e| Error::data(&manifest_path, None, e.to_string()))
}

fn schema_of(m: &Manifest) -> Result<Schema> {
    let node_types = m
        .node_types
        .iter()
        .map(|n| NodeType {
            name: n.name.clone(),
            count: n.count,
            feature_dim: n.feature_dim,
        })
        .collect::<Vec<_>>();
    let index = |name: &str, what: &str| {
        node_types
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::Config(format!("{what} `{name}` is not a declared node type")))
    };
    let mut edge_types = Vec::with_capacity(m.edge_types.len());
    for e in &m.edge_types {
        edge_types.push(EdgeType {
            name: e.name.clone(),
            src: index(&e.src, &format!("source of edge type `{}`", e.name))?,
            dst: index(&e.dst, &format!("destination of edge type `{}`", e.name))?,
        });
    }
    let target = index(&m.target_type, "target_type")?;
    Schema::new(node_types, edge_types, target, m.num_classes)
}

fn read_csv_features(path: &Path, nt: &ManifestNodeType) -> Result<Array2<f32>> {
    let bytes = read_bytes(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut data = Vec::with_capacity(nt.count * nt.feature_dim);
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, &e))?;
        rows += 1;
        if rows > nt.count {
            continue;
        }
        let line = record.position().map_or(rows, |p| p.line() as usize);
        if record.len() != nt.feature_dim {
            return Err(Error::data(
                path,
                Some(line),
                format!(
                    "node type `{}`: expected {} feature columns, found {}",
                    nt.name,
                    nt.feature_dim,
                    record.len()
                ),
            ));
        }
        for (c, field) in record.iter().enumerate() {
            let v: f32 = field
                .parse()
                .map_err(|_| Error::data(path, Some(line), format!("column {}: `{field}` is not a number", c + 1)))?;
            if !v.is_finite() {
                return Err(Error::data(
                    path,
                    Some(line),
                    format!("column {}: non-finite value", c + 1),
                ));
            }
            data.push(v);
        }
    }
    if rows != nt.count {
        return Err(Error::data(
            path,
            None,
            format!(
                "node type `{}`: manifest declares {} nodes, feature file has {rows} rows",
                nt.name, nt.count
            ),
        ));
    }
    Ok(Array2::from_shape_vec((nt.count, nt.feature_dim), data).expect("row lengths checked"))
}

fn read_f32le_features(path: &Path, nt: &ManifestNodeType) -> Result<Array2<f32>> {
    let bytes = read_bytes(path)?;
    let expected = nt.count * nt.feature_dim * 4;
    if bytes.len() != expected {
        return Err(Error::data(
            path,
            None,
            format!(
                "node type `{}`: expected {} x {} floats ({expected} bytes), found {} bytes",
                nt.name,
                nt.count,
                nt.feature_dim,
                bytes.len()
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        let row = i / nt.feature_dim.max(1) + 1;
        return Err(Error::data(path, Some(row), "non-finite value"));
    }
    Ok(Array2::from_shape_vec((nt.count, nt.feature_dim), data).expect("length checked"))
}

/// Two-column integer CSV with an optional header; yields `(line, a, b)`.
fn read_id_pairs(path: &Path, first: &str, second: &str) -> Result<Vec<(usize, usize, usize)>> {
    let bytes = read_bytes(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, &e))?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        if i == 0 && record.len() == 2 && &record[0] == first && &record[1] == second {
            continue;
        }
        if record.len() != 2 {
            return Err(Error::data(
                path,
                Some(line),
                format!("expected 2 columns `{first},{second}`, found {}", record.len()),
            ));
        }
        let parse = |field: &str, name: &str| {
            field.parse::<usize>().map_err(|_| {
                Error::data(
                    path,
                    Some(line),
                    format!("{name}: `{field}` is not a non-negative integer"),
                )
            })
        };
        out.push((line, parse(&record[0], first)?, parse(&record[1], second)?));
    }
    Ok(out)
}

fn csv_error(path: &Path, e: &csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    Error::data(path, line, e.to_string())
}

fn file_stem(i: usize, name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{i}_{safe}")
}

fn write_file(path: PathBuf, contents: &[u8]) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `g` in the directory format read by [`load_dataset`], creating
/// `dir` if needed. Returns the manifest written.
pub fn write_dataset(g: &HeteroGraph, dir: impl AsRef<Path>, format: FeatureFormat) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let schema = g.schema();
    let mut node_types = Vec::new();
    for (i, nt) in schema.node_types().iter().enumerate() {
        let x = g.features(i);
        let (file, bytes) = match format {
            FeatureFormat::Csv => {
                let mut text = String::new();
                for row in x.rows() {
                    let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    text.push_str(&cells.join(","));
                    text.push('\n');
                }
                (format!("features_{}.csv", file_stem(i, &nt.name)), text.into_bytes())
            }
            FeatureFormat::F32le => {
                let bytes = x.iter().flat_map(|v| v.to_le_bytes()).collect();
                (format!("features_{}.f32", file_stem(i, &nt.name)), bytes)
            }
        };
        write_file(dir.join(&file), &bytes)?;
        node_types.push(ManifestNodeType {
            name: nt.name.clone(),
            count: nt.count,
            feature_dim: nt.feature_dim,
            feature_file: file,
            format,
        });
    }
    let mut edge_types = Vec::new();
    for (k, et) in schema.edge_types().iter().enumerate() {
        let mut text = String::from("src_local_id,dst_local_id\n");
        for (s, d) in g.edges(k) {
            text.push_str(&format!("{s},{d}\n"));
        }
        let file = format!("edges_{}.csv", file_stem(k, &et.name));
        write_file(dir.join(&file), text.as_bytes())?;
        edge_types.push(ManifestEdgeType {
            name: et.name.clone(),
            src: schema.node_types()[et.src].name.clone(),
            dst: schema.node_types()[et.dst].name.clone(),
            edge_file: file,
        });
    }
    let mut text = String::from("local_id,label\n");
    for (i, l) in g.labels().iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    write_file(dir.join("labels.csv"), text.as_bytes())?;
    let splits = serde_json::to_vec(g.splits()).expect("splits serialize");
    write_file(dir.join("splits.json"), &splits)?;

    let manifest = Manifest {
        node_types,
        edge_types,
        target_type: schema.node_types()[schema.target_type()].name.clone(),
        num_classes: schema.num_classes(),
        labels_file: "labels.csv".into(),
        splits_file: "splits.json".into(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}
