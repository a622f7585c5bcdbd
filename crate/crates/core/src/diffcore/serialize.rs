//! Graph persistence: a JSON descriptor plus a little-endian `f32` blob.
//!
//! The descriptor is the serde form of the graph (tensors record only their
//! shape) and a `blob_index` mapping each tensor key (`<node>.<param>` or
//! `mask<i>.theta`) to its element range in the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::graph::ModelGraph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const GRAPH_FORMAT: &str = "ppgnas-graph/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobEntry {
    pub key: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
struct Descriptor<T> {
    format: String,
    graph: ModelGraph<T>,
    blob_index: Vec<BlobEntry>,
}

/// Serializes into `(descriptor JSON, weight blob)`.
pub fn to_parts<T: Scalar>(graph: &ModelGraph<T>) -> Result<(String, Vec<u8>)> {
    let mut g = graph.snapshot();
    let mut blob = Vec::new();
    let mut index = Vec::new();
    let mut offset = 0;
    g.visit_tensors_mut(&mut |_, key, t| {
        for v in t.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        index.push(BlobEntry {
            key: key.to_string(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    });
    let desc = Descriptor {
        format: GRAPH_FORMAT.to_string(),
        graph: g,
        blob_index: index,
    };
    Ok((serde_json::to_string_pretty(&desc)?, blob))
}

pub fn from_parts<T: Scalar>(json: &str, blob: &[u8]) -> Result<ModelGraph<T>> {
    let desc: Descriptor<T> = serde_json::from_str(json)?;
    if desc.format != GRAPH_FORMAT {
        return Err(Error::Format(format!("unknown graph format `{}`", desc.format)));
    }
    if !blob.len().is_multiple_of(4) {
        return Err(Error::Format("weight blob length is not a multiple of 4".into()));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut g = desc.graph;
    let mut pos = 0;
    let mut err: Option<Error> = None;
    g.visit_tensors_mut(&mut |_, key, t| {
        if err.is_some() {
            return;
        }
        let Some(entry) = desc.blob_index.get(pos) else {
            err = Some(Error::Format(format!("blob index has no entry for `{key}`")));
            return;
        };
        pos += 1;
        if entry.key != key || entry.offset + entry.len > values.len() {
            err = Some(Error::Format(format!(
                "blob entry `{}` does not match tensor `{key}`",
                entry.key
            )));
            return;
        }
        let vals = values[entry.offset..entry.offset + entry.len]
            .iter()
            .map(|&v| T::of(v as f64))
            .collect();
        if let Err(e) = t.fill_from(vals) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if pos != desc.blob_index.len() {
        return Err(Error::Format("blob index has extra entries".into()));
    }
    g.validate()?;
    Ok(g)
}

/// Paths of the descriptor and blob for a model stem (`<stem>.json`, `<stem>.bin`).
pub fn model_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn save_graph<T: Scalar>(graph: &ModelGraph<T>, stem: &Path) -> Result<()> {
    let (json, blob) = to_parts(graph)?;
    let (jp, bp) = model_paths(stem);
    if let Some(dir) = jp.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(jp, json)?;
    fs::write(bp, blob)?;
    Ok(())
}

pub fn load_graph<T: Scalar>(stem: &Path) -> Result<ModelGraph<T>> {
    let (jp, bp) = model_paths(stem);
    let json = fs::read_to_string(&jp)?;
    let blob = fs::read(&bp)?;
    from_parts(&json, &blob)
}
