//! Text reports: per-layer tables and cost/error listings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stages::ModelDir;
use crate::diffcore::{ModelGraph, Op};
use crate::error::Result;
use crate::eval::pareto::write_points_csv;
use crate::eval::{pareto_front, Objective, ParetoPoint, Stage};
use crate::mps::layer_bits;
use crate::nas::AltKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: String,
    pub kind: String,
    /// Operator kept at a search site (`C`, `DW`, `ID`), or `fixed`.
    pub operator: String,
    pub bypassed: bool,
    pub channels: usize,
    pub retained: f64,
    /// Weight precision, `float` when not quantized.
    pub bits: String,
}

/// One row per conv, linear or bypassed search site, in node order.
pub fn layer_table(g: &ModelGraph<f64>) -> Vec<LayerRow> {
    let bits = layer_bits(g);
    let mut rows = Vec::new();
    for node in &g.nodes {
        let (kind, channels) = match &node.op {
            Op::Conv(c) => ("conv1d", c.geom.out_ch),
            Op::Linear(l) => ("linear", l.out_features),
            Op::Identity if node.info.choice.is_some() => ("identity", 0),
            _ => continue,
        };
        let operator = node.info.choice.map_or("fixed", |(_, k)| k.tag()).to_string();
        let bypassed = matches!(node.info.choice, Some((_, AltKind::Identity)));
        let retained = match node.info.original_channels {
            Some(o) if o > 0 && !bypassed => channels as f64 / o as f64,
            _ => 1.0,
        };
        let b = bits
            .iter()
            .find(|(n, _)| *n == node.name)
            .and_then(|(_, b)| *b)
            .map_or("float".to_string(), |b| b.to_string());
        rows.push(LayerRow {
            layer: node.name.clone(),
            kind: kind.to_string(),
            operator,
            bypassed,
            channels,
            retained,
            bits: b,
        });
    }
    rows
}

fn find_models(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            if p.join("point.json").exists() && p.join("config.json").exists() {
                out.push(p.clone());
            }
            find_models(&p, out)?;
        }
    }
    Ok(())
}

/// Writes `<out>/summary/`: `layers_<model>.csv` per model, `costs.csv`
/// with every point, and the fronts `pareto.csv` (float models, parameter
/// cost) and `pareto_mps.csv` (quantized models, bit cost).
pub fn summarize(out_dir: &Path) -> Result<Vec<(String, Vec<LayerRow>)>> {
    let mut dirs = Vec::new();
    for stage in ["seed", "nas", "pit", "mps"] {
        find_models(&out_dir.join(stage), &mut dirs)?;
        if out_dir.join(stage).join("point.json").exists() {
            dirs.insert(dirs.len(), out_dir.join(stage));
        }
    }
    dirs.dedup();
    let sum_dir = out_dir.join("summary");
    std::fs::create_dir_all(&sum_dir)?;
    let mut tables = Vec::new();
    let mut points: Vec<ParetoPoint> = Vec::new();
    for d in dirs {
        let md = ModelDir::from_path(&d)?;
        let g = md.load()?;
        let rows = layer_table(&g);
        let mut w = csv::Writer::from_path(sum_dir.join(format!("layers_{}.csv", md.rel.replace('/', "_"))))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        points.push(md.point()?);
        tables.push((md.rel, rows));
    }
    write_points_csv(&points, &sum_dir.join("costs.csv"))?;
    let (quant, float): (Vec<ParetoPoint>, Vec<ParetoPoint>) = points.into_iter().partition(|p| p.stage == Stage::Mps);
    write_points_csv(&pareto_front(&float, Objective::Both), &sum_dir.join("pareto.csv"))?;
    write_points_csv(&pareto_front(&quant, Objective::Both), &sum_dir.join("pareto_mps.csv"))?;
    Ok(tables)
}
