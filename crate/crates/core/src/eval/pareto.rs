use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Seed,
    Nas,
    Pit,
    Mps,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Seed => "seed",
            Stage::Nas => "nas",
            Stage::Pit => "pit",
            Stage::Mps => "mps",
        }
    }
}

/// A trained model on the cost/error plane. Cost is a parameter count, or
/// total weight bits for quantized models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub cost: f64,
    pub mae_sbp: f64,
    pub mae_dbp: f64,
    pub stage: Stage,
    pub lambda: f64,
    pub model_ref: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Sbp,
    Dbp,
    /// Both errors at once (three-way dominance).
    Both,
}

impl ParetoPoint {
    fn errors(&self, obj: Objective) -> Vec<f64> {
        match obj {
            Objective::Sbp => vec![self.mae_sbp],
            Objective::Dbp => vec![self.mae_dbp],
            Objective::Both => vec![self.mae_sbp, self.mae_dbp],
        }
    }

    /// No worse on every axis and better on at least one.
    pub fn dominates(&self, other: &Self, obj: Objective) -> bool {
        let a = std::iter::once(self.cost).chain(self.errors(obj));
        let b: Vec<f64> = std::iter::once(other.cost).chain(other.errors(obj)).collect();
        let mut strict = false;
        for (x, y) in a.zip(b) {
            if x > y {
                return false;
            }
            strict |= x < y;
        }
        strict
    }
}

/// Non-dominated subset, ordered by cost (input order among equal costs).
/// Points equal on every axis are all kept.
pub fn pareto_front(points: &[ParetoPoint], obj: Objective) -> Vec<ParetoPoint> {
    let mut front: Vec<ParetoPoint> = points
        .iter()
        .filter(|p| !points.iter().any(|q| q.dominates(p, obj)))
        .cloned()
        .collect();
    front.sort_by(|a, b| a.cost.total_cmp(&b.cost));
    front
}

pub fn write_points_csv(points: &[ParetoPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points_csv(path: &Path) -> Result<Vec<ParetoPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Cost-vs-MAE scatter on a log cost axis; front members are filled.
pub fn write_pareto_svg(points: &[ParetoPoint], obj: Objective, path: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let err = |p: &ParetoPoint| match obj {
        Objective::Dbp => p.mae_dbp,
        _ => p.mae_sbp,
    };
    let front = pareto_front(points, obj);
    let (w, h, m) = (640.0, 420.0, 50.0);
    let lx: Vec<f64> = points.iter().map(|p| p.cost.max(1.0).log10()).collect();
    let (x0, x1) = bounds(&lx);
    let (y0, y1) = bounds(&points.iter().map(err).collect::<Vec<_>>());
    let sx = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |v: f64| h - m - (v - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
        b = h - m,
        r = w - m
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12">log10(cost)</text>"#,
        w / 2.0,
        h - 12.0
    );
    let label = match obj {
        Objective::Dbp => "MAE DBP [mmHg]",
        _ => "MAE SBP [mmHg]",
    };
    let _ = writeln!(s, r#"<text x="8" y="{}" font-size="12">{label}</text>"#, m - 16.0);
    for (p, x) in points.iter().zip(&lx) {
        let color = match p.stage {
            Stage::Seed => "black",
            Stage::Nas => "#1f77b4",
            Stage::Pit => "#2ca02c",
            Stage::Mps => "#d62728",
        };
        let fill = if front.contains(p) { color } else { "none" };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" stroke="{color}" fill="{fill}"><title>{} {} lambda={:e}</title></circle>"#,
            sx(*x),
            sy(err(p)),
            p.model_ref,
            p.stage.as_str(),
            p.lambda
        );
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}
