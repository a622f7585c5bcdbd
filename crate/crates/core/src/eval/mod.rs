//! Error metrics, the AAMI check, Pareto fronts and waveform smoothing.

pub mod filter;
pub mod pareto;

pub use filter::{adaptive_cutoff, butter_lowpass_filtfilt, smooth_output, DEFAULT_CUTOFF_COEF};
pub use pareto::{pareto_front, write_pareto_svg, Objective, ParetoPoint, Stage};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{extract_labels, PreprocessConfig, RejectReason};

pub const AAMI_MAX_ME: f64 = 5.0;
pub const AAMI_MAX_STD: f64 = 8.0;
pub const AAMI_MIN_SUBJECTS: usize = 85;

/// Error statistics for one target, in mmHg. `me` and `std` are of
/// `pred - truth`; `std` is the population deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mae: f64,
    pub me: f64,
    pub std: f64,
    pub n: usize,
}

impl ErrorStats {
    pub fn from_pairs(pred: &[f64], truth: &[f64]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} targets",
                pred.len(),
                truth.len()
            )));
        }
        if pred.is_empty() {
            return Err(Error::InvalidArgument("no prediction pairs".into()));
        }
        let n = pred.len() as f64;
        let err: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
        let mae = err.iter().map(|e| e.abs()).sum::<f64>() / n;
        let me = err.iter().sum::<f64>() / n;
        let std = (err.iter().map(|e| (e - me).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            mae,
            me,
            std,
            n: pred.len(),
        })
    }
}

/// One window's prediction against its reference labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpPair {
    pub subject_id: String,
    pub sbp_pred: f64,
    pub dbp_pred: f64,
    pub sbp_true: f64,
    pub dbp_true: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectStats {
    pub sbp: ErrorStats,
    pub dbp: ErrorStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sbp: ErrorStats,
    pub dbp: ErrorStats,
    pub n_windows: usize,
    pub per_subject: BTreeMap<String, SubjectStats>,
}

impl MetricsReport {
    pub fn mae_sbp(&self) -> f64 {
        self.sbp.mae
    }

    pub fn mae_dbp(&self) -> f64 {
        self.dbp.mae
    }

    pub fn n_subjects(&self) -> usize {
        self.per_subject.len()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// One row per subject plus an `all` row.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "subject", "n", "mae_sbp", "me_sbp", "std_sbp", "mae_dbp", "me_dbp", "std_dbp",
        ])?;
        let rows = self
            .per_subject
            .iter()
            .map(|(k, s)| (k.as_str(), s.sbp, s.dbp))
            .chain(std::iter::once(("all", self.sbp, self.dbp)));
        for (k, s, d) in rows {
            w.write_record([
                k.to_string(),
                s.n.to_string(),
                s.mae.to_string(),
                s.me.to_string(),
                s.std.to_string(),
                d.mae.to_string(),
                d.me.to_string(),
                d.std.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn stats_of(pairs: &[&BpPair]) -> Result<(ErrorStats, ErrorStats)> {
    let col = |f: fn(&BpPair) -> f64| pairs.iter().map(|p| f(p)).collect::<Vec<_>>();
    Ok((
        ErrorStats::from_pairs(&col(|p| p.sbp_pred), &col(|p| p.sbp_true))?,
        ErrorStats::from_pairs(&col(|p| p.dbp_pred), &col(|p| p.dbp_true))?,
    ))
}

pub fn compute_mae(pairs: &[BpPair]) -> Result<MetricsReport> {
    let all: Vec<&BpPair> = pairs.iter().collect();
    let (sbp, dbp) = stats_of(&all)?;
    let mut groups: BTreeMap<String, Vec<&BpPair>> = BTreeMap::new();
    for p in pairs {
        groups.entry(p.subject_id.clone()).or_default().push(p);
    }
    let per_subject = groups
        .into_iter()
        .map(|(k, v)| stats_of(&v).map(|(sbp, dbp)| (k, SubjectStats { sbp, dbp })))
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        sbp,
        dbp,
        n_windows: pairs.len(),
        per_subject,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AamiVerdict {
    pub pass: bool,
    pub note: Option<String>,
}

/// Passes iff `|me| <= 5` and `std <= 8` mmHg. Cohorts below 85 subjects
/// always carry a caveat.
pub fn aami_check(stats: &ErrorStats, n_subjects: usize) -> AamiVerdict {
    let pass = stats.me.abs() <= AAMI_MAX_ME && stats.std <= AAMI_MAX_STD;
    let note = (n_subjects < AAMI_MIN_SUBJECTS)
        .then(|| format!("cohort of {n_subjects} subjects is below the {AAMI_MIN_SUBJECTS} the standard requires"));
    AamiVerdict { pass, note }
}

/// Both targets must pass.
pub fn aami_report(report: &MetricsReport) -> AamiVerdict {
    let s = aami_check(&report.sbp, report.n_subjects());
    let d = aami_check(&report.dbp, report.n_subjects());
    AamiVerdict {
        pass: s.pass && d.pass,
        note: s.note,
    }
}

/// SBP/DBP of a reconstructed waveform: smoothing, then the unmodified
/// label extractor.
pub fn waveform_labels(
    pred: &[f64],
    fs: f64,
    coef: f64,
    cfg: &PreprocessConfig,
) -> Result<std::result::Result<(f64, f64), RejectReason>> {
    let smooth = smooth_output(pred, fs, coef)?;
    Ok(extract_labels(&smooth, fs, cfg))
}
