//! Per-subject CSV records with columns `time,ppg,abp`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{median, BpTarget, SubjectRecord};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    time: f64,
    ppg: f64,
    abp: f64,
}

pub fn write_record_csv(rec: &SubjectRecord, path: &Path) -> Result<()> {
    let abp = rec
        .abp()
        .ok_or_else(|| Error::Signal(format!("subject {} has no ABP waveform to write", rec.subject_id)))?;
    let mut w = csv::Writer::from_path(path)?;
    for (i, (&ppg, &abp)) in rec.ppg.iter().zip(abp).enumerate() {
        w.serialize(Row {
            time: i as f64 / rec.fs,
            ppg,
            abp,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a record; the sampling rate is the inverse of the median time step.
pub fn load_record_csv(path: &Path, subject_id: &str) -> Result<SubjectRecord> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Vec<Row> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    if rows.len() < 2 {
        return Err(Error::Signal(format!("{}: need at least two samples", path.display())));
    }
    let steps: Vec<f64> = rows.windows(2).map(|w| w[1].time - w[0].time).collect();
    let dt = median(&steps);
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::Signal(format!("{}: time column must increase", path.display())));
    }
    if rows.iter().any(|r| !r.ppg.is_finite() || !r.abp.is_finite()) {
        return Err(Error::Signal(format!("{}: non-finite sample", path.display())));
    }
    let fs = (1.0 / dt * 1e6).round() / 1e6;
    SubjectRecord::new(
        subject_id,
        fs,
        rows.iter().map(|r| r.ppg).collect(),
        BpTarget::Waveform(rows.iter().map(|r| r.abp).collect()),
    )
}
