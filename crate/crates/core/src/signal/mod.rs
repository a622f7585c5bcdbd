//! PPG/ABP records, synthetic cohorts, windowing with plausibility checks,
//! label extraction and subject-wise splits.

pub mod io;
pub mod peaks;
pub mod preprocess;
pub mod spline;
pub mod split;
pub mod synth;

pub use io::{load_record_csv, write_record_csv};
pub use peaks::{find_peaks, find_valleys};
pub use preprocess::{
    align_record, align_xcorr, apply_shift, extract_labels, remove_baseline, segment_and_filter, PreprocessConfig,
};
pub use spline::CubicSpline;
pub use split::{finetune_split, subject_kfold, Fold, FtMode, FtSize, SplitDataset};
pub use synth::{synth_generate, synth_subject, SynthOptions, SynthTruth};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FS: f64 = 125.0;
pub const WINDOW_SECONDS: f64 = 5.0;

/// Samples per window at `fs`.
pub fn window_len(fs: f64) -> usize {
    (WINDOW_SECONDS * fs).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BpTarget {
    /// Continuous arterial pressure in mmHg, sample-aligned with the PPG.
    Waveform(Vec<f64>),
    /// Record-level cuff values only.
    Labels { sbp: f64, dbp: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub fs: f64,
    pub ppg: Vec<f64>,
    pub bp: BpTarget,
}

impl SubjectRecord {
    pub fn new(subject_id: impl Into<String>, fs: f64, ppg: Vec<f64>, bp: BpTarget) -> Result<Self> {
        let subject_id = subject_id.into();
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::Signal(format!(
                "subject {subject_id}: sampling rate must be positive, got {fs}"
            )));
        }
        if let BpTarget::Waveform(abp) = &bp {
            if abp.len() != ppg.len() {
                return Err(Error::Signal(format!(
                    "subject {subject_id}: ppg has {} samples but abp has {}",
                    ppg.len(),
                    abp.len()
                )));
            }
        }
        Ok(Self {
            subject_id,
            fs,
            ppg,
            bp,
        })
    }

    pub fn abp(&self) -> Option<&[f64]> {
        match &self.bp {
            BpTarget::Waveform(v) => Some(v),
            BpTarget::Labels { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Amplitude,
    PulsePressure,
    HeartRate,
    Beats,
    Ppg,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Amplitude => "amplitude",
            RejectReason::PulsePressure => "pulse pressure",
            RejectReason::HeartRate => "heart rate",
            RejectReason::Beats => "beats",
            RejectReason::Ppg => "ppg",
        }
    }
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub sbp: f64,
    pub dbp: f64,
    pub hr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub subject_id: String,
    /// Position of the window within its record.
    pub index: usize,
    /// Baseline-corrected PPG (raw PPG when rejected before correction).
    pub ppg: Vec<f64>,
    pub abp: Option<Vec<f64>>,
    pub labels: Option<Labels>,
    pub reason: Option<RejectReason>,
}

impl Window {
    pub fn is_valid(&self) -> bool {
        self.reason.is_none() && self.labels.is_some()
    }
}

/// Windows of a cohort plus the sampling rate they were cut at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSet {
    pub fs: f64,
    pub window_len: usize,
    pub windows: Vec<Window>,
}

impl WindowSet {
    pub fn valid(&self) -> impl Iterator<Item = &Window> {
        self.windows.iter().filter(|w| w.is_valid())
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for w in &self.windows {
            if !ids.contains(&w.subject_id) {
                ids.push(w.subject_id.clone());
            }
        }
        ids
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
