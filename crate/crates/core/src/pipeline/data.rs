//! Model inputs and targets built from windows, label normalization and
//! evaluation of model outputs against window labels.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExperimentConfig, SeedArch};
use crate::diffcore::ModelGraph;
use crate::error::{Error, Result};
use crate::eval::{compute_mae, waveform_labels, BpPair, MetricsReport};
use crate::signal::{mean_std, Fold, PreprocessConfig, SplitDataset, Window, WindowSet};
use crate::train::{predict, Samples, TrainData};

/// Affine target scaling fitted on training windows, one entry per target
/// channel (`[sbp, dbp]`, or `[abp]` for waveforms).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn forward(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn inverse(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

/// Zero-mean, unit-variance PPG truncated to `len` samples. PPG amplitude
/// carries no calibrated meaning, so each window is scaled on its own.
pub fn standardize_ppg(ppg: &[f64], len: usize) -> Vec<f64> {
    let x = &ppg[..len];
    let (m, s) = mean_std(x);
    let s = if s > 0.0 { s } else { 1.0 };
    x.iter().map(|v| (v - m) / s).collect()
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub arch: SeedArch,
    pub fs: f64,
    pub window_len: usize,
    pub input_len: usize,
    pub cutoff_coef: f64,
    pub norm: Normalizer,
    pub data: TrainData<f64>,
    pub fold: Fold,
    /// Valid windows of the test subjects.
    pub test: Vec<Window>,
    /// Hash of the windows and fold this data was built from.
    pub data_hash: String,
}

impl Prepared {
    pub fn y_dims(&self) -> (usize, usize) {
        match self.arch {
            SeedArch::Resnet1d => (2, 1),
            SeedArch::Unet1d => (1, self.input_len),
        }
    }

    fn raw_target(&self, w: &Window) -> Result<Vec<f64>> {
        match self.arch {
            SeedArch::Resnet1d => {
                let l = w
                    .labels
                    .ok_or_else(|| Error::Signal(format!("window {} has no labels", w.index)))?;
                Ok(vec![l.sbp, l.dbp])
            }
            SeedArch::Unet1d => {
                let abp = w.abp.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "unet1d needs ABP waveforms; subject {} only has labels",
                        w.subject_id
                    ))
                })?;
                Ok(abp[..self.input_len].to_vec())
            }
        }
    }

    /// Normalized samples for `windows`.
    pub fn samples(&self, windows: &[&Window]) -> Result<Samples<f64>> {
        let mut x = Vec::with_capacity(windows.len() * self.input_len);
        let mut y = Vec::new();
        let (yc, yl) = self.y_dims();
        for w in windows {
            x.extend(standardize_ppg(&w.ppg, self.input_len));
            let t = self.raw_target(w)?;
            for c in 0..yc {
                y.extend(t[c * yl..(c + 1) * yl].iter().map(|&v| self.norm.forward(c, v)));
            }
        }
        Samples::new(x, y, (1, self.input_len), (yc, yl))
    }

    /// Turns concatenated normalized model outputs for `windows` into
    /// SBP/DBP pairs. Waveform outputs are smoothed and labeled; windows
    /// whose reconstruction yields too few beats are skipped.
    pub fn pairs(&self, outputs: &[f64], windows: &[&Window]) -> Result<Vec<BpPair>> {
        let (yc, yl) = self.y_dims();
        let per = yc * yl;
        if outputs.len() != per * windows.len() {
            return Err(Error::InvalidArgument(format!(
                "{} outputs for {} windows of {per}",
                outputs.len(),
                windows.len()
            )));
        }
        let cfg = PreprocessConfig::default();
        let mut pairs = Vec::with_capacity(windows.len());
        for (w, out) in windows.iter().zip(outputs.chunks(per)) {
            let truth = w
                .labels
                .ok_or_else(|| Error::Signal(format!("window {} has no labels", w.index)))?;
            let (sbp, dbp) = match self.arch {
                SeedArch::Resnet1d => (self.norm.inverse(0, out[0]), self.norm.inverse(1, out[1])),
                SeedArch::Unet1d => {
                    let wave: Vec<f64> = out.iter().map(|&v| self.norm.inverse(0, v)).collect();
                    match waveform_labels(&wave, self.fs, self.cutoff_coef, &cfg)? {
                        Ok(l) => l,
                        Err(reason) => {
                            log::debug!("{} window {}: prediction rejected ({reason})", w.subject_id, w.index);
                            continue;
                        }
                    }
                }
            };
            pairs.push(BpPair {
                subject_id: w.subject_id.clone(),
                sbp_pred: sbp,
                dbp_pred: dbp,
                sbp_true: truth.sbp,
                dbp_true: truth.dbp,
            });
        }
        if pairs.is_empty() {
            return Err(Error::Signal("no prediction produced usable labels".into()));
        }
        Ok(pairs)
    }
}

fn fit_normalizer(arch: SeedArch, targets: &[Vec<f64>], input_len: usize) -> Normalizer {
    let channels = match arch {
        SeedArch::Resnet1d => 2,
        SeedArch::Unet1d => 1,
    };
    let per = match arch {
        SeedArch::Resnet1d => 1,
        SeedArch::Unet1d => input_len,
    };
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for c in 0..channels {
        let v: Vec<f64> = targets
            .iter()
            .flat_map(|t| t[c * per..(c + 1) * per].iter().copied())
            .collect();
        let (m, s) = mean_std(&v);
        mean.push(m);
        std.push(if s > 0.0 { s } else { 1.0 });
    }
    Normalizer { mean, std }
}

/// Builds training/validation samples and the test window list for one
/// fold. Only valid windows are used.
pub fn prepare_fold(set: &WindowSet, fold: &Fold, arch: SeedArch, levels: usize, cutoff_coef: f64) -> Result<Prepared> {
    for t in &fold.test {
        if fold.train.contains(t) || fold.val.contains(t) {
            return Err(Error::Leakage(t.clone()));
        }
    }
    let pick = |ids: &[String]| -> Vec<&Window> { set.valid().filter(|w| ids.contains(&w.subject_id)).collect() };
    let (train, val, test) = (pick(&fold.train), pick(&fold.val), pick(&fold.test));
    for (name, v) in [("train", &train), ("validation", &val), ("test", &test)] {
        if v.is_empty() {
            return Err(Error::EmptySplit(format!("{name} split has no valid windows")));
        }
    }
    let input_len = arch.input_len(set.window_len, levels);
    let mut prep = Prepared {
        arch,
        fs: set.fs,
        window_len: set.window_len,
        input_len,
        cutoff_coef,
        norm: Normalizer {
            mean: vec![0.0; 2],
            std: vec![1.0; 2],
        },
        data: TrainData {
            train: Samples::empty((1, input_len), (1, 1)),
            val: Samples::empty((1, input_len), (1, 1)),
        },
        fold: fold.clone(),
        test: test.iter().map(|w| (*w).clone()).collect(),
        data_hash: String::new(),
    };
    let targets = train.iter().map(|w| prep.raw_target(w)).collect::<Result<Vec<_>>>()?;
    prep.norm = fit_normalizer(arch, &targets, input_len);
    prep.data = TrainData {
        train: prep.samples(&train)?,
        val: prep.samples(&val)?,
    };
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(fold)?);
    for w in train.iter().chain(&val).chain(&test) {
        h.update(w.subject_id.as_bytes());
        h.update((w.index as u64).to_le_bytes());
        for v in &w.ppg {
            h.update(v.to_le_bytes());
        }
        if let Some(l) = w.labels {
            h.update(l.sbp.to_le_bytes());
            h.update(l.dbp.to_le_bytes());
        }
    }
    prep.data_hash = hex::encode(h.finalize());
    Ok(prep)
}

/// Reads the window file and fold manifest named in the config.
pub fn load_prepared(cfg: &ExperimentConfig) -> Result<(Prepared, WindowSet)> {
    let set = WindowSet::load(&cfg.windows)?;
    let splits = SplitDataset::load(&cfg.splits)?;
    let fold = splits.folds.get(cfg.fold).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "fold {} requested, manifest has {}",
            cfg.fold,
            splits.folds.len()
        ))
    })?;
    let prep = prepare_fold(&set, fold, cfg.seed_arch, cfg.channels.len() - 1, cfg.cutoff_coef)?;
    Ok((prep, set))
}

/// Float (or fake-quantized) model metrics on `windows`.
pub fn evaluate_model(g: &mut ModelGraph<f64>, prep: &Prepared, windows: &[&Window]) -> Result<MetricsReport> {
    let s = prep.samples(windows)?;
    let out = predict(g, &s)?;
    compute_mae(&prep.pairs(&out, windows)?)
}
