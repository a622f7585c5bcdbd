//! Subject-specific fine-tuning: evaluate on a held-out share of one test
//! subject's windows, fine-tune the weights on the rest, evaluate again.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{evaluate_model, Prepared};
use crate::diffcore::ModelGraph;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::signal::{finetune_split, FtMode, FtSize, Window};
use crate::train::{finetune, PhaseConfig, TrainData};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub mode: FtMode,
    pub size: FtSize,
    pub epochs: usize,
    pub lr_w: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self {
            mode: FtMode::Temporal,
            size: FtSize::Full,
            epochs: 200,
            lr_w: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub subject_id: String,
    pub pre: MetricsReport,
    pub post: MetricsReport,
    /// Hash of the evaluation windows; identical for both reports.
    pub eval_hash: String,
    pub n_train: usize,
    pub n_eval: usize,
}

fn window_hash(ws: &[&Window]) -> String {
    let mut h = Sha256::new();
    for w in ws {
        h.update(w.subject_id.as_bytes());
        h.update((w.index as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Fails with [`Error::Leakage`] when the subject is in `manifest` (the
/// subjects the model was trained on). Architecture and precision stay
/// frozen; only weights and clip bounds move.
pub fn finetune_subject(
    model: &ModelGraph<f64>,
    manifest: &[String],
    windows: &[&Window],
    prep: &Prepared,
    settings: &FinetuneSettings,
) -> Result<(FinetuneOutcome, ModelGraph<f64>)> {
    let subject = windows
        .first()
        .map(|w| w.subject_id.clone())
        .ok_or_else(|| Error::EmptySplit("subject has no windows".into()))?;
    if windows.iter().any(|w| w.subject_id != subject) {
        return Err(Error::InvalidArgument("windows of more than one subject".into()));
    }
    if manifest.contains(&subject) {
        return Err(Error::Leakage(subject));
    }
    let mut ordered = windows.to_vec();
    ordered.sort_by_key(|w| w.index);
    let (train_idx, eval_idx) = finetune_split(ordered.len(), settings.mode, settings.size, settings.seed)?;
    let train: Vec<&Window> = train_idx.iter().map(|&i| ordered[i]).collect();
    let eval: Vec<&Window> = eval_idx.iter().map(|&i| ordered[i]).collect();

    let mut g = model.snapshot();
    let pre = evaluate_model(&mut g, prep, &eval)?;
    if !train.is_empty() && settings.epochs > 0 {
        let s = prep.samples(&train)?;
        let data = TrainData {
            train: s.clone(),
            val: s,
        };
        let phase = PhaseConfig {
            epochs: settings.epochs,
            patience: None,
            lr_w: settings.lr_w,
            batch_size: settings.batch_size,
            seed: settings.seed,
            ..PhaseConfig::default()
        };
        finetune(&mut g, &data, &phase)?;
    }
    let post = evaluate_model(&mut g, prep, &eval)?;
    let outcome = FinetuneOutcome {
        subject_id: subject,
        pre,
        post,
        eval_hash: window_hash(&eval),
        n_train: train.len(),
        n_eval: eval.len(),
    };
    Ok((outcome, g))
}
