//! Subject-wise cross-validation folds and per-subject fine-tuning splits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    /// Held-out training subjects for early stopping and search updates.
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Fold {
    /// Every subject whose windows a model trained on this fold has seen.
    pub fn seen(&self) -> Vec<String> {
        self.train.iter().chain(&self.val).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub folds: Vec<Fold>,
}

impl SplitDataset {
    /// Manifest layout `{"0": {"train": [...], "val": [...], "test": [...]}, ...}`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<String, &Fold> = self.folds.iter().enumerate().map(|(i, f)| (i.to_string(), f)).collect();
        std::fs::write(path, serde_json::to_string_pretty(&map)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let map: BTreeMap<String, Fold> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut folds: Vec<(usize, Fold)> = map
            .into_iter()
            .map(|(k, f)| {
                k.parse::<usize>()
                    .map(|i| (i, f))
                    .map_err(|_| Error::Format(format!("fold key `{k}` is not an index")))
            })
            .collect::<Result<_>>()?;
        folds.sort_by_key(|(i, _)| *i);
        Ok(Self {
            folds: folds.into_iter().map(|(_, f)| f).collect(),
        })
    }
}

/// Shuffles subjects with `seed` and deals them round-robin into `k` test
/// folds. Per fold, `val_frac` of the remaining subjects (at least one) are
/// held out for validation.
pub fn subject_kfold(subjects: &[String], k: usize, val_frac: f64, seed: u64) -> Result<SplitDataset> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut ids = subjects.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} subjects cannot fill {k} folds",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let folds = (0..k)
        .map(|f| {
            let test: Vec<String> = ids.iter().skip(f).step_by(k).cloned().collect();
            let rest: Vec<String> = ids.iter().filter(|s| !test.contains(s)).cloned().collect();
            let n_val = ((rest.len() as f64 * val_frac).round() as usize).clamp(1, rest.len().saturating_sub(1).max(1));
            let (val, train) = if rest.len() > 1 {
                let (v, t) = rest.split_at(n_val);
                (v.to_vec(), t.to_vec())
            } else {
                (Vec::new(), rest)
            };
            Fold { train, val, test }
        })
        .collect();
    Ok(SplitDataset { folds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtMode {
    /// Evaluate on the last windows, train on earlier ones.
    Temporal,
    Shuffled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtSize {
    /// Train on all windows outside the evaluation share.
    Full,
    /// Train on a disjoint set the size of the evaluation share.
    Small,
}

pub const MIN_FT_WINDOWS: usize = 5;

/// Splits one subject's `n` windows into `(train, eval)` index lists, with
/// 20% of the windows for evaluation. Both lists are sorted.
pub fn finetune_split(n: usize, mode: FtMode, size: FtSize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < MIN_FT_WINDOWS {
        return Err(Error::InvalidArgument(format!(
            "fine-tuning needs at least {MIN_FT_WINDOWS} windows, got {n}"
        )));
    }
    let n_eval = ((n as f64 * 0.2).round() as usize).max(1);
    let order: Vec<usize> = match mode {
        FtMode::Temporal => (0..n).collect(),
        FtMode::Shuffled => {
            let mut v: Vec<usize> = (0..n).collect();
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            v
        }
    };
    let (rest, eval) = order.split_at(n - n_eval);
    let train: &[usize] = match size {
        FtSize::Full => rest,
        // closest in time to the evaluation chunk
        FtSize::Small => &rest[rest.len().saturating_sub(n_eval)..],
    };
    let mut train = train.to_vec();
    let mut eval = eval.to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kfold_sizes() {
        let ids: Vec<String> = (0..40).map(|i| format!("S{i:03}")).collect();
        let s = subject_kfold(&ids, 5, 0.2, 3).unwrap();
        for f in &s.folds {
            assert_eq!(f.test.len(), 8);
            assert_eq!(f.train.len() + f.val.len(), 32);
        }
        assert!(subject_kfold(&ids[..4], 5, 0.2, 3).is_err());
    }

    #[test]
    fn finetune_counts() {
        let (tr, ev) = finetune_split(75, FtMode::Temporal, FtSize::Full, 0).unwrap();
        assert_eq!((tr.len(), ev.len()), (60, 15));
        assert!(tr.iter().max() < ev.iter().min());
        let (tr, ev) = finetune_split(75, FtMode::Shuffled, FtSize::Small, 0).unwrap();
        assert_eq!((tr.len(), ev.len()), (15, 15));
        assert!(tr.iter().all(|i| !ev.contains(i)));
        assert!(finetune_split(4, FtMode::Temporal, FtSize::Full, 0).is_err());
    }
}
