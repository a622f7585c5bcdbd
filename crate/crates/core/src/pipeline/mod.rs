//! End-to-end flow: seed training, architecture search sweep, pruning
//! sweep, precision search sweep, fine-tuning and export, with artifacts on
//! disk.

pub mod arch;
pub mod data;
pub mod finetune;
pub mod stages;
pub mod summary;

pub use arch::{build_seed, resnet1d, unet1d, SeedArch};
pub use data::{evaluate_model, load_prepared, Normalizer, Prepared};
pub use finetune::{finetune_subject, FinetuneOutcome};
pub use stages::{run_stage, select_inputs, ModelDir, StageOutput};
pub use summary::{summarize, LayerRow};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DEFAULT_CUTOFF_COEF;
use crate::mps::{ALPHA_INIT, DEFAULT_BITS};
use crate::signal::{FtMode, FtSize};

/// `n` log-spaced values from `lo` to `hi`, both included.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..n)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed_arch: SeedArch,
    /// Channels per level (residual block or U-Net level).
    pub channels: Vec<usize>,
    /// Conv kernel; `None` picks 5 for resnet1d and 3 for unet1d.
    pub kernel: Option<usize>,
    pub nas_lambdas: Vec<f64>,
    pub pit_lambdas: Vec<f64>,
    pub mps_lambdas: Vec<f64>,
    pub seed_epochs: usize,
    pub warmup_epochs: usize,
    pub search_epochs: usize,
    pub finetune_epochs: usize,
    pub patience: usize,
    pub lr_w: f64,
    pub lr_theta: f64,
    pub batch_size: usize,
    pub bits: Vec<u32>,
    pub alpha_init: f64,
    /// Also feed the smallest front model into the next stage.
    pub include_smallest: bool,
    pub cutoff_coef: f64,
    pub ft_mode: FtMode,
    pub ft_size: FtSize,
    pub ft_epochs: usize,
    /// Window file written by `preprocess`.
    pub windows: PathBuf,
    /// Fold manifest written by `preprocess`.
    pub splits: PathBuf,
    pub fold: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed_arch: SeedArch::Resnet1d,
            channels: vec![16, 32, 64],
            kernel: None,
            nas_lambdas: logspace(1e-11, 1e-7, 18),
            pit_lambdas: logspace(1e-11, 1e-7, 18),
            mps_lambdas: logspace(1e-12, 1e-8, 9),
            seed_epochs: 200,
            warmup_epochs: 20,
            search_epochs: 200,
            finetune_epochs: 200,
            patience: 40,
            lr_w: 1e-3,
            lr_theta: 1e-2,
            batch_size: 32,
            bits: DEFAULT_BITS.to_vec(),
            alpha_init: ALPHA_INIT,
            include_smallest: false,
            cutoff_coef: DEFAULT_CUTOFF_COEF,
            ft_mode: FtMode::Temporal,
            ft_size: FtSize::Full,
            ft_epochs: 200,
            windows: PathBuf::from("windows.json"),
            splits: PathBuf::from("splits.json"),
            fold: 0,
            out_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn kernel(&self) -> usize {
        self.kernel.unwrap_or(match self.seed_arch {
            SeedArch::Resnet1d => 5,
            SeedArch::Unet1d => 3,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidArgument("channels must be non-empty and positive".into()));
        }
        let bad = |v: &[f64]| v.iter().any(|l| !l.is_finite() || *l < 0.0);
        if bad(&self.nas_lambdas) || bad(&self.pit_lambdas) || bad(&self.mps_lambdas) {
            return Err(Error::InvalidArgument("lambda grids must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}
