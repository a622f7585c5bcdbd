//! Shared epoch loop for warm-up, search and fine-tuning phases.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{mse, Adam, AdamConfig, Mode, ModelGraph, ParamRole, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A set of `(input, target)` examples with fixed per-example shapes.
#[derive(Debug, Clone)]
pub struct Samples<T> {
    pub x: Vec<T>,
    pub y: Vec<T>,
    /// `(channels, length)` of one input.
    pub x_dims: (usize, usize),
    /// `(channels, length)` of one target.
    pub y_dims: (usize, usize),
}

impl<T: Scalar> Samples<T> {
    pub fn new(x: Vec<T>, y: Vec<T>, x_dims: (usize, usize), y_dims: (usize, usize)) -> Result<Self> {
        let (xs, ys) = (x_dims.0 * x_dims.1, y_dims.0 * y_dims.1);
        if xs == 0
            || ys == 0
            || !x.len().is_multiple_of(xs)
            || !y.len().is_multiple_of(ys)
            || x.len() / xs != y.len() / ys
        {
            return Err(Error::InvalidArgument(format!(
                "{} input values / {} target values do not match shapes {x_dims:?} / {y_dims:?}",
                x.len(),
                y.len()
            )));
        }
        Ok(Self { x, y, x_dims, y_dims })
    }

    pub fn empty(x_dims: (usize, usize), y_dims: (usize, usize)) -> Self {
        Self {
            x: Vec::new(),
            y: Vec::new(),
            x_dims,
            y_dims,
        }
    }

    pub fn len(&self) -> usize {
        self.x.len() / (self.x_dims.0 * self.x_dims.1)
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let (xs, ys) = (self.x_dims.0 * self.x_dims.1, self.y_dims.0 * self.y_dims.1);
        let mut out = Self::empty(self.x_dims, self.y_dims);
        for &i in idx {
            out.x.extend_from_slice(&self.x[i * xs..(i + 1) * xs]);
            out.y.extend_from_slice(&self.y[i * ys..(i + 1) * ys]);
        }
        out
    }

    /// Input and target tensors of the examples in `idx`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<T>, Tensor<T>) {
        let s = self.subset(idx);
        let n = idx.len();
        let x = Tensor::from_vec(&[n, self.x_dims.0, self.x_dims.1], s.x).expect("sized");
        let y = Tensor::from_vec(&[n, self.y_dims.0, self.y_dims.1], s.y).expect("sized");
        (x, y)
    }
}

#[derive(Debug, Clone)]
pub struct TrainData<T> {
    pub train: Samples<T>,
    pub val: Samples<T>,
}

/// One logged epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub task_loss: f64,
    pub reg_value: f64,
    pub val_mse: f64,
    pub expected_cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<Result<Vec<LogRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut buf = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        buf.flush()?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}

/// How architecture parameters are trained during a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchUpdate {
    /// Architecture parameters are not updated.
    Frozen,
    /// Updated on the same training batches as the weights.
    Joint,
    /// Updated on validation batches, alternating with weight batches.
    Alternate,
}

/// Quantity used for early stopping and checkpoint selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Monitor {
    ValMse,
    /// Validation MSE plus the weighted regularizer.
    ValObjective,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub epochs: usize,
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    pub lr_w: f64,
    pub lr_theta: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub arch: ArchUpdate,
    pub monitor: Monitor,
    /// L2 decay of activation clip bounds.
    pub clip_decay: f64,
    pub seed: u64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            patience: None,
            lr_w: 1e-3,
            lr_theta: 1e-2,
            batch_size: 32,
            lambda: 0.0,
            arch: ArchUpdate::Frozen,
            monitor: Monitor::ValMse,
            clip_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Differentiable cost term. Returns `R`; when `lambda` is given, also
/// accumulates `lambda * dR/dtheta` into the architecture gradients.
pub type Regularizer<'a, T> = &'a dyn Fn(&mut ModelGraph<T>, Option<T>) -> T;

/// Called at the start of every epoch with the phase-local epoch index.
pub type EpochHook<'a, T> = &'a mut dyn FnMut(&mut ModelGraph<T>, usize);

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
}

/// Mean squared error of the graph over a sample set (evaluation mode).
pub fn evaluate_mse<T: Scalar>(graph: &mut ModelGraph<T>, data: &Samples<T>) -> Result<f64> {
    let pred = predict(graph, data)?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(&data.y)
        .map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2))
        .sum::<f64>()
        / n)
}

/// Evaluation-mode outputs for every example, concatenated.
pub fn predict<T: Scalar>(graph: &mut ModelGraph<T>, data: &Samples<T>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(data.y.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, _) = data.batch(chunk);
        let y = graph.forward(&x, Mode::Eval)?;
        out.extend_from_slice(y.data());
    }
    graph.clear_cache();
    Ok(out)
}

fn batch_loss<T: Scalar>(graph: &mut ModelGraph<T>, data: &Samples<T>, idx: &[usize]) -> Result<f64> {
    let (x, y) = data.batch(idx);
    let pred = graph.forward(&x, Mode::Train)?;
    let (loss, grad) = mse(&pred, &y)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    graph.backward(&grad)?;
    Ok(loss.as_f64())
}

/// Runs one training phase and restores the best checkpoint at the end.
pub fn run_phase<T: Scalar>(
    graph: &mut ModelGraph<T>,
    data: &TrainData<T>,
    cfg: &PhaseConfig,
    reg: Option<Regularizer<'_, T>>,
    mut hook: Option<EpochHook<'_, T>>,
    epoch_offset: usize,
) -> Result<PhaseOutcome> {
    if data.train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if data.val.is_empty() {
        return Err(Error::EmptySplit("validation".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let lambda = T::of(cfg.lambda);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt_w = Adam::new(AdamConfig::with_lr(cfg.lr_w), &[ParamRole::Weight, ParamRole::Clip])
        .with_role_decay(ParamRole::Clip, cfg.clip_decay);
    let mut opt_a = Adam::new(AdamConfig::with_lr(cfg.lr_theta), &[ParamRole::Arch]);
    let train_arch = cfg.arch != ArchUpdate::Frozen && has_arch(graph);

    let score = |g: &mut ModelGraph<T>| -> Result<(f64, f64, f64)> {
        let val = evaluate_mse(g, &data.val)?;
        let r = reg.map_or(0.0, |f| f(g, None).as_f64());
        let s = match cfg.monitor {
            Monitor::ValMse => val,
            Monitor::ValObjective => val + cfg.lambda * r,
        };
        Ok((val, r, s))
    };

    let mut log = TrainLog::default();
    let (_, _, initial) = score(graph)?;
    let mut best = (graph.snapshot(), initial, 0usize);
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut train_idx: Vec<usize> = (0..data.train.len()).collect();
    let mut val_idx: Vec<usize> = (0..data.val.len()).collect();
    let mut val_pos = 0;

    for epoch in 0..cfg.epochs {
        if let Some(h) = hook.as_mut() {
            h(graph, epoch);
        }
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            graph.zero_grads();
            loss_sum += batch_loss(graph, &data.train, chunk)?;
            batches += 1;
            if train_arch && cfg.arch == ArchUpdate::Joint {
                if let Some(f) = reg {
                    f(graph, Some(lambda));
                }
                opt_a.step(graph)?;
            }
            opt_w.step(graph)?;
            if train_arch && cfg.arch == ArchUpdate::Alternate {
                if val_pos == 0 {
                    val_idx.shuffle(&mut rng);
                }
                let end = (val_pos + cfg.batch_size).min(val_idx.len());
                let vchunk = val_idx[val_pos..end].to_vec();
                val_pos = if end == val_idx.len() { 0 } else { end };
                graph.zero_grads();
                batch_loss(graph, &data.val, &vchunk)?;
                if let Some(f) = reg {
                    f(graph, Some(lambda));
                }
                opt_a.step(graph)?;
            }
        }
        graph.zero_grads();
        graph.clear_cache();
        let (val, r, s) = score(graph)?;
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("validation score at epoch {epoch}")));
        }
        log.rows.push(LogRow {
            epoch: epoch_offset + epoch,
            task_loss: loss_sum / batches as f64,
            reg_value: cfg.lambda * r,
            val_mse: val,
            expected_cost: r,
        });
        log::debug!(
            "epoch {} loss {:.5} val {:.5} cost {:.1}",
            epoch_offset + epoch,
            loss_sum / batches as f64,
            val,
            r
        );
        if s < best.1 {
            best = (graph.snapshot(), s, epoch + 1);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                stopped_early = true;
                break;
            }
        }
    }
    let (g, best_score, best_epoch) = best;
    *graph = g;
    Ok(PhaseOutcome {
        log,
        best_epoch,
        best_score,
        stopped_early,
    })
}

fn has_arch<T: Scalar>(graph: &mut ModelGraph<T>) -> bool {
    let mut any = false;
    graph.visit_tensors_mut(&mut |role, _, _| any |= role == ParamRole::Arch);
    any
}

/// Plain weight training with early stopping on validation MSE.
pub fn finetune<T: Scalar>(graph: &mut ModelGraph<T>, data: &TrainData<T>, cfg: &PhaseConfig) -> Result<PhaseOutcome> {
    let cfg = PhaseConfig {
        arch: ArchUpdate::Frozen,
        monitor: Monitor::ValMse,
        ..cfg.clone()
    };
    run_phase(graph, data, &cfg, None, None, 0)
}
