//! Stage runners and the on-disk artifact layout.
//!
//! ```text
//! <out>/seed/                       trained seed network
//! <out>/nas/lam03/                  one dir per lambda
//! <out>/pit/<input>/lam03/          one dir per (input model, lambda)
//! <out>/mps/<input>/lam03/
//! <out>/<stage>/points.csv          points produced by the stage
//! <out>/<stage>/front.csv           combined front up to the stage
//! ```
//!
//! Every model dir holds `config.json`, `model.json`/`model.bin`,
//! `log.csv`, `point.json` and `manifest.json` (the subjects whose windows
//! were used for training). A dir whose recorded hash matches the current
//! inputs is reused.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arch::build_seed;
use super::data::{evaluate_model, Prepared};
use super::ExperimentConfig;
use crate::diffcore::serialize::model_paths;
use crate::diffcore::{load_graph, save_graph, ModelGraph};
use crate::error::{Error, Result};
use crate::eval::pareto::{read_points_csv, write_points_csv};
use crate::eval::{pareto_front, Objective, ParetoPoint, Stage};
use crate::mps::{self, MpsConfig};
use crate::nas::{run_nas, NasConfig};
use crate::pit::{export_pruned, pit_train, PitConfig};
use crate::train::{run_phase, PhaseConfig, TrainLog};

/// Record written next to every trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub lambda: f64,
    /// Model the stage started from, as a dir relative to the output root.
    pub input: Option<String>,
    pub hash: String,
    pub settings: serde_json::Value,
}

/// A trained model directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDir {
    pub root: PathBuf,
    /// Path relative to `root`, `/`-separated; doubles as the model ref.
    pub rel: String,
}

impl ModelDir {
    pub fn new(root: &Path, rel: impl Into<String>) -> Self {
        Self {
            root: root.to_path_buf(),
            rel: rel.into(),
        }
    }

    /// Splits a model dir path into output root and ref, using the fixed
    /// depth of each stage's layout.
    pub fn from_path(path: &Path) -> Result<Self> {
        let parts: Vec<String> = path
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        let n = parts.len();
        let at = |depth: usize, names: &[&str]| n >= depth && names.contains(&parts[n - depth].as_str());
        let depth = if at(1, &["seed"]) {
            1
        } else if at(2, &["nas"]) {
            2
        } else if at(3, &["pit", "mps"]) {
            3
        } else {
            return Err(Error::InvalidArgument(format!(
                "{} is not a model directory",
                path.display()
            )));
        };
        let root: PathBuf = parts[..n - depth].iter().collect();
        Ok(Self::new(&root, parts[n - depth..].join("/")))
    }

    pub fn path(&self) -> PathBuf {
        self.rel.split('/').fold(self.root.clone(), |p, s| p.join(s))
    }

    pub fn stem(&self) -> PathBuf {
        self.path().join("model")
    }

    pub fn load(&self) -> Result<ModelGraph<f64>> {
        load_graph(&self.stem())
    }

    pub fn point(&self) -> Result<ParetoPoint> {
        Ok(serde_json::from_str(&std::fs::read_to_string(
            self.path().join("point.json"),
        )?)?)
    }

    pub fn record(&self) -> Result<StageRecord> {
        Ok(serde_json::from_str(&std::fs::read_to_string(
            self.path().join("config.json"),
        )?)?)
    }

    /// Subjects whose windows trained this model.
    pub fn manifest(&self) -> Result<Vec<String>> {
        let p = self.path().join("manifest.json");
        if !p.exists() {
            return Err(Error::MissingArtifact(p.display().to_string()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    /// Content hash of the stored model.
    pub fn model_hash(&self) -> Result<String> {
        let (j, b) = model_paths(&self.stem());
        let mut h = Sha256::new();
        h.update(std::fs::read(j)?);
        h.update(std::fs::read(b)?);
        Ok(hex::encode(h.finalize()))
    }

    fn is_current(&self, hash: &str) -> bool {
        self.path().join("point.json").exists() && self.record().is_ok_and(|r| r.hash == hash)
    }
}

#[derive(Debug, Clone, Default)]
pub struct StageOutput {
    pub points: Vec<ParetoPoint>,
    pub dirs: Vec<ModelDir>,
    /// Runs reused from earlier invocations.
    pub skipped: usize,
}

fn hash_of(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Costs: parameters for float models, weight bits once quantized.
pub fn model_cost(g: &mut ModelGraph<f64>) -> f64 {
    if g.has_quant() {
        mps::bit_cost(g, None)
    } else {
        g.param_count() as f64
    }
}

fn persist(
    dir: &ModelDir,
    g: &ModelGraph<f64>,
    log: &TrainLog,
    record: &StageRecord,
    prep: &Prepared,
) -> Result<ParetoPoint> {
    let path = dir.path();
    std::fs::create_dir_all(&path)?;
    // metrics come from the stored (f32) weights so points match the files
    save_graph(g, &dir.stem())?;
    let mut g = dir.load()?;
    let test: Vec<_> = prep.test.iter().collect();
    let report = evaluate_model(&mut g, prep, &test)?;
    let point = ParetoPoint {
        cost: model_cost(&mut g),
        mae_sbp: report.mae_sbp(),
        mae_dbp: report.mae_dbp(),
        stage: record.stage,
        lambda: record.lambda,
        model_ref: dir.rel.clone(),
    };
    log.write_csv(&path.join("log.csv"))?;
    std::fs::write(
        path.join("manifest.json"),
        serde_json::to_string_pretty(&prep.fold.seen())?,
    )?;
    std::fs::write(path.join("normalizer.json"), serde_json::to_string_pretty(&prep.norm)?)?;
    report.save_json(&path.join("metrics.json"))?;
    std::fs::write(path.join("point.json"), serde_json::to_string_pretty(&point)?)?;
    // written last: its hash marks the dir complete
    std::fs::write(path.join("config.json"), serde_json::to_string_pretty(record)?)?;
    log::info!(
        "{}: cost {} mae sbp {:.2} dbp {:.2}",
        dir.rel,
        point.cost,
        point.mae_sbp,
        point.mae_dbp
    );
    Ok(point)
}

fn seed_settings(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::json!({
        "arch": cfg.seed_arch,
        "channels": cfg.channels,
        "kernel": cfg.kernel(),
        "epochs": cfg.seed_epochs,
        "patience": cfg.patience,
        "lr_w": cfg.lr_w,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
    })
}

fn run_seed(cfg: &ExperimentConfig, prep: &Prepared) -> Result<StageOutput> {
    let dir = ModelDir::new(&cfg.out_dir, "seed");
    let settings = seed_settings(cfg);
    let hash = hash_of(&["seed", &settings.to_string(), &prep.data_hash]);
    if dir.is_current(&hash) {
        return Ok(StageOutput {
            points: vec![dir.point()?],
            dirs: vec![dir],
            skipped: 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = build_seed::<f64, _>(cfg.seed_arch, prep.window_len, &cfg.channels, cfg.kernel(), &mut rng)?;
    let phase = PhaseConfig {
        epochs: cfg.seed_epochs,
        patience: Some(cfg.patience),
        lr_w: cfg.lr_w,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        ..PhaseConfig::default()
    };
    let log = run_phase(&mut g, &prep.data, &phase, None, None, 0)?.log;
    let record = StageRecord {
        stage: Stage::Seed,
        lambda: 0.0,
        input: None,
        hash,
        settings,
    };
    let point = persist(&dir, &g, &log, &record, prep)?;
    Ok(StageOutput {
        points: vec![point],
        dirs: vec![dir],
        skipped: 0,
    })
}

fn stage_dir(stage: Stage) -> &'static str {
    stage.as_str()
}

fn read_stage_points(cfg: &ExperimentConfig, stage: Stage) -> Result<Vec<ParetoPoint>> {
    let p = cfg.out_dir.join(stage_dir(stage)).join("points.csv");
    if !p.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} (run the {} stage first)",
            p.display(),
            stage.as_str()
        )));
    }
    read_points_csv(&p)
}

/// Next-stage inputs from a combined front: lowest SBP error, lowest DBP
/// error, the seed, and optionally the smallest model. Duplicates dropped.
pub fn select_inputs(points: &[ParetoPoint], include_smallest: bool) -> Vec<ParetoPoint> {
    let front = pareto_front(points, Objective::Both);
    let mut picks: Vec<&ParetoPoint> = Vec::new();
    let by = |f: fn(&ParetoPoint) -> f64| front.iter().min_by(|a, b| f(a).total_cmp(&f(b)));
    picks.extend(by(|p| p.mae_sbp));
    picks.extend(by(|p| p.mae_dbp));
    picks.extend(points.iter().find(|p| p.stage == Stage::Seed));
    if include_smallest {
        picks.extend(by(|p| p.cost));
    }
    let mut out: Vec<ParetoPoint> = Vec::new();
    for p in picks {
        if !out.iter().any(|q| q.model_ref == p.model_ref) {
            out.push(p.clone());
        }
    }
    out
}

fn finish_stage(cfg: &ExperimentConfig, stage: Stage, out: &StageOutput, earlier: &[ParetoPoint]) -> Result<()> {
    let dir = cfg.out_dir.join(stage_dir(stage));
    std::fs::create_dir_all(&dir)?;
    write_points_csv(&out.points, &dir.join("points.csv"))?;
    let mut all = earlier.to_vec();
    all.extend(out.points.iter().cloned());
    // float and quantized costs are not comparable, so quantized stages
    // get their own front
    let comparable: Vec<ParetoPoint> = if stage == Stage::Mps { out.points.clone() } else { all };
    write_points_csv(&pareto_front(&comparable, Objective::Both), &dir.join("front.csv"))
}

fn tag(rel: &str) -> String {
    rel.replace('/', "_")
}

/// Runs one stage over its lambda grid. `nas` trains the seed first;
/// `pit` and `mps` need the points of the earlier stages.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage, prep: &Prepared) -> Result<StageOutput> {
    cfg.validate()?;
    match stage {
        Stage::Seed => {
            let out = run_seed(cfg, prep)?;
            finish_stage(cfg, stage, &out, &[])?;
            Ok(out)
        }
        Stage::Nas => {
            let seed = run_seed(cfg, prep)?;
            finish_stage(cfg, Stage::Seed, &seed, &[])?;
            let seed_dir = &seed.dirs[0];
            let seed_hash = seed_dir.model_hash()?;
            let seed_graph = seed_dir.load()?;
            let mut out = StageOutput::default();
            for (i, &lambda) in cfg.nas_lambdas.iter().enumerate() {
                let ncfg = NasConfig {
                    lambda,
                    warmup_epochs: cfg.warmup_epochs,
                    search_epochs: cfg.search_epochs,
                    finetune_epochs: cfg.finetune_epochs,
                    patience: cfg.patience,
                    lr_w: cfg.lr_w,
                    lr_theta: cfg.lr_theta,
                    batch_size: cfg.batch_size,
                    seed: cfg.seed.wrapping_add(i as u64),
                };
                let settings = serde_json::to_value(&ncfg)?;
                let dir = ModelDir::new(&cfg.out_dir, format!("nas/lam{i:02}"));
                let hash = hash_of(&["nas", &settings.to_string(), &seed_hash, &prep.data_hash]);
                if dir.is_current(&hash) {
                    out.points.push(dir.point()?);
                    out.dirs.push(dir);
                    out.skipped += 1;
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(ncfg.seed ^ 0x5eed);
                let (g, log) = run_nas(&seed_graph, &prep.data, &ncfg, &mut rng)?;
                let record = StageRecord {
                    stage,
                    lambda,
                    input: Some(seed_dir.rel.clone()),
                    hash,
                    settings,
                };
                out.points.push(persist(&dir, &g, &log, &record, prep)?);
                out.dirs.push(dir);
            }
            finish_stage(cfg, stage, &out, &seed.points)?;
            Ok(out)
        }
        Stage::Pit | Stage::Mps => {
            let mut earlier = read_stage_points(cfg, Stage::Seed)?;
            earlier.extend(read_stage_points(cfg, Stage::Nas)?);
            if stage == Stage::Mps {
                earlier.extend(read_stage_points(cfg, Stage::Pit)?);
            }
            let inputs = select_inputs(&earlier, cfg.include_smallest);
            let grid = if stage == Stage::Pit {
                &cfg.pit_lambdas
            } else {
                &cfg.mps_lambdas
            };
            let mut out = StageOutput::default();
            for input in &inputs {
                let src = ModelDir::new(&cfg.out_dir, input.model_ref.clone());
                let src_hash = src.model_hash()?;
                let base = src.load()?;
                for (i, &lambda) in grid.iter().enumerate() {
                    let seed = cfg.seed.wrapping_add(i as u64);
                    let settings = if stage == Stage::Pit {
                        serde_json::to_value(PitConfig {
                            lambda,
                            search_epochs: cfg.search_epochs,
                            finetune_epochs: cfg.finetune_epochs,
                            patience: cfg.patience,
                            lr_w: cfg.lr_w,
                            lr_theta: cfg.lr_theta,
                            batch_size: cfg.batch_size,
                            seed,
                        })?
                    } else {
                        serde_json::to_value(MpsConfig {
                            lambda,
                            bits: cfg.bits.clone(),
                            search_epochs: cfg.search_epochs,
                            finetune_epochs: cfg.finetune_epochs,
                            patience: cfg.patience,
                            lr_w: cfg.lr_w,
                            lr_theta: cfg.lr_theta,
                            batch_size: cfg.batch_size,
                            alpha_init: cfg.alpha_init,
                            seed,
                            ..MpsConfig::default()
                        })?
                    };
                    let dir = ModelDir::new(
                        &cfg.out_dir,
                        format!("{}/{}/lam{i:02}", stage.as_str(), tag(&input.model_ref)),
                    );
                    let hash = hash_of(&[stage.as_str(), &settings.to_string(), &src_hash, &prep.data_hash]);
                    if dir.is_current(&hash) {
                        out.points.push(dir.point()?);
                        out.dirs.push(dir);
                        out.skipped += 1;
                        continue;
                    }
                    let mut g = base.snapshot();
                    let (g, log) = if stage == Stage::Pit {
                        let pcfg: PitConfig = serde_json::from_value(settings.clone())?;
                        let log = pit_train(&mut g, &prep.data, &pcfg)?;
                        (export_pruned(&g)?, log)
                    } else {
                        let mcfg: MpsConfig = serde_json::from_value(settings.clone())?;
                        mps::prepare(&mut g, &mcfg.bits, mcfg.alpha_init)?;
                        let log = mps::mps_train(&mut g, &prep.data, &mcfg)?;
                        (g, log)
                    };
                    let record = StageRecord {
                        stage,
                        lambda,
                        input: Some(input.model_ref.clone()),
                        hash,
                        settings,
                    };
                    out.points.push(persist(&dir, &g, &log, &record, prep)?);
                    out.dirs.push(dir);
                }
            }
            finish_stage(cfg, stage, &out, &earlier)?;
            Ok(out)
        }
    }
}
