use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ppgnas::eval::pareto::{read_points_csv, write_points_csv};
use ppgnas::eval::{
    aami_report, compute_mae, pareto_front, waveform_labels, write_pareto_svg, BpPair, Objective, ParetoPoint, Stage,
};
use ppgnas::int_runtime::QuantizedModel;
use ppgnas::mps::export_quantized;
use ppgnas::pipeline::data::standardize_ppg;
use ppgnas::pipeline::finetune::FinetuneSettings;
use ppgnas::pipeline::{evaluate_model, finetune_subject, load_prepared, run_stage, summarize, ModelDir, Normalizer};
use ppgnas::signal::split::MIN_FT_WINDOWS;
use ppgnas::signal::window_len;
use ppgnas::signal::{
    align_record, load_record_csv, segment_and_filter, subject_kfold, synth_generate, write_record_csv,
    PreprocessConfig, SynthOptions, Window, WindowSet, DEFAULT_FS,
};
use serde::Serialize;

use crate::config::ConfigArgs;

pub fn synth_data(out: &Path, subjects: usize, seconds: f64, seed: u64, offset_sd: f64) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let opts = SynthOptions {
        offset_sd,
        ..SynthOptions::default()
    };
    let mut truth = BTreeMap::new();
    for (rec, t) in synth_generate(subjects, seconds, seed, &opts) {
        write_record_csv(&rec, &out.join(format!("{}.csv", rec.subject_id)))?;
        truth.insert(rec.subject_id.clone(), t);
    }
    std::fs::write(out.join("truth.json"), serde_json::to_string_pretty(&truth)?)?;
    println!("wrote {subjects} subjects of {seconds} s to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct SubjectReport {
    subject: String,
    windows: usize,
    valid: usize,
    shift: isize,
    rejected: BTreeMap<String, usize>,
}

pub struct PreprocessArgs<'a> {
    pub input: &'a Path,
    pub windows: &'a Path,
    pub splits: &'a Path,
    pub folds: usize,
    pub val_frac: f64,
    pub seed: u64,
    pub preprocess_config: Option<&'a Path>,
}

/// Every `*.csv` in the input dir is one subject, named by the file stem.
pub fn preprocess(a: &PreprocessArgs<'_>) -> Result<()> {
    let cfg: PreprocessConfig = match a.preprocess_config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => PreprocessConfig::default(),
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(a.input)
        .with_context(|| format!("reading {}", a.input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .csv records in {}", a.input.display());
    }
    let mut windows = Vec::new();
    let mut report = Vec::new();
    let mut fs = None;
    for f in &files {
        let id = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let rec = load_record_csv(f, &id)?;
        if fs.is_some_and(|v| v != rec.fs) {
            bail!("{id}: sampling rate {} differs from the other records", rec.fs);
        }
        fs = Some(rec.fs);
        let (rec, shift) = align_record(&rec, &cfg)?;
        let ws = segment_and_filter(&rec, &cfg);
        let mut rejected = BTreeMap::new();
        for w in &ws {
            if let Some(r) = w.reason {
                *rejected.entry(r.as_str().to_string()).or_insert(0) += 1;
            }
        }
        report.push(SubjectReport {
            subject: id,
            windows: ws.len(),
            valid: ws.iter().filter(|w| w.is_valid()).count(),
            shift,
            rejected,
        });
        windows.extend(ws);
    }
    let fs = fs.unwrap_or(DEFAULT_FS);
    let set = WindowSet {
        fs,
        window_len: window_len(fs),
        windows,
    };
    let subjects: Vec<String> = report
        .iter()
        .filter(|r| r.valid > 0)
        .map(|r| r.subject.clone())
        .collect();
    let splits = subject_kfold(&subjects, a.folds, a.val_frac, a.seed)?;
    set.save(a.windows)?;
    splits.save(a.splits)?;
    let report_path = a.windows.with_extension("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    let valid: usize = report.iter().map(|r| r.valid).sum();
    println!(
        "{} subjects, {} windows ({valid} valid), {} folds; report in {}",
        report.len(),
        set.windows.len(),
        a.folds,
        report_path.display()
    );
    Ok(())
}

fn print_points(points: &[ParetoPoint]) {
    println!(
        "{:<28} {:>10} {:>12} {:>8} {:>8}",
        "model", "lambda", "cost", "sbp", "dbp"
    );
    for p in points {
        println!(
            "{:<28} {:>10.3e} {:>12} {:>8.2} {:>8.2}",
            p.model_ref, p.lambda, p.cost, p.mae_sbp, p.mae_dbp
        );
    }
}

pub fn stage(args: &ConfigArgs, stage: Stage) -> Result<()> {
    let cfg = args.resolve()?;
    let (prep, _) = load_prepared(&cfg)?;
    let out = run_stage(&cfg, stage, &prep)?;
    print_points(&out.points);
    println!("{} runs, {} reused", out.points.len(), out.skipped);
    Ok(())
}

fn model_dir(path: &Path) -> Result<ModelDir> {
    let d = ModelDir::from_path(path)?;
    if !d.path().join("point.json").exists() {
        bail!("{} holds no trained model", path.display());
    }
    Ok(d)
}

pub fn eval(args: &ConfigArgs, model: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = args.resolve()?;
    let (prep, _) = load_prepared(&cfg)?;
    let dir = model_dir(model)?;
    let manifest = dir.manifest()?;
    if let Some(s) = prep.fold.test.iter().find(|s| manifest.contains(s)) {
        return Err(ppgnas::Error::Leakage(s.clone()).into());
    }
    let mut g = dir.load()?;
    let test: Vec<&Window> = prep.test.iter().collect();
    let report = evaluate_model(&mut g, &prep, &test)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| dir.path().join("eval"));
    std::fs::create_dir_all(&out)?;
    report.save_json(&out.join("metrics.json"))?;
    report.save_csv(&out.join("metrics.csv"))?;
    let verdict = aami_report(&report);
    println!(
        "MAE sbp {:.2} dbp {:.2} over {} windows of {} subjects",
        report.mae_sbp(),
        report.mae_dbp(),
        report.n_windows,
        report.n_subjects()
    );
    println!("AAMI: {}", if verdict.pass { "pass" } else { "fail" });
    if let Some(n) = verdict.note {
        println!("note: {n}");
    }
    Ok(())
}

#[derive(Serialize)]
struct FtRow {
    subject: String,
    n_train: usize,
    n_eval: usize,
    pre_sbp: f64,
    post_sbp: f64,
    pre_dbp: f64,
    post_dbp: f64,
    eval_hash: String,
}

pub fn finetune(args: &ConfigArgs, model: &Path, subject: Option<&str>, out: Option<&Path>) -> Result<()> {
    let cfg = args.resolve()?;
    let (prep, _) = load_prepared(&cfg)?;
    let dir = model_dir(model)?;
    let manifest = dir.manifest()?;
    let g = dir.load()?;
    let settings = FinetuneSettings {
        mode: cfg.ft_mode,
        size: cfg.ft_size,
        epochs: cfg.ft_epochs,
        lr_w: cfg.lr_w,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    let subjects: Vec<String> = match subject {
        Some(s) => vec![s.to_string()],
        None => prep.fold.test.clone(),
    };
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.path().join("finetune"));
    std::fs::create_dir_all(&out)?;
    let mut rows = Vec::new();
    for s in &subjects {
        let ws: Vec<&Window> = prep.test.iter().filter(|w| &w.subject_id == s).collect();
        if ws.is_empty() && subject.is_some() {
            bail!("subject {s} has no valid test windows in fold {}", cfg.fold);
        }
        if ws.len() < MIN_FT_WINDOWS && subject.is_none() {
            eprintln!("skipping {s}: {} valid windows", ws.len());
            continue;
        }
        let (o, tuned) = finetune_subject(&g, &manifest, &ws, &prep, &settings)?;
        ppgnas::diffcore::serialize::save_graph(&tuned, &out.join(format!("model_{s}")))?;
        println!(
            "{s}: sbp {:.2} -> {:.2}, dbp {:.2} -> {:.2} ({} train / {} eval windows)",
            o.pre.mae_sbp(),
            o.post.mae_sbp(),
            o.pre.mae_dbp(),
            o.post.mae_dbp(),
            o.n_train,
            o.n_eval
        );
        rows.push(FtRow {
            subject: o.subject_id.clone(),
            n_train: o.n_train,
            n_eval: o.n_eval,
            pre_sbp: o.pre.mae_sbp(),
            post_sbp: o.post.mae_sbp(),
            pre_dbp: o.pre.mae_dbp(),
            post_dbp: o.post.mae_dbp(),
            eval_hash: o.eval_hash.clone(),
        });
    }
    let mut w = csv::Writer::from_path(out.join("finetune.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export(model: &Path, out: &Path) -> Result<()> {
    let dir = model_dir(model)?;
    let g = dir.load()?;
    let q = export_quantized(&g)?;
    std::fs::create_dir_all(out)?;
    q.write(&out.join("model.ppgq"))?;
    std::fs::copy(dir.path().join("normalizer.json"), out.join("normalizer.json"))?;
    let fp = q.footprint();
    println!("{:<24} {:>4}", "layer", "bits");
    for (name, bits) in q.layer_bits() {
        println!("{name:<24} {bits:>4}");
    }
    println!(
        "footprint: {} B weights, {} B biases, {} B scales, {} B total",
        fp.weight_bytes, fp.bias_bytes, fp.scale_bytes, fp.total_bytes
    );
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    subject: String,
    window: usize,
    sbp_pred: Option<f64>,
    dbp_pred: Option<f64>,
    sbp_true: Option<f64>,
    dbp_true: Option<f64>,
}

/// Integer inference on every valid window (optionally of some subjects).
/// Waveform outputs are smoothed and labeled like the float evaluation.
pub fn run_int(export_dir: &Path, windows: &Path, subjects: &[String], cutoff_coef: f64, out: &Path) -> Result<()> {
    let q = QuantizedModel::read(&export_dir.join("model.ppgq"))?;
    let norm: Normalizer = serde_json::from_str(&std::fs::read_to_string(export_dir.join("normalizer.json"))?)?;
    let set = WindowSet::load(windows)?;
    let (_, in_len) = q.input_shape();
    let (oc, ol) = q.output_shape();
    let scale = q.output_scale();
    let pre = PreprocessConfig::default();
    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for w in set
        .valid()
        .filter(|w| subjects.is_empty() || subjects.contains(&w.subject_id))
    {
        if w.ppg.len() < in_len {
            bail!("window {} of {} is shorter than the model input", w.index, w.subject_id);
        }
        let codes = q.forward_codes(&q.quantize_input(&standardize_ppg(&w.ppg, in_len))?)?;
        let y: Vec<f64> = codes.iter().map(|&c| c as f64 * scale).collect();
        let pred = match (oc, ol) {
            (2, 1) => Some((norm.inverse(0, y[0]), norm.inverse(1, y[1]))),
            (1, _) => {
                let wave: Vec<f64> = y.iter().map(|&v| norm.inverse(0, v)).collect();
                waveform_labels(&wave, set.fs, cutoff_coef, &pre)?.ok()
            }
            _ => bail!("unexpected model output shape ({oc}, {ol})"),
        };
        if let (Some((s, d)), Some(l)) = (pred, w.labels) {
            pairs.push(BpPair {
                subject_id: w.subject_id.clone(),
                sbp_pred: s,
                dbp_pred: d,
                sbp_true: l.sbp,
                dbp_true: l.dbp,
            });
        }
        rows.push(Prediction {
            subject: w.subject_id.clone(),
            window: w.index,
            sbp_pred: pred.map(|p| p.0),
            dbp_pred: pred.map(|p| p.1),
            sbp_true: w.labels.map(|l| l.sbp),
            dbp_true: w.labels.map(|l| l.dbp),
        });
    }
    let mut wr = csv::Writer::from_path(out)?;
    for r in &rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    println!("{} windows -> {}", rows.len(), out.display());
    if !pairs.is_empty() {
        let m = compute_mae(&pairs)?;
        println!("MAE sbp {:.2} dbp {:.2}", m.mae_sbp(), m.mae_dbp());
    }
    Ok(())
}

pub fn summarize_cmd(out_dir: &Path) -> Result<()> {
    let tables = summarize(out_dir)?;
    for (name, rows) in &tables {
        println!("{name}");
        println!(
            "  {:<22} {:<9} {:<6} {:>8} {:>9} {:>6}",
            "layer", "kind", "op", "channels", "retained", "bits"
        );
        for r in rows {
            let op = if r.bypassed { "bypassed" } else { r.operator.as_str() };
            println!(
                "  {:<22} {:<9} {:<6} {:>8} {:>9.3} {:>6}",
                r.layer, r.kind, op, r.channels, r.retained, r.bits
            );
        }
    }
    println!(
        "{} models; tables in {}",
        tables.len(),
        out_dir.join("summary").display()
    );
    Ok(())
}

/// Bits of weight memory: float models store 32-bit weights.
fn memory_bits(p: &ParetoPoint) -> ParetoPoint {
    ParetoPoint {
        cost: if p.stage == Stage::Mps { p.cost } else { 32.0 * p.cost },
        ..p.clone()
    }
}

pub fn pareto(out_dir: &Path, objective: Objective) -> Result<()> {
    let mut points = Vec::new();
    for stage in [Stage::Seed, Stage::Nas, Stage::Pit, Stage::Mps] {
        let p = out_dir.join(stage.as_str()).join("points.csv");
        if p.exists() {
            points.extend(read_points_csv(&p)?.iter().map(memory_bits));
        }
    }
    if points.is_empty() {
        bail!("no stage points under {}", out_dir.display());
    }
    let dir = out_dir.join("pareto");
    std::fs::create_dir_all(&dir)?;
    let front = pareto_front(&points, objective);
    write_points_csv(&points, &dir.join("points.csv"))?;
    write_points_csv(&front, &dir.join("front.csv"))?;
    write_pareto_svg(&points, objective, &dir.join("front.svg"))?;
    println!("cost in weight-memory bits");
    print_points(&front);
    println!(
        "{} of {} points on the front; files in {}",
        front.len(),
        points.len(),
        dir.display()
    );
    Ok(())
}
