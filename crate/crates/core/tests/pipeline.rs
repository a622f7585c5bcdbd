use std::path::Path;

use ppgnas::eval::{Stage, DEFAULT_CUTOFF_COEF};
use ppgnas::mps::tau_schedule;
use ppgnas::pipeline::data::prepare_fold;
use ppgnas::pipeline::finetune::FinetuneSettings;
use ppgnas::pipeline::stages::model_cost;
use ppgnas::pipeline::*;
use ppgnas::signal::*;
use ppgnas::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cohort(n: usize, seconds: f64, seed: u64, opts: &SynthOptions) -> WindowSet {
    let cfg = PreprocessConfig::default();
    let mut windows = Vec::new();
    for (rec, _) in synth_generate(n, seconds, seed, opts) {
        let (rec, _) = align_record(&rec, &cfg).unwrap();
        windows.extend(segment_and_filter(&rec, &cfg));
    }
    WindowSet {
        fs: DEFAULT_FS,
        window_len: window_len(DEFAULT_FS),
        windows,
    }
}

fn toy_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        channels: vec![4, 8],
        nas_lambdas: vec![0.0, 1e-2],
        pit_lambdas: vec![0.0, 1e-2],
        mps_lambdas: vec![0.0, 1e-4],
        seed_epochs: 4,
        warmup_epochs: 1,
        search_epochs: 3,
        finetune_epochs: 2,
        patience: 5,
        batch_size: 16,
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn default_protocol_constants() {
    let c = ExperimentConfig::default();
    assert_eq!(
        (c.warmup_epochs, c.search_epochs, c.finetune_epochs, c.patience),
        (20, 200, 200, 40)
    );
    assert_eq!((c.lr_w, c.lr_theta), (1e-3, 1e-2));
    assert_eq!(c.nas_lambdas.len(), 18);
    assert!((c.nas_lambdas[0] - 1e-11).abs() < 1e-24 && (c.nas_lambdas[17] - 1e-7).abs() < 1e-20);
    assert_eq!(c.mps_lambdas.len(), 9);
    assert_eq!(tau_schedule(0), 5.0);
    assert!((tau_schedule(100) - 3.1885).abs() < 1e-3);
}

#[test]
fn seed_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = build_seed::<f64, _>(SeedArch::Resnet1d, 625, &[16, 32, 64], 5, &mut rng).unwrap();
    assert_eq!(r.input_shape(), (1, 625));
    assert_eq!(r.output_shape().unwrap(), (2, 1));
    let u = build_seed::<f64, _>(SeedArch::Unet1d, 625, &[16, 32, 64], 3, &mut rng).unwrap();
    assert_eq!(u.input_shape(), (1, 624));
    assert_eq!(u.output_shape().unwrap(), (1, 624));
    assert!(unet1d::<f64, _>(625, &[4, 8, 16], 3, &mut rng).is_err());
}

#[test]
fn unet_requires_waveforms() {
    let set = cohort(4, 30.0, 1, &SynthOptions::default());
    let mut labels_only = set.clone();
    for w in &mut labels_only.windows {
        w.abp = None;
    }
    let ids = set.subjects();
    let fold = Fold {
        train: ids[..2].to_vec(),
        val: ids[2..3].to_vec(),
        test: ids[3..].to_vec(),
    };
    assert!(prepare_fold(&set, &fold, SeedArch::Unet1d, 2, DEFAULT_CUTOFF_COEF).is_ok());
    let err = prepare_fold(&labels_only, &fold, SeedArch::Unet1d, 2, DEFAULT_CUTOFF_COEF).unwrap_err();
    assert!(err.to_string().contains("ABP"), "{err}");
    assert!(prepare_fold(&labels_only, &fold, SeedArch::Resnet1d, 2, DEFAULT_CUTOFF_COEF).is_ok());
}

#[test]
fn missing_prerequisite_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let set = cohort(6, 20.0, 2, &SynthOptions::default());
    let splits = subject_kfold(&set.subjects(), 3, 0.2, 0).unwrap();
    let prep = prepare_fold(&set, &splits.folds[0], SeedArch::Resnet1d, 1, DEFAULT_CUTOFF_COEF).unwrap();
    let err = run_stage(&toy_config(dir.path()), Stage::Pit, &prep).unwrap_err();
    assert!(
        matches!(err, Error::MissingArtifact(ref s) if s.contains("points.csv")),
        "{err}"
    );
}

#[test]
fn stage_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let set = cohort(9, 30.0, 3, &SynthOptions::default());
    let splits = subject_kfold(&set.subjects(), 3, 0.2, 0).unwrap();
    let prep = prepare_fold(&set, &splits.folds[0], SeedArch::Resnet1d, 1, DEFAULT_CUTOFF_COEF).unwrap();

    let nas = run_stage(&cfg, Stage::Nas, &prep).unwrap();
    assert_eq!(nas.points.len(), 2);
    let pit = run_stage(&cfg, Stage::Pit, &prep).unwrap();
    let n_inputs = pit.points.len() / 2;
    assert!((1..=3).contains(&n_inputs) && pit.points.len() == 2 * n_inputs);
    let mps = run_stage(&cfg, Stage::Mps, &prep).unwrap();
    assert_eq!(mps.points.len() % 2, 0);

    // every point's cost is recomputable from the stored model
    for out in [&nas, &pit, &mps] {
        for (p, d) in out.points.iter().zip(&out.dirs) {
            let mut g = d.load().unwrap();
            assert_eq!(model_cost(&mut g), p.cost, "{}", p.model_ref);
            let seen = d.manifest().unwrap();
            assert!(prep.fold.test.iter().all(|t| !seen.contains(t)));
        }
    }
    // a rerun reuses every artifact and reproduces the points
    let again = run_stage(&cfg, Stage::Nas, &prep).unwrap();
    assert_eq!(again.skipped, 2);
    assert_eq!(again.points, nas.points);

    let tables = summarize(dir.path()).unwrap();
    assert_eq!(tables.len(), 1 + nas.points.len() + pit.points.len() + mps.points.len());
    for (name, rows) in &tables {
        assert!(!rows.is_empty());
        for r in rows {
            assert!(r.retained > 0.0 && r.retained <= 1.0, "{name} {r:?}");
            if name.starts_with("mps/") {
                assert!(["2", "4", "8"].contains(&r.bits.as_str()), "{name} {r:?}");
            } else {
                assert_eq!(r.bits, "float");
            }
        }
    }
    assert!(dir.path().join("summary/costs.csv").exists());

    // fine-tuning: no-op with zero epochs, leakage rejected
    let g = mps.dirs[0].load().unwrap();
    let manifest = mps.dirs[0].manifest().unwrap();
    let subject = &prep.fold.test[0];
    let ws: Vec<&Window> = prep.test.iter().filter(|w| &w.subject_id == subject).collect();
    let none = FinetuneSettings {
        epochs: 0,
        ..FinetuneSettings::default()
    };
    let (out, _) = finetune_subject(&g, &manifest, &ws, &prep, &none).unwrap();
    assert_eq!(out.pre, out.post);
    let some = FinetuneSettings {
        epochs: 3,
        ..FinetuneSettings::default()
    };
    let (out2, _) = finetune_subject(&g, &manifest, &ws, &prep, &some).unwrap();
    assert_eq!(out2.eval_hash, out.eval_hash);
    assert_eq!(out2.pre, out.pre);
    let mut leaky = manifest.clone();
    leaky.push(subject.clone());
    let err = finetune_subject(&g, &leaky, &ws, &prep, &some).unwrap_err();
    assert!(matches!(err, Error::Leakage(ref s) if s == subject));
}
