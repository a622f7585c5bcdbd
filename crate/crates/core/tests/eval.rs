use ppgnas::eval::*;
use proptest::prelude::*;

const FS: f64 = 125.0;

fn probe() -> Vec<f64> {
    (0..200)
        .map(|i| {
            let t = i as f64;
            (0.07 * t).sin() + 0.3 * (1.3 * t).cos() + 0.01 * t
        })
        .collect()
}

// Reference values from scipy.signal.sosfiltfilt(butter(5, fc, fs=125, output="sos"), x).
#[test]
fn filtfilt_matches_reference() {
    let x = probe();
    let y = butter_lowpass_filtfilt(&x, 8.0, FS).unwrap();
    for (i, want) in [
        (0, 0.3025618683656275),
        (1, 0.30144351323608964),
        (50, 0.14948842988367403),
        (100, 1.656987038297414),
        (199, 3.100508546229898),
    ] {
        assert!((y[i] - want).abs() < 1e-9, "fc 8 at {i}: {} vs {want}", y[i]);
    }
    let y = butter_lowpass_filtfilt(&x, 3.0, FS).unwrap();
    for (i, want) in [
        (0, 0.27760306382805355),
        (37, 0.9046171049811089),
        (120, 2.0528308643900646),
        (199, 2.86584194990021),
    ] {
        assert!((y[i] - want).abs() < 1e-9, "fc 3 at {i}: {} vs {want}", y[i]);
    }
}

#[test]
fn filter_edge_cases() {
    let dc = vec![93.5; 300];
    let y = smooth_output(&dc, FS, DEFAULT_CUTOFF_COEF).unwrap();
    assert!(y.iter().all(|v| (v - 93.5).abs() < 1e-9));
    assert_eq!(y.len(), dc.len());

    let tone: Vec<f64> = (0..625)
        .map(|i| (2.0 * std::f64::consts::PI * 50.0 * i as f64 / FS).sin())
        .collect();
    let z = butter_lowpass_filtfilt(&tone, 8.0, FS).unwrap();
    let e = |v: &[f64]| v[100..525].iter().map(|s| s * s).sum::<f64>();
    let db = 10.0 * (e(&z) / e(&tone)).log10();
    assert!(db <= -40.0, "attenuation {db} dB");

    // twice vs once, within 5% energy
    let x: Vec<f64> = (0..625)
        .map(|i| 100.0 + 20.0 * (i as f64 * 0.06).sin() + (i as f64 * 2.1).sin())
        .collect();
    let once = smooth_output(&x, FS, DEFAULT_CUTOFF_COEF).unwrap();
    let twice = smooth_output(&once, FS, DEFAULT_CUTOFF_COEF).unwrap();
    let ac = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|s| (s - m).powi(2)).sum::<f64>()
    };
    assert!((ac(&twice) / ac(&once) - 1.0).abs() < 0.05);

    assert_eq!(adaptive_cutoff(&[100.0; 10], FS, 0.1), (10.0, false));
    assert_eq!(adaptive_cutoff(&[1.0; 10], FS, 0.1), (1.0, true));
    assert_eq!(adaptive_cutoff(&[1000.0; 10], FS, 0.1), (0.45 * FS, true));
    assert!(smooth_output(&[], FS, 0.1).is_err());
    assert!(butter_lowpass_filtfilt(&[1.0; 10], 8.0, FS).is_err());
}

fn pair(s: &str, sp: f64, st: f64) -> BpPair {
    BpPair {
        subject_id: s.into(),
        sbp_pred: sp,
        dbp_pred: sp - 40.0,
        sbp_true: st,
        dbp_true: st - 40.0,
    }
}

#[test]
fn mae_examples() {
    let r = compute_mae(&[pair("a", 120.0, 125.0), pair("b", 130.0, 135.0)]).unwrap();
    assert_eq!((r.sbp.mae, r.sbp.me, r.sbp.std), (5.0, -5.0, 0.0));
    assert_eq!(r.n_windows, 2);
    assert_eq!(r.n_subjects(), 2);
    let r = compute_mae(&[pair("a", 120.0, 120.0)]).unwrap();
    assert_eq!((r.sbp.mae, r.sbp.std), (0.0, 0.0));
    let r = compute_mae(&[pair("a", 110.0, 120.0), pair("a", 124.0, 120.0)]).unwrap();
    assert_eq!((r.sbp.mae, r.sbp.me, r.sbp.std), (7.0, -3.0, 7.0));
    assert!(compute_mae(&[]).is_err());
}

fn stats(me: f64, std: f64) -> ErrorStats {
    ErrorStats {
        mae: me.abs(),
        me,
        std,
        n: 100,
    }
}

#[test]
fn aami_examples() {
    let v = aami_check(&stats(1.39, 2.36), 100);
    assert!(v.pass && v.note.is_none());
    assert!(!aami_check(&stats(5.1, 2.0), 100).pass);
    assert!(!aami_check(&stats(5.01, 8.0), 100).pass);
    assert!(!aami_check(&stats(-1.0, 8.01), 100).pass);
    assert!(aami_check(&stats(-5.0, 8.0), 100).pass);
    let v = aami_check(&stats(1.39, 2.36), 40);
    assert!(v.pass && v.note.unwrap().contains("40"));
}

fn pt(cost: f64, mae: f64) -> ParetoPoint {
    ParetoPoint {
        cost,
        mae_sbp: mae,
        mae_dbp: mae,
        stage: Stage::Nas,
        lambda: 0.0,
        model_ref: format!("{cost}-{mae}"),
    }
}

#[test]
fn pareto_examples() {
    let f = pareto_front(&[pt(10.0, 5.0), pt(20.0, 4.0), pt(15.0, 6.0)], Objective::Sbp);
    assert_eq!(f, vec![pt(10.0, 5.0), pt(20.0, 4.0)]);
    assert_eq!(pareto_front(&[pt(3.0, 3.0)], Objective::Dbp), vec![pt(3.0, 3.0)]);
    assert_eq!(pareto_front(&[pt(3.0, 3.0), pt(3.0, 3.0)], Objective::Both).len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let pts = vec![pt(10.0, 5.0), pt(20.0, 4.0), pt(15.0, 6.0)];
    let csv = dir.path().join("p.csv");
    pareto::write_points_csv(&pts, &csv).unwrap();
    assert_eq!(pareto::read_points_csv(&csv).unwrap(), pts);
    let svg = dir.path().join("p.svg");
    write_pareto_svg(&pts, Objective::Sbp, &svg).unwrap();
    assert_eq!(std::fs::read_to_string(&svg).unwrap().matches("<circle").count(), 3);
}

proptest! {
    #[test]
    fn pareto_matches_brute_force(raw in prop::collection::vec((1u32..20, 0u32..10, 0u32..10), 1..40)) {
        let pts: Vec<ParetoPoint> = raw
            .iter()
            .enumerate()
            .map(|(i, &(c, s, d))| ParetoPoint {
                cost: c as f64,
                mae_sbp: s as f64,
                mae_dbp: d as f64,
                stage: Stage::Pit,
                lambda: 0.0,
                model_ref: i.to_string(),
            })
            .collect();
        for obj in [Objective::Sbp, Objective::Dbp, Objective::Both] {
            let e = |p: &ParetoPoint| match obj {
                Objective::Sbp => (p.mae_sbp, p.mae_sbp),
                Objective::Dbp => (p.mae_dbp, p.mae_dbp),
                Objective::Both => (p.mae_sbp, p.mae_dbp),
            };
            let dom = |a: &ParetoPoint, b: &ParetoPoint| {
                let (a1, a2) = e(a);
                let (b1, b2) = e(b);
                a.cost <= b.cost && a1 <= b1 && a2 <= b2 && (a.cost < b.cost || a1 < b1 || a2 < b2)
            };
            let front = pareto_front(&pts, obj);
            for p in &front {
                prop_assert!(front.iter().all(|q| !dom(q, p)));
            }
            for p in &pts {
                if !front.contains(p) {
                    prop_assert!(front.iter().any(|q| dom(q, p)));
                }
            }
            prop_assert!(front.windows(2).all(|w| w[0].cost <= w[1].cost));
        }
    }

    #[test]
    fn mae_is_permutation_invariant(v in prop::collection::vec((60.0f64..200.0, 60.0f64..200.0), 1..30), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let pairs: Vec<BpPair> = v.iter().enumerate().map(|(i, &(p, t))| pair(&format!("s{}", i % 3), p, t)).collect();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = compute_mae(&pairs).unwrap();
        let b = compute_mae(&shuffled).unwrap();
        prop_assert!((a.sbp.mae - b.sbp.mae).abs() < 1e-9);
        prop_assert!((a.dbp.me - b.dbp.me).abs() < 1e-9);
        prop_assert!((a.sbp.std - b.sbp.std).abs() < 1e-9);
        prop_assert_eq!(a.per_subject.len(), b.per_subject.len());
    }

    #[test]
    fn filter_is_linear(
        x in prop::collection::vec(-50.0f64..50.0, 64..200),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        fc in 1.0f64..50.0,
    ) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| (i as f64 * 0.3).sin() * 10.0 - v).collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fx = butter_lowpass_filtfilt(&x, fc, FS).unwrap();
        let fy = butter_lowpass_filtfilt(&y, fc, FS).unwrap();
        let fm = butter_lowpass_filtfilt(&mix, fc, FS).unwrap();
        prop_assert_eq!(fm.len(), x.len());
        for i in 0..x.len() {
            prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
        }
    }
}
