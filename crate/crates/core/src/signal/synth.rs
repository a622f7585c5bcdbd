//! Synthetic cohort: beat-by-beat arterial pressure from two Gaussian pulses
//! per cycle, and a lagged, compressed, amplitude-normalized PPG.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BpTarget, SubjectRecord, DEFAULT_FS};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthOptions {
    pub fs: f64,
    /// Peak-to-peak amplitude of the slow per-beat pressure drift, mmHg.
    pub drift_mmhg: f64,
    pub abp_noise: f64,
    pub ppg_noise: f64,
    /// Relative beat-to-beat period jitter.
    pub hr_jitter: f64,
    /// Std of a per-subject pressure offset that leaves the PPG untouched,
    /// mmHg. Models cannot infer it from the input; fine-tuning can.
    pub offset_sd: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            fs: DEFAULT_FS,
            drift_mmhg: 1.0,
            abp_noise: 0.25,
            ppg_noise: 0.01,
            hr_jitter: 0.02,
            offset_sd: 0.0,
        }
    }
}

/// Parameters drawn for one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub sbp: f64,
    pub dbp: f64,
    pub hr: f64,
    /// PPG delay behind ABP, samples.
    pub lag: usize,
}

struct BeatShape {
    dicrotic: f64,
    width: f64,
    lo: f64,
    hi: f64,
}

impl BeatShape {
    fn new(sbp: f64, dbp: f64) -> Self {
        let mut s = Self {
            dicrotic: 0.15 + 0.25 * (sbp - 90.0) / 90.0,
            width: 0.07 + 0.02 * (dbp - 50.0) / 60.0,
            lo: 0.0,
            hi: 1.0,
        };
        let grid: Vec<f64> = (0..=2000).map(|i| s.raw(i as f64 / 2000.0)).collect();
        s.lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
        s.hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        s
    }

    fn pulses(&self, phase: f64) -> f64 {
        let g = |c: f64, w: f64| (-0.5 * ((phase - c) / w).powi(2)).exp();
        g(0.2, self.width) + self.dicrotic * g(0.45, 0.07)
    }

    /// Pulses minus the chord between the cycle ends, so consecutive beats
    /// join continuously.
    fn raw(&self, phase: f64) -> f64 {
        self.pulses(phase) - (1.0 - phase) * self.pulses(0.0) - phase * self.pulses(1.0)
    }

    /// Normalized to `[0, 1]` over a cycle.
    fn at(&self, phase: f64) -> f64 {
        (self.raw(phase) - self.lo) / (self.hi - self.lo)
    }
}

/// One subject of `seconds` duration.
pub fn synth_subject(id: &str, seconds: f64, opts: &SynthOptions, rng: &mut ChaCha8Rng) -> (SubjectRecord, SynthTruth) {
    let fs = opts.fs;
    let (sbp, dbp) = loop {
        let s = rng.gen_range(90.0..=180.0);
        let d = rng.gen_range(50.0..=110.0);
        if s - d >= 25.0 {
            break (s, d);
        }
    };
    let hr = rng.gen_range(40.0..=130.0);
    let lag = (rng.gen_range(0.08..0.3) * fs).round() as usize;
    let drift_period = rng.gen_range(20.0..60.0);
    let drift_phase = rng.gen_range(0.0..2.0 * PI);
    let wander_f = rng.gen_range(0.1..0.3);
    let wander_phase = rng.gen_range(0.0..2.0 * PI);
    let shape = BeatShape::new(sbp, dbp);
    let offset = if opts.offset_sd > 0.0 {
        Normal::new(0.0, opts.offset_sd).expect("valid std").sample(rng)
    } else {
        0.0
    };
    let (sbp, dbp) = (sbp + offset, dbp + offset);

    let n = (seconds * fs).round() as usize;
    let t_start = -(lag as f64) / fs - 2.0;
    let t_end = n as f64 / fs + 2.0;
    // (onset, period, sbp, dbp) per beat
    let mut beats = Vec::new();
    let mut t = t_start - rng.gen_range(0.0..60.0 / hr);
    while t < t_end {
        let period = 60.0 / hr * (1.0 + rng.gen_range(-opts.hr_jitter..=opts.hr_jitter));
        let drift = 0.5 * opts.drift_mmhg * (2.0 * PI * t / drift_period + drift_phase).sin();
        beats.push((t, period, sbp + drift, dbp + drift));
        t += period;
    }
    let clean = |t: f64| -> (f64, f64) {
        let k = beats.partition_point(|b| b.0 <= t).saturating_sub(1);
        let (on, period, s, d) = beats[k];
        let u = shape.at(((t - on) / period).clamp(0.0, 1.0));
        (d + (s - d) * u, u)
    };
    let abp_noise = Normal::new(0.0, opts.abp_noise).expect("valid std");
    let ppg_noise = Normal::new(0.0, opts.ppg_noise).expect("valid std");
    let comp = |u: f64| (1.0 - (-2.5 * u).exp()) / (1.0 - (-2.5f64).exp());
    // the PPG reads the pressure pulse `lag` samples late
    let mut abp = Vec::with_capacity(n);
    let mut ppg = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / fs;
        let (_, u_late) = clean(t - lag as f64 / fs);
        let (p, _) = clean(t);
        abp.push(p + abp_noise.sample(rng));
        let wander = 0.08 * (2.0 * PI * wander_f * t + wander_phase).sin();
        ppg.push(comp(u_late) + wander + ppg_noise.sample(rng));
    }
    let rec = SubjectRecord::new(id, fs, ppg, BpTarget::Waveform(abp)).expect("consistent lengths");
    (rec, SynthTruth { sbp, dbp, hr, lag })
}

/// Deterministic cohort of `n_subjects` named `S000`, `S001`, ...
pub fn synth_generate(
    n_subjects: usize,
    seconds_per_subject: f64,
    seed: u64,
    opts: &SynthOptions,
) -> Vec<(SubjectRecord, SynthTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_subjects)
        .map(|i| synth_subject(&format!("S{i:03}"), seconds_per_subject, opts, &mut rng))
        .collect()
}
