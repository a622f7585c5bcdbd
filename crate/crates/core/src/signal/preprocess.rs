//! Alignment, windowing, plausibility checks and label extraction.

use serde::{Deserialize, Serialize};

use super::peaks::{find_peaks, find_valleys};
use super::spline::CubicSpline;
use super::{mean_std, median, window_len, BpTarget, Labels, RejectReason, SubjectRecord, Window};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub abp_min: f64,
    pub abp_max: f64,
    /// Windows need a pulse pressure strictly above this.
    pub min_pulse_pressure: f64,
    pub hr_min: f64,
    pub hr_max: f64,
    /// Shortest beat-to-beat interval the detector resolves, in BPM.
    pub detector_max_bpm: f64,
    /// Peak prominence as a fraction of the window range.
    pub prominence_frac: f64,
    /// PPG rejection: std of peak heights (or valley depths) above this
    /// fraction of their mean.
    pub ppg_std_frac: f64,
    /// Cross-correlation search range for alignment, seconds.
    pub max_lag_s: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            abp_min: 30.0,
            abp_max: 220.0,
            min_pulse_pressure: 10.0,
            hr_min: 35.0,
            hr_max: 140.0,
            detector_max_bpm: 220.0,
            prominence_frac: 0.1,
            ppg_std_frac: 0.25,
            max_lag_s: 2.0,
        }
    }
}

impl PreprocessConfig {
    fn min_distance(&self, fs: f64) -> usize {
        ((fs * 60.0 / self.detector_max_bpm).floor() as usize).max(1)
    }
}

fn range(x: &[f64]) -> (f64, f64) {
    x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Lag `k` maximizing the Pearson correlation of `ppg[t - k]` with
/// `abp[t]` for `|k| <= max_lag`. A positive lag means the ABP trails the
/// PPG. The signed correlation is maximized, so an anti-correlated pair is
/// not matched at its most negative lag. Ties go to the smallest `|k|`.
pub fn align_xcorr(ppg: &[f64], abp: &[f64], fs: f64, max_lag_s: f64) -> Result<isize> {
    let n = ppg.len();
    if abp.len() != n {
        return Err(Error::Signal(format!(
            "alignment needs equal lengths, got {n} and {}",
            abp.len()
        )));
    }
    if (n as f64) < 2.0 * fs {
        return Err(Error::Signal(format!(
            "alignment needs at least 2 s of signal, got {n} samples"
        )));
    }
    let flat = |x: &[f64]| {
        let (lo, hi) = range(x);
        hi - lo <= f64::EPSILON * hi.abs().max(1.0)
    };
    if flat(ppg) || flat(abp) {
        return Err(Error::Signal("cannot align a flat signal".into()));
    }
    let max_lag = ((max_lag_s * fs).round() as usize).min(n - 2) as isize;
    let corr = |k: isize| -> f64 {
        let (p, a) = if k >= 0 {
            (&ppg[..n - k as usize], &abp[k as usize..])
        } else {
            (&ppg[(-k) as usize..], &abp[..n - (-k) as usize])
        };
        let (mp, sp) = mean_std(p);
        let (ma, sa) = mean_std(a);
        if sp == 0.0 || sa == 0.0 {
            return f64::NEG_INFINITY;
        }
        p.iter().zip(a).map(|(x, y)| (x - mp) * (y - ma)).sum::<f64>() / (p.len() as f64 * sp * sa)
    };
    let mut best = (0isize, corr(0));
    for m in 1..=max_lag {
        for k in [-m, m] {
            let c = corr(k);
            if c > best.1 {
                best = (k, c);
            }
        }
    }
    Ok(best.0)
}

/// Pairs `abp[t]` with `ppg[t - shift]` and trims both to the overlap.
pub fn apply_shift(ppg: &[f64], abp: &[f64], shift: isize) -> (Vec<f64>, Vec<f64>) {
    let n = ppg.len().min(abp.len());
    let s = shift.unsigned_abs().min(n);
    if shift >= 0 {
        (ppg[..n - s].to_vec(), abp[s..n].to_vec())
    } else {
        (ppg[s..n].to_vec(), abp[..n - s].to_vec())
    }
}

/// Aligns a waveform record by cross-correlation; label-only records are
/// returned unchanged. Returns the record and the applied shift.
pub fn align_record(rec: &SubjectRecord, cfg: &PreprocessConfig) -> Result<(SubjectRecord, isize)> {
    let Some(abp) = rec.abp() else {
        return Ok((rec.clone(), 0));
    };
    let shift = align_xcorr(&rec.ppg, abp, rec.fs, cfg.max_lag_s)?;
    let (ppg, abp) = apply_shift(&rec.ppg, abp, shift);
    let out = SubjectRecord::new(rec.subject_id.clone(), rec.fs, ppg, BpTarget::Waveform(abp))?;
    Ok((out, shift))
}

/// Systolic peaks and the cycle-boundary minima between consecutive peaks.
fn beats(abp: &[f64], fs: f64, cfg: &PreprocessConfig) -> (Vec<usize>, Vec<usize>) {
    let (lo, hi) = range(abp);
    let peaks = find_peaks(abp, cfg.min_distance(fs), cfg.prominence_frac * (hi - lo));
    let troughs = peaks
        .windows(2)
        .map(|w| {
            let seg = &abp[w[0]..w[1]];
            w[0] + seg
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("non-empty cycle")
        })
        .collect();
    (peaks, troughs)
}

fn heart_rate(peaks: &[usize], fs: f64) -> Option<f64> {
    if peaks.len() < 2 {
        return None;
    }
    let mean_ibi = (peaks[peaks.len() - 1] - peaks[0]) as f64 / (peaks.len() - 1) as f64;
    Some(60.0 * fs / mean_ibi)
}

/// SBP as the median systolic peak and DBP as the median cycle-boundary
/// minimum. Needs at least three detected beats.
pub fn extract_labels(abp: &[f64], fs: f64, cfg: &PreprocessConfig) -> std::result::Result<(f64, f64), RejectReason> {
    let (peaks, troughs) = beats(abp, fs, cfg);
    if peaks.len() < 3 {
        return Err(RejectReason::Beats);
    }
    let sbp = median(&peaks.iter().map(|&i| abp[i]).collect::<Vec<_>>());
    let dbp = median(&troughs.iter().map(|&i| abp[i]).collect::<Vec<_>>());
    Ok((sbp, dbp))
}

/// Plausibility checks in order: amplitude, heart rate, beat count, pulse
/// pressure.
fn check_abp(abp: &[f64], fs: f64, cfg: &PreprocessConfig) -> std::result::Result<Labels, RejectReason> {
    let (lo, hi) = range(abp);
    if lo < cfg.abp_min || hi > cfg.abp_max {
        return Err(RejectReason::Amplitude);
    }
    let (peaks, _) = beats(abp, fs, cfg);
    let hr = heart_rate(&peaks, fs).ok_or(RejectReason::Beats)?;
    if !(cfg.hr_min..=cfg.hr_max).contains(&hr) {
        return Err(RejectReason::HeartRate);
    }
    let (sbp, dbp) = extract_labels(abp, fs, cfg)?;
    if sbp - dbp <= cfg.min_pulse_pressure {
        return Err(RejectReason::PulsePressure);
    }
    Ok(Labels { sbp, dbp, hr })
}

/// Subtracts a natural cubic spline through the valley points. With one
/// valley the offset is constant.
pub fn remove_baseline(x: &[f64], valleys: &[usize]) -> Result<Vec<f64>> {
    match valleys {
        [] => Err(Error::Signal("baseline correction needs at least one valley".into())),
        [v] => Ok(x.iter().map(|s| s - x[*v]).collect()),
        _ => {
            let kx: Vec<f64> = valleys.iter().map(|&i| i as f64).collect();
            let ky: Vec<f64> = valleys.iter().map(|&i| x[i]).collect();
            let spline = CubicSpline::natural(&kx, &ky)?;
            let mut out: Vec<f64> = x.iter().enumerate().map(|(i, s)| s - spline.eval(i as f64)).collect();
            for &v in valleys {
                out[v] = 0.0;
            }
            Ok(out)
        }
    }
}

/// PPG quality check and baseline removal. Peak heights are measured from
/// the window minimum and valley depths from the window maximum.
fn check_ppg(ppg: &[f64], fs: f64, cfg: &PreprocessConfig) -> std::result::Result<(Vec<f64>, f64), RejectReason> {
    let (lo, hi) = range(ppg);
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return Err(RejectReason::Ppg);
    }
    let prom = cfg.prominence_frac * (hi - lo);
    let dist = cfg.min_distance(fs);
    let peaks = find_peaks(ppg, dist, prom);
    let valleys = find_valleys(ppg, dist, prom);
    if peaks.len() < 2 || valleys.len() < 2 {
        return Err(RejectReason::Ppg);
    }
    let spread = |v: Vec<f64>| {
        let (m, s) = mean_std(&v);
        m <= 0.0 || s > cfg.ppg_std_frac * m
    };
    if spread(peaks.iter().map(|&i| ppg[i] - lo).collect()) || spread(valleys.iter().map(|&i| hi - ppg[i]).collect()) {
        return Err(RejectReason::Ppg);
    }
    let hr = heart_rate(&peaks, fs).expect("two peaks");
    let corrected = remove_baseline(ppg, &valleys).map_err(|_| RejectReason::Ppg)?;
    Ok((corrected, hr))
}

/// Non-overlapping windows of `5 * fs` samples with labels and validity.
/// Trailing samples that do not fill a window are dropped.
pub fn segment_and_filter(rec: &SubjectRecord, cfg: &PreprocessConfig) -> Vec<Window> {
    let wl = window_len(rec.fs);
    let n = rec.ppg.len() / wl;
    (0..n)
        .map(|i| {
            let span = i * wl..(i + 1) * wl;
            let ppg = &rec.ppg[span.clone()];
            let abp = rec.abp().map(|a| a[span].to_vec());
            let labels = match (&rec.bp, &abp) {
                (BpTarget::Waveform(_), Some(seg)) => check_abp(seg, rec.fs, cfg),
                (BpTarget::Labels { sbp, dbp }, _) => {
                    if *sbp < cfg.abp_min || *sbp > cfg.abp_max || *dbp < cfg.abp_min || *dbp > cfg.abp_max {
                        Err(RejectReason::Amplitude)
                    } else if sbp - dbp <= cfg.min_pulse_pressure {
                        Err(RejectReason::PulsePressure)
                    } else {
                        Ok(Labels {
                            sbp: *sbp,
                            dbp: *dbp,
                            hr: f64::NAN,
                        })
                    }
                }
                _ => unreachable!("waveform records carry an ABP segment"),
            };
            let (ppg_out, labels, reason) = match labels {
                Err(r) => (ppg.to_vec(), None, Some(r)),
                Ok(mut l) => match check_ppg(ppg, rec.fs, cfg) {
                    Err(r) => (ppg.to_vec(), None, Some(r)),
                    Ok((corrected, ppg_hr)) => {
                        if l.hr.is_nan() {
                            l.hr = ppg_hr;
                            if !(cfg.hr_min..=cfg.hr_max).contains(&ppg_hr) {
                                return Window {
                                    subject_id: rec.subject_id.clone(),
                                    index: i,
                                    ppg: ppg.to_vec(),
                                    abp,
                                    labels: None,
                                    reason: Some(RejectReason::HeartRate),
                                };
                            }
                        }
                        (corrected, Some(l), None)
                    }
                },
            };
            Window {
                subject_id: rec.subject_id.clone(),
                index: i,
                ppg: ppg_out,
                abp,
                labels,
                reason,
            }
        })
        .collect()
}
