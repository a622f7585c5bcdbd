//! Zero-phase Butterworth smoothing of reconstructed waveforms.

use sci_rs::signal::filter::design::{butter_dyn, DigitalFilter, FilterBandType, FilterOutputType, Sos};
use sci_rs::signal::filter::sosfiltfilt_dyn;

use crate::error::{Error, Result};

pub const BUTTER_ORDER: usize = 5;
/// Cutoff in Hz per unit of mean absolute amplitude.
pub const DEFAULT_CUTOFF_COEF: f64 = 0.1;
pub const MIN_CUTOFF_HZ: f64 = 1.0;
pub const MAX_CUTOFF_FRAC: f64 = 0.45;

fn design(cutoff_hz: f64, fs: f64) -> Result<Vec<Sos<f64>>> {
    if !(cutoff_hz > 0.0 && cutoff_hz < 0.5 * fs) {
        return Err(Error::InvalidArgument(format!(
            "cutoff {cutoff_hz} Hz outside (0, {}) for fs {fs}",
            0.5 * fs
        )));
    }
    match butter_dyn(
        BUTTER_ORDER,
        vec![cutoff_hz],
        Some(FilterBandType::Lowpass),
        Some(false),
        Some(FilterOutputType::Sos),
        Some(fs),
    ) {
        DigitalFilter::Sos(f) => Ok(f.sos),
        _ => unreachable!("requested second-order sections"),
    }
}

/// Edge padding used by the forward-backward pass. Inputs must be longer.
fn pad_len(sos: &[Sos<f64>]) -> usize {
    let bzeros = sos.iter().filter(|s| s.b[2] == 0.0).count();
    let azeros = sos.iter().filter(|s| s.a[2] == 0.0).count();
    3 * (2 * sos.len() + 1 - bzeros.min(azeros))
}

/// 5th-order low-pass applied forward and backward (odd edge padding).
/// Linear in `x` for a fixed cutoff.
pub fn butter_lowpass_filtfilt(x: &[f64], cutoff_hz: f64, fs: f64) -> Result<Vec<f64>> {
    let sos = design(cutoff_hz, fs)?;
    let need = pad_len(&sos);
    if x.len() <= need {
        return Err(Error::Signal(format!(
            "filtering needs more than {need} samples, got {}",
            x.len()
        )));
    }
    Ok(sosfiltfilt_dyn(x.iter(), &sos))
}

/// `c * mean|x|` clamped to `[1, 0.45 fs]` Hz. The flag reports a clamp.
pub fn adaptive_cutoff(x: &[f64], fs: f64, coef: f64) -> (f64, bool) {
    let raw = coef * x.iter().map(|v| v.abs()).sum::<f64>() / x.len().max(1) as f64;
    let hi = MAX_CUTOFF_FRAC * fs;
    let fc = raw.clamp(MIN_CUTOFF_HZ, hi);
    (fc, fc != raw)
}

/// Smooths a predicted waveform with the adaptive cutoff; warns when the
/// cutoff had to be clamped.
pub fn smooth_output(x: &[f64], fs: f64, coef: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("cannot smooth an empty series".into()));
    }
    let (fc, clamped) = adaptive_cutoff(x, fs, coef);
    if clamped {
        log::warn!("smoothing cutoff clamped to {fc:.3} Hz");
    }
    butter_lowpass_filtfilt(x, fc, fs)
}
