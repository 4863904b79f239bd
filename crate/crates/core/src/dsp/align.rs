//! Mapping every modality onto a common frame count.

use super::{AudioClip, FeatureMatrix, Modality};
use crate::error::{Error, Result};

/// Nearest-index time scaling. Target frame `t` (1-based) reads source
/// column `clamp(floor(t * T_m / T), 1, T_m)`.
pub fn align_time(fm: &FeatureMatrix, frames: usize) -> Result<FeatureMatrix> {
    if frames == 0 {
        return Err(Error::Config("target frame count must be positive".into()));
    }
    let tm = fm.cols;
    let src: Vec<usize> = (1..=frames).map(|t| ((t * tm) / frames).clamp(1, tm) - 1).collect();
    let mut data = Vec::with_capacity(fm.rows * frames);
    for r in 0..fm.rows {
        let row = fm.row(r);
        data.extend(src.iter().map(|&c| row[c]));
    }
    FeatureMatrix::new(fm.modality, fm.rows, frames, data)
}

/// Raw samples linearly interpolated onto `frames` evenly spaced positions,
/// first and last sample included. No amplitude normalisation.
pub fn waveform_channel(clip: &AudioClip, frames: usize) -> Result<FeatureMatrix> {
    if frames == 0 {
        return Err(Error::Config("target frame count must be positive".into()));
    }
    let x = &clip.samples;
    let n = x.len();
    let data = (0..frames)
        .map(|t| {
            if frames == 1 || n == 1 {
                return x[0];
            }
            let pos = t as f64 * (n - 1) as f64 / (frames - 1) as f64;
            let i = (pos.floor() as usize).min(n - 1);
            if i + 1 >= n {
                return x[n - 1];
            }
            let frac = pos - i as f64;
            if frac == 0.0 {
                x[i]
            } else {
                x[i] + frac * (x[i + 1] - x[i])
            }
        })
        .collect();
    FeatureMatrix::new(Modality::Wave, 1, frames, data)
}

/// Frame count a clip of `seconds` occupies at the 15 ms STFT hop.
pub fn frames_for_duration(seconds: f64) -> usize {
    ((seconds / 0.015).round() as usize).max(1)
}

/// Median frame count over clip durations; `None` for an empty list.
pub fn median_frames(durations: &[f64]) -> Option<usize> {
    if durations.is_empty() {
        return None;
    }
    let mut d = durations.to_vec();
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let m = if d.len() % 2 == 1 { d[mid] } else { 0.5 * (d[mid - 1] + d[mid]) };
    Some(frames_for_duration(m))
}
