//! Fundamental frequency with voicing confidence.
//!
//! Any `(f0, confidence)` provider can feed the feature pipeline through
//! [`PitchEstimator`]. The built-in [`AutocorrPitch`] picks the lag with the
//! highest normalised cross-correlation inside the search band; external
//! tracks can be supplied as `<clip>.f0.csv` sidecars.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::audio::AudioClip;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PitchTrack {
    /// Hz, 0 for unvoiced frames.
    pub f0: Vec<f64>,
    /// In [0, 1].
    pub confidence: Vec<f64>,
}

impl PitchTrack {
    pub fn new(f0: Vec<f64>, confidence: Vec<f64>) -> Result<Self> {
        if f0.len() != confidence.len() {
            return Err(Error::Data(format!(
                "pitch track has {} f0 values and {} confidences",
                f0.len(),
                confidence.len()
            )));
        }
        if f0.iter().any(|&f| !(f >= 0.0) || !f.is_finite()) {
            return Err(Error::Data("f0 must be finite and non-negative".into()));
        }
        if confidence.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::Data("confidence must lie in [0, 1]".into()));
        }
        Ok(Self { f0, confidence })
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }
}

pub trait PitchEstimator: Send + Sync {
    fn estimate(&self, clip: &AudioClip) -> Result<PitchTrack>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PitchConfig {
    /// Analysis frame in samples (64 ms at 16 kHz).
    pub frame_len: usize,
    pub hop: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Frames below this confidence report f0 = 0.
    pub voicing_threshold: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self { frame_len: 1024, hop: 240, f0_min: 80.0, f0_max: 600.0, voicing_threshold: 0.3 }
    }
}

/// Normalised-autocorrelation pitch tracker.
#[derive(Clone, Copy, Debug, Default)]
pub struct AutocorrPitch {
    pub cfg: PitchConfig,
}

impl PitchEstimator for AutocorrPitch {
    fn estimate(&self, clip: &AudioClip) -> Result<PitchTrack> {
        estimate_pitch(clip, &self.cfg)
    }
}

// Among candidate peaks, the shortest lag within this fraction of the best
// correlation wins; suppresses sub-octave picks on strongly periodic input.
const OCTAVE_TOLERANCE: f64 = 0.97;

/// Frame `n` starts at sample `n * hop` for every start inside the clip;
/// frames reaching past the end are zero-padded.
pub fn estimate_pitch(clip: &AudioClip, cfg: &PitchConfig) -> Result<PitchTrack> {
    let sr = clip.sample_rate as f64;
    if cfg.f0_min <= 0.0 || cfg.f0_max <= cfg.f0_min || cfg.hop == 0 {
        return Err(Error::Config(format!("bad pitch band {}..{} Hz", cfg.f0_min, cfg.f0_max)));
    }
    let min_lag = (sr / cfg.f0_max).floor().max(1.0) as usize;
    let max_lag = (sr / cfg.f0_min).ceil() as usize;
    if cfg.frame_len < 2 * min_lag || cfg.frame_len <= max_lag {
        return Err(Error::Config(format!(
            "pitch frame of {} samples cannot resolve lags {min_lag}..{max_lag}",
            cfg.frame_len
        )));
    }
    let x = &clip.samples;
    let frames = if x.len() >= cfg.hop { (x.len() - 1) / cfg.hop + 1 } else { 1 };
    let mut f0 = Vec::with_capacity(frames);
    let mut conf = Vec::with_capacity(frames);
    let mut buf = vec![0.0; cfg.frame_len];
    for n in 0..frames {
        let start = n * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = x.get(start + i).copied().unwrap_or(0.0);
        }
        let (hz, c) = frame_pitch(&buf, sr, min_lag, max_lag);
        if c < cfg.voicing_threshold {
            f0.push(0.0);
        } else {
            f0.push(hz.clamp(0.0, cfg.f0_max));
        }
        conf.push(c);
    }
    PitchTrack::new(f0, conf)
}

/// Normalised cross-correlation between `frame[..N - lag]` and `frame[lag..]`.
fn nccf(frame: &[f64], lag: usize) -> f64 {
    let n = frame.len() - lag;
    let (a, b) = (&frame[..n], &frame[lag..]);
    let mut num = 0.0;
    let mut ea = 0.0;
    let mut eb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        num += x * y;
        ea += x * x;
        eb += y * y;
    }
    let den = (ea * eb).sqrt();
    if den <= 1e-20 {
        0.0
    } else {
        num / den
    }
}

fn frame_pitch(frame: &[f64], sr: f64, min_lag: usize, max_lag: usize) -> (f64, f64) {
    let r: Vec<f64> = (min_lag - 1..=max_lag + 1).map(|lag| nccf(frame, lag)).collect();
    // r[i] corresponds to lag min_lag - 1 + i
    let lag_of = |i: usize| min_lag - 1 + i;
    let mut peaks: Vec<usize> = (1..r.len() - 1)
        .filter(|&i| r[i] > 0.0 && r[i] >= r[i - 1] && r[i] >= r[i + 1])
        .collect();
    if peaks.is_empty() {
        let best = (1..r.len() - 1).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap_or(1);
        peaks.push(best);
    }
    let best = peaks.iter().map(|&i| r[i]).fold(f64::NEG_INFINITY, f64::max);
    let Some(&pick) = peaks.iter().find(|&&i| r[i] >= OCTAVE_TOLERANCE * best) else {
        return (0.0, 0.0);
    };
    let c = r[pick].clamp(0.0, 1.0);
    // parabolic refinement of the lag
    let (a, b, d) = (r[pick - 1], r[pick], r[pick + 1]);
    let denom = a - 2.0 * b + d;
    let shift = if denom.abs() > 1e-12 { (0.5 * (a - d) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    let lag = lag_of(pick) as f64 + shift;
    (sr / lag, c)
}

/// Reads a `time_s,f0_hz,confidence` sidecar.
pub fn read_pitch_sidecar(path: &Path) -> Result<PitchTrack> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["time_s", "f0_hz", "confidence"] {
        return Err(Error::Data(format!(
            "{}: expected header time_s,f0_hz,confidence",
            path.display()
        )));
    }
    let mut f0 = Vec::new();
    let mut conf = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad row {:?}", path.display(), rec)))
        };
        f0.push(parse(1)?);
        conf.push(parse(2)?);
    }
    PitchTrack::new(f0, conf)
}

/// Path of the optional sidecar next to an audio file.
pub fn sidecar_path(audio: &Path) -> std::path::PathBuf {
    let mut name = audio.as_os_str().to_owned();
    name.push(".f0.csv");
    name.into()
}
