//! Channel stacking into the aligned feature tensor.

use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::align::{align_time, waveform_channel};
use super::audio::{AudioClip, TARGET_RATE};
use super::pitch::{estimate_pitch, PitchConfig, PitchTrack};
use super::spectral::{build_mel_filterbank, mfcc, stft_logpower, MelFilterbank, MfccConfig, StftConfig};
use super::{FeatureMatrix, Modality};
use crate::error::{Error, Result};

pub const N_CHANNELS: usize = 273;
pub const N_FRAMES: usize = 233;
pub const MFCC_ROWS: Range<usize> = 0..13;
pub const STFT_ROWS: Range<usize> = 13..270;
pub const F0_ROW: usize = 270;
pub const CONF_ROW: usize = 271;
pub const WAVE_ROW: usize = 272;

/// Which modality groups are kept; excluded rows are zeroed. `f0` covers
/// both the pitch and the confidence row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct FeatureSubset {
    pub mfcc: bool,
    pub stft: bool,
    pub f0: bool,
    pub wave: bool,
}

impl Default for FeatureSubset {
    fn default() -> Self {
        Self::ALL
    }
}

impl FeatureSubset {
    pub const ALL: Self = Self { mfcc: true, stft: true, f0: true, wave: true };

    pub fn is_all(&self) -> bool {
        *self == Self::ALL
    }

    /// Per-row keep flags over the 273 channels.
    pub fn row_mask(&self) -> [bool; N_CHANNELS] {
        let mut m = [false; N_CHANNELS];
        for (r, keep) in m.iter_mut().enumerate() {
            *keep = match r {
                r if MFCC_ROWS.contains(&r) => self.mfcc,
                r if STFT_ROWS.contains(&r) => self.stft,
                F0_ROW | CONF_ROW => self.f0,
                _ => self.wave,
            };
        }
        m
    }

    pub fn names(&self) -> Vec<String> {
        [("mfcc", self.mfcc), ("stft", self.stft), ("f0", self.f0), ("wave", self.wave)]
            .iter()
            .filter(|(_, on)| *on)
            .map(|(n, _)| n.to_string())
            .collect()
    }
}

impl FromStr for FeatureSubset {
    type Err = Error;

    /// Comma or plus separated list, e.g. `mfcc,stft` or `mfcc+stft`.
    fn from_str(s: &str) -> Result<Self> {
        let names: Vec<String> =
            s.split([',', '+']).map(|p| p.trim().to_ascii_lowercase()).filter(|p| !p.is_empty()).collect();
        Self::try_from(names)
    }
}

impl TryFrom<Vec<String>> for FeatureSubset {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        let mut s = Self { mfcc: false, stft: false, f0: false, wave: false };
        for n in &names {
            match n.to_ascii_lowercase().as_str() {
                "mfcc" => s.mfcc = true,
                "stft" => s.stft = true,
                "f0" | "pitch" => s.f0 = true,
                "wave" | "waveform" => s.wave = true,
                other => return Err(Error::Config(format!("unknown feature modality '{other}'"))),
            }
        }
        if names.is_empty() {
            return Err(Error::Config("feature subset is empty".into()));
        }
        Ok(s)
    }
}

impl From<FeatureSubset> for Vec<String> {
    fn from(s: FeatureSubset) -> Self {
        s.names()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub stft: StftConfig,
    pub mfcc: MfccConfig,
    pub pitch: PitchConfig,
    /// Common frame count T.
    pub frames: usize,
    /// Recompute T as the corpus median duration at extraction time.
    pub median_frames: bool,
    pub subset: FeatureSubset,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            mfcc: MfccConfig::default(),
            pitch: PitchConfig::default(),
            frames: N_FRAMES,
            median_frames: false,
            subset: FeatureSubset::ALL,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.stft.bins() != STFT_ROWS.len() {
            return Err(Error::Config(format!(
                "fft_size {} gives {} bins; the channel layout needs {}",
                self.stft.fft_size,
                self.stft.bins(),
                STFT_ROWS.len()
            )));
        }
        if self.mfcc.n_coeffs != MFCC_ROWS.len() {
            return Err(Error::Config(format!("the channel layout needs {} MFCCs", MFCC_ROWS.len())));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be positive".into()));
        }
        Ok(())
    }
}

/// Feature matrix of shape `273 x frames`, row-major, rows laid out as
/// MFCC(13), STFT log-power(257), F0, F0 confidence, waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFeatureTensor {
    pub frames: usize,
    pub data: Vec<f64>,
}

impl AlignedFeatureTensor {
    pub fn new(frames: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || data.len() != N_CHANNELS * frames {
            return Err(Error::Shape(format!(
                "feature tensor needs {N_CHANNELS}x{frames} values, got {}",
                data.len()
            )));
        }
        Ok(Self { frames, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (N_CHANNELS, self.frames)
    }

    pub fn get(&self, r: usize, t: usize) -> f64 {
        self.data[r * self.frames + t]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.frames..(r + 1) * self.frames]
    }

    pub fn apply_subset(&mut self, subset: &FeatureSubset) {
        for (r, keep) in subset.row_mask().iter().enumerate() {
            if !keep {
                self.data[r * self.frames..(r + 1) * self.frames].fill(0.0);
            }
        }
    }

    /// Layout as `(name, first row, row count)`.
    pub fn layout() -> Vec<(&'static str, usize, usize)> {
        vec![
            ("mfcc", MFCC_ROWS.start, MFCC_ROWS.len()),
            ("stft_logpower", STFT_ROWS.start, STFT_ROWS.len()),
            ("f0_hz", F0_ROW, 1),
            ("f0_confidence", CONF_ROW, 1),
            ("waveform", WAVE_ROW, 1),
        ]
    }
}

/// Reusable extractor holding the mel filterbank for a configuration.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub cfg: FeatureConfig,
    fb: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let fb = build_mel_filterbank(&cfg.mfcc, TARGET_RATE)?;
        Ok(Self { cfg, fb })
    }

    /// Extracts the tensor from a 16 kHz clip. `pitch` replaces the built-in
    /// tracker, e.g. with a sidecar track.
    pub fn extract(&self, clip: &AudioClip, pitch: Option<&PitchTrack>) -> Result<AlignedFeatureTensor> {
        if clip.sample_rate != TARGET_RATE {
            return Err(Error::UnsupportedRate(clip.sample_rate));
        }
        let t = self.cfg.frames;
        let mf = align_time(&mfcc(clip, &self.cfg.mfcc, &self.fb)?, t)?;
        let st = align_time(&stft_logpower(clip, &self.cfg.stft)?, t)?;
        let owned;
        let track = match pitch {
            Some(p) => p,
            None => {
                owned = estimate_pitch(clip, &self.cfg.pitch)?;
                &owned
            }
        };
        if track.is_empty() {
            return Err(Error::Data("pitch track has no frames".into()));
        }
        let n = track.len();
        let f0 = align_time(&FeatureMatrix::new(Modality::F0, 1, n, track.f0.clone())?, t)?;
        let conf = align_time(&FeatureMatrix::new(Modality::F0Conf, 1, n, track.confidence.clone())?, t)?;
        let wave = waveform_channel(clip, t)?;

        let mut data = Vec::with_capacity(N_CHANNELS * t);
        for m in [&mf, &st, &f0, &conf, &wave] {
            data.extend_from_slice(&m.data);
        }
        let mut out = AlignedFeatureTensor::new(t, data)?;
        out.apply_subset(&self.cfg.subset);
        Ok(out)
    }
}

/// Default-configuration extraction with the built-in pitch tracker.
pub fn fuse_features(clip: &AudioClip) -> Result<AlignedFeatureTensor> {
    FeatureExtractor::new(FeatureConfig::default())?.extract(clip, None)
}
