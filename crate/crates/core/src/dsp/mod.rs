//! Acoustic front end: audio ingestion, spectral and pitch features, and the
//! fused `273 x T` feature tensor fed to the classifiers.

mod align;
pub mod audio;
pub mod container;
mod fuse;
pub mod pitch;
pub mod spectral;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use align::{align_time, frames_for_duration, median_frames, waveform_channel};
pub use audio::{load_wav, resample_to_16k, wav_duration, write_wav_pcm16, AudioClip, TARGET_RATE};
pub use fuse::{
    fuse_features, AlignedFeatureTensor, FeatureConfig, FeatureExtractor, FeatureSubset, CONF_ROW, F0_ROW,
    MFCC_ROWS, N_CHANNELS, N_FRAMES, STFT_ROWS, WAVE_ROW,
};
pub use pitch::{estimate_pitch, AutocorrPitch, PitchConfig, PitchEstimator, PitchTrack};
pub use spectral::{build_mel_filterbank, mfcc, stft_logpower, MelFilterbank, MfccConfig, StftConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Mfcc,
    Stft,
    F0,
    F0Conf,
    Wave,
}

/// A `rows x cols` matrix (features by frames), stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub modality: Modality,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(modality: Modality, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 || rows == 0 {
            return Err(Error::Shape(format!("{modality:?} matrix needs at least one row and frame")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{modality:?} matrix {rows}x{cols} given {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("{modality:?} matrix has non-finite entries")));
        }
        Ok(Self { modality, rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}
