//! Synthetic cry-like corpus: harmonic sources following per-class F0
//! contours, with a slow amplitude envelope and additive white noise.
//!
//! Every clip belongs to a synthetic "baby" whose pitch and timbre are
//! slightly shifted, so several clips share a group and the leakage-safe
//! split machinery has something to do.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{SampleRecord, Split};
use crate::dsp::{write_wav_pcm16, AudioClip, TARGET_RATE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClass {
    /// ASCII letters only, so generated file names parse as Baby2020 names.
    pub name: String,
    pub base_f0: f64,
    /// Hz per second, centred on the middle of the clip.
    pub slope: f64,
    pub vibrato_rate: f64,
    /// Peak deviation in Hz.
    pub vibrato_depth: f64,
}

impl SynthClass {
    pub fn new(name: &str, base_f0: f64, slope: f64, vibrato_rate: f64, vibrato_depth: f64) -> Self {
        Self { name: name.into(), base_f0, slope, vibrato_rate, vibrato_depth }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<SynthClass>,
    pub clips_per_class: usize,
    pub clips_per_baby: usize,
    /// Rate of the amplitude envelope in Hz.
    pub am_rate: f64,
    pub harmonics: usize,
    pub snr_db: f64,
    pub clip_seconds: f64,
    /// Relative spread of per-baby F0 offsets.
    pub baby_spread: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: vec![
                SynthClass::new("sleepy", 250.0, -20.0, 4.0, 6.0),
                SynthClass::new("hungry", 350.0, 25.0, 5.5, 10.0),
                SynthClass::new("pain", 450.0, 0.0, 7.0, 14.0),
            ],
            clips_per_class: 40,
            clips_per_baby: 4,
            am_rate: 2.5,
            harmonics: 6,
            snr_db: 20.0,
            clip_seconds: 3.0,
            baby_spread: 0.02,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("synthetic corpus needs at least two classes".into()));
        }
        let mut names = BTreeSet::new();
        let mut tuples = BTreeSet::new();
        for c in &self.classes {
            if c.name.is_empty() || !c.name.bytes().all(|b| b.is_ascii_alphabetic()) {
                return Err(Error::Config(format!("class name '{}' must be ASCII letters", c.name)));
            }
            if !names.insert(c.name.clone()) {
                return Err(Error::Config(format!("duplicate class '{}'", c.name)));
            }
            let params = [c.base_f0, c.slope, c.vibrato_rate, c.vibrato_depth];
            if params.iter().any(|v| !v.is_finite()) || c.base_f0 <= 0.0 || c.vibrato_rate < 0.0 || c.vibrato_depth < 0.0 {
                return Err(Error::Config(format!("class '{}' has invalid contour parameters", c.name)));
            }
            if !tuples.insert(params.map(f64::to_bits)) {
                return Err(Error::Config(format!("class '{}' duplicates another class's contour", c.name)));
            }
        }
        if !(1.0..=30.0).contains(&self.clip_seconds) {
            return Err(Error::Config(format!("clip length {} s outside [1, 30]", self.clip_seconds)));
        }
        if self.clips_per_class == 0 || self.clips_per_baby == 0 || self.harmonics == 0 {
            return Err(Error::Config("clip counts and harmonics must be positive".into()));
        }
        if !self.snr_db.is_finite() || !self.am_rate.is_finite() || self.am_rate < 0.0 {
            return Err(Error::Config("snr_db and am_rate must be finite, am_rate non-negative".into()));
        }
        if !(0.0..0.5).contains(&self.baby_spread) {
            return Err(Error::Config("baby_spread must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Per-source variation shared by all clips of one synthetic baby.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BabyVoice {
    pub f0_scale: f64,
    /// Amplitude ratio between consecutive harmonics.
    pub tilt: f64,
}

impl Default for BabyVoice {
    fn default() -> Self {
        Self { f0_scale: 1.0, tilt: 0.7 }
    }
}

/// One 16 kHz clip of class `class`.
pub fn synth_clip(spec: &SynthSpec, class: usize, voice: BabyVoice, rng: &mut impl Rng) -> AudioClip {
    let c = &spec.classes[class];
    let sr = TARGET_RATE as f64;
    let n = (spec.clip_seconds * sr).round() as usize;
    let half = spec.clip_seconds / 2.0;
    let jitter = 1.0 + rng.random_range(-0.005..0.005);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let nyquist_guard = 0.95 * sr / 2.0;

    let mut phase = 0.0;
    let mut x = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let f = c.base_f0 * voice.f0_scale * jitter
            + c.slope * (t - half)
            + c.vibrato_depth * (2.0 * PI * c.vibrato_rate * t + vib_phase).sin();
        phase += 2.0 * PI * f / sr;
        let mut s = 0.0;
        let mut amp = 1.0;
        for k in 1..=spec.harmonics {
            if k as f64 * f >= nyquist_guard {
                break;
            }
            s += amp * (k as f64 * phase).sin();
            amp *= voice.tilt;
        }
        let env = 0.55 - 0.45 * (2.0 * PI * spec.am_rate * t + am_phase).cos();
        x.push(s * env);
    }
    // 10 ms raised-cosine fades
    let fade = (0.01 * sr) as usize;
    for i in 0..fade.min(n / 2) {
        let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let target_rms = 0.1;
    let noise_std = target_rms / 10f64.powf(spec.snr_db / 20.0);
    for v in &mut x {
        let z: f64 = StandardNormal.sample(rng);
        *v = *v * target_rms / rms + noise_std * z;
    }
    AudioClip::new(x, TARGET_RATE).expect("synthesised samples are finite")
}

/// Planned clip: class index, baby index and the clip's index within its baby.
fn plan(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize)> {
    let mut classes: Vec<usize> = (0..spec.classes.len()).flat_map(|c| std::iter::repeat_n(c, spec.clips_per_class)).collect();
    classes.shuffle(rng);
    classes
        .into_iter()
        .enumerate()
        .map(|(j, c)| (c, j / spec.clips_per_baby, j % spec.clips_per_baby))
        .collect()
}

pub fn baby_group(baby: usize) -> String {
    format!("{baby:03}SYN")
}

/// Writes one PCM16 WAV per clip plus `manifest.jsonl` into `out_dir` and
/// returns the records. File names follow the Baby2020 convention, so
/// [`super::build_manifest`] recovers the same labels and groups.
pub fn synth_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clips = plan(spec, &mut rng);
    let n_babies = clips.iter().map(|c| c.1).max().map_or(0, |b| b + 1);
    let voices: Vec<BabyVoice> = (0..n_babies)
        .map(|_| BabyVoice {
            f0_scale: 1.0 + rng.random_range(-spec.baby_spread..=spec.baby_spread),
            tilt: rng.random_range(0.55..0.85),
        })
        .collect();
    let mut records = Vec::with_capacity(clips.len());
    for (class, baby, k) in clips {
        let clip_seed: u64 = rng.random();
        let mut clip_rng = ChaCha8Rng::seed_from_u64(clip_seed);
        let audio = synth_clip(spec, class, voices[baby], &mut clip_rng);
        let label = &spec.classes[class].name;
        let group = baby_group(baby);
        let path = out_dir.join(format!("{label}{group}_1_{:03}.wav", k + 1));
        write_wav_pcm16(&path, &audio)?;
        records.push(SampleRecord {
            path: path.to_string_lossy().into_owned(),
            label: label.clone(),
            group,
            split: Split::Unassigned,
            duration_s: audio.duration_s(),
            features: None,
        });
    }
    super::write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}
