//! Short-time spectra: log-power STFT, mel filterbank and MFCCs.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::audio::AudioClip;
use super::{FeatureMatrix, Modality};
use crate::error::{Error, Result};

pub const LOG_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub window_len: usize,
    pub hop: usize,
    pub epsilon: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        // 30 ms window, 50% overlap at 16 kHz
        Self { fft_size: 512, window_len: 480, hop: 240, epsilon: LOG_EPS }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.window_len > self.fft_size {
            return Err(Error::Config(format!(
                "window {} must be in 1..={}",
                self.window_len, self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return Err(Error::Config(format!("hop {} must be in 1..={}", self.hop, self.window_len)));
        }
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfccConfig {
    pub fft_size: usize,
    pub window_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        // 30 ms Hamming window, 10 ms hop
        Self { fft_size: 512, window_len: 480, hop: 160, n_mels: 26, n_coeffs: 13, f_min: 0.0, f_max: 8000.0 }
    }
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Number of full frames of `window` samples at `hop` spacing.
pub fn frame_count(len: usize, window: usize, hop: usize) -> Result<usize> {
    if len < window {
        return Err(Error::TooShort { len, window });
    }
    Ok((len - window) / hop + 1)
}

/// Windowed, zero-padded power spectra `|X(k, n)|^2`, one `fft/2 + 1` row per frame.
struct PowerFrames {
    frames: usize,
    bins: usize,
    power: Vec<f64>,
}

fn power_frames(samples: &[f64], fft_size: usize, window_len: usize, hop: usize) -> Result<PowerFrames> {
    let frames = frame_count(samples.len(), window_len, hop)?;
    let win = hamming(window_len);
    let bins = fft_size / 2 + 1;
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut power = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < window_len { Complex::new(samples[start + i] * win[i], 0.0) } else { Complex::new(0.0, 0.0) };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        power.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    Ok(PowerFrames { frames, bins, power })
}

/// `S(k, n) = ln(|X(k, n)|^2 + eps)`, shaped `bins x frames`.
pub fn stft_logpower(clip: &AudioClip, cfg: &StftConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let pf = power_frames(&clip.samples, cfg.fft_size, cfg.window_len, cfg.hop)?;
    let mut data = vec![0.0; pf.bins * pf.frames];
    for n in 0..pf.frames {
        for k in 0..pf.bins {
            data[k * pf.frames + n] = (pf.power[n * pf.bins + k] + cfg.epsilon).ln();
        }
    }
    FeatureMatrix::new(Modality::Stft, pf.bins, pf.frames, data)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `n_mels x (fft/2 + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub bins: usize,
    pub weights: Vec<f64>,
    /// Peak bin of each filter.
    pub centers: Vec<usize>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }
}

/// Filters peak (weight exactly 1) at FFT bins nearest to mel-uniform centres.
pub fn build_mel_filterbank(cfg: &MfccConfig, sample_rate: u32) -> Result<MelFilterbank> {
    if cfg.n_coeffs == 0 || cfg.n_mels < cfg.n_coeffs {
        return Err(Error::Config(format!(
            "need 1 <= n_coeffs ({}) <= n_mels ({})",
            cfg.n_coeffs, cfg.n_mels
        )));
    }
    let nyquist = sample_rate as f64 / 2.0;
    if !(0.0 <= cfg.f_min && cfg.f_min < cfg.f_max && cfg.f_max <= nyquist) {
        return Err(Error::Config(format!("mel band {}..{} Hz outside 0..{nyquist}", cfg.f_min, cfg.f_max)));
    }
    let bins = cfg.fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let points: Vec<usize> = (0..cfg.n_mels + 2)
        .map(|i| {
            let hz = mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64);
            (((cfg.fft_size + 1) as f64 * hz / sample_rate as f64).floor() as usize).min(bins - 1)
        })
        .collect();
    if points.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!(
            "{} mel filters are too narrow for a {}-point FFT",
            cfg.n_mels, cfg.fft_size
        )));
    }
    let mut weights = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (l, c, r) = (points[m], points[m + 1], points[m + 2]);
        let row = &mut weights[m * bins..(m + 1) * bins];
        for (k, w) in row.iter_mut().enumerate().take(r + 1).skip(l) {
            *w = if k <= c {
                (k - l) as f64 / (c - l) as f64
            } else {
                (r - k) as f64 / (r - c) as f64
            };
        }
    }
    Ok(MelFilterbank { n_mels: cfg.n_mels, bins, weights, centers: points[1..=cfg.n_mels].to_vec() })
}

/// Cepstral coefficients `c_d(n) = sum_m ln E_m(n) cos(pi d (m + 0.5) / M)`
/// with `E_m` floored at `1e-10`; shaped `n_coeffs x frames`.
pub fn mfcc(clip: &AudioClip, cfg: &MfccConfig, fb: &MelFilterbank) -> Result<FeatureMatrix> {
    if fb.bins != cfg.fft_size / 2 + 1 || fb.n_mels != cfg.n_mels {
        return Err(Error::Config("filterbank does not match the MFCC configuration".into()));
    }
    let pf = power_frames(&clip.samples, cfg.fft_size, cfg.window_len, cfg.hop)?;
    let mut log_mel = vec![0.0; cfg.n_mels];
    let mut data = vec![0.0; cfg.n_coeffs * pf.frames];
    let dct = dct_matrix(cfg.n_coeffs, cfg.n_mels);
    for n in 0..pf.frames {
        let p = &pf.power[n * pf.bins..(n + 1) * pf.bins];
        for (m, lm) in log_mel.iter_mut().enumerate() {
            let e: f64 = fb.row(m).iter().zip(p).map(|(w, x)| w * x).sum();
            *lm = e.max(LOG_EPS).ln();
        }
        for d in 0..cfg.n_coeffs {
            data[d * pf.frames + n] = cepstrum(&dct[d * cfg.n_mels..(d + 1) * cfg.n_mels], &log_mel);
        }
    }
    FeatureMatrix::new(Modality::Mfcc, cfg.n_coeffs, pf.frames, data)
}

/// Unnormalised DCT-II basis, `n_coeffs x n_mels`.
pub fn dct_matrix(n_coeffs: usize, n_mels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_coeffs * n_mels);
    for d in 0..n_coeffs {
        for m in 0..n_mels {
            out.push((PI * d as f64 * (m as f64 + 0.5) / n_mels as f64).cos());
        }
    }
    out
}

fn cepstrum(basis_row: &[f64], log_mel: &[f64]) -> f64 {
    basis_row.iter().zip(log_mel).map(|(b, l)| b * l).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, secs: f64, amp: f64) -> AudioClip {
        let n = (16000.0 * secs) as usize;
        AudioClip::new((0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin()).collect(), 16000).unwrap()
    }

    /// Direct O(N^2) DFT power of one Hamming-windowed, zero-padded frame.
    fn dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        let w = hamming(frame.len());
        (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, (&x, &wi)) in frame.iter().zip(&w).enumerate() {
                    let ang = -2.0 * PI * k as f64 * i as f64 / n_fft as f64;
                    re += x * wi * ang.cos();
                    im += x * wi * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn silence_hits_the_floor_exactly() {
        let clip = AudioClip::new(vec![0.0; 4000], 16000).unwrap();
        let s = stft_logpower(&clip, &StftConfig::default()).unwrap();
        assert_eq!(s.rows, 257);
        assert_eq!(s.cols, (4000 - 480) / 240 + 1);
        assert!(s.data.iter().all(|&v| v == LOG_EPS.ln()));
    }

    #[test]
    fn tone_peaks_at_bin_32_and_matches_direct_dft() {
        let clip = tone(1000.0, 0.5, 0.5);
        let cfg = StftConfig::default();
        let s = stft_logpower(&clip, &cfg).unwrap();
        for n in 0..s.cols {
            let col: Vec<f64> = (0..s.rows).map(|k| s.get(k, n)).collect();
            let arg = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
            assert_eq!(arg, 32);
        }
        let oracle = dft_power(&clip.samples[240 * 3..240 * 3 + 480], 512);
        for (k, p) in oracle.iter().enumerate() {
            assert!((s.get(k, 3) - (p + LOG_EPS).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn doubling_amplitude_adds_two_ln2() {
        let a = stft_logpower(&tone(700.0, 0.3, 0.1), &StftConfig::default()).unwrap();
        let b = stft_logpower(&tone(700.0, 0.3, 0.2), &StftConfig::default()).unwrap();
        let mut checked = 0;
        for (x, y) in a.data.iter().zip(&b.data) {
            if *x > LOG_EPS.ln() + 10.0 {
                assert!((y - x - 2.0 * 2f64.ln()).abs() < 1e-3);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn too_short_clip() {
        let clip = AudioClip::new(vec![0.1; 479], 16000).unwrap();
        assert!(matches!(stft_logpower(&clip, &StftConfig::default()), Err(Error::TooShort { len: 479, window: 480 })));
        let fb = build_mel_filterbank(&MfccConfig::default(), 16000).unwrap();
        assert!(matches!(mfcc(&clip, &MfccConfig::default(), &fb), Err(Error::TooShort { .. })));
    }

    #[test]
    fn filterbank_shape_and_peaks() {
        let fb = build_mel_filterbank(&MfccConfig::default(), 16000).unwrap();
        assert_eq!((fb.n_mels, fb.bins), (26, 257));
        for m in 0..26 {
            let row = fb.row(m);
            let max = row.iter().cloned().fold(0.0, f64::max);
            assert_eq!(max, 1.0);
            assert_eq!(row.iter().filter(|&&w| w == 1.0).count(), 1);
            // unimodal: rises to the peak then falls
            let peak = fb.centers[m];
            assert!(row[..=peak].windows(2).all(|w| w[1] >= w[0]));
            assert!(row[peak..].windows(2).all(|w| w[1] <= w[0]));
            assert!(row.iter().all(|&w| w >= 0.0));
        }
        assert!(fb.centers.windows(2).all(|w| w[1] > w[0]));
        for k in 1..256 {
            let total: f64 = (0..26).map(|m| fb.row(m)[k]).sum();
            assert!(total > 0.0, "bin {k} uncovered");
        }
    }

    #[test]
    fn filterbank_rejects_more_coeffs_than_filters() {
        let cfg = MfccConfig { n_mels: 10, n_coeffs: 13, ..Default::default() };
        assert!(matches!(build_mel_filterbank(&cfg, 16000), Err(Error::Config(_))));
    }

    #[test]
    fn dct_of_constant_log_energies() {
        let m = 26;
        let basis = dct_matrix(13, m);
        let log_mel = vec![-3.7; m];
        assert!((cepstrum(&basis[..m], &log_mel) - (-3.7 * m as f64)).abs() < 1e-9);
        for d in 1..13 {
            assert!(cepstrum(&basis[d * m..(d + 1) * m], &log_mel).abs() < 1e-9);
        }
    }

    #[test]
    fn silence_mfcc_is_floor_times_m() {
        let cfg = MfccConfig::default();
        let fb = build_mel_filterbank(&cfg, 16000).unwrap();
        let c = mfcc(&AudioClip::new(vec![0.0; 3200], 16000).unwrap(), &cfg, &fb).unwrap();
        assert_eq!(c.rows, 13);
        for n in 0..c.cols {
            assert!((c.get(0, n) - 26.0 * LOG_EPS.ln()).abs() < 1e-9);
            for d in 1..13 {
                assert!(c.get(d, n).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tone_concentrates_cepstral_energy_less_than_noise_spreads() {
        // A pure tone puts energy into one mel band, giving a rough log-mel profile;
        // white noise has a flat profile whose cepstrum is concentrated in c_0.
        let cfg = MfccConfig::default();
        let fb = build_mel_filterbank(&cfg, 16000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = AudioClip::new((0..8000).map(|_| rng.random_range(-0.5..0.5)).collect(), 16000).unwrap();
        let cn = mfcc(&noise, &cfg, &fb).unwrap();
        let ct = mfcc(&tone(1000.0, 0.5, 0.5), &cfg, &fb).unwrap();
        let ratio = |c: &FeatureMatrix| {
            let n = c.cols / 2;
            let hi: f64 = (1..13).map(|d| c.get(d, n).powi(2)).sum();
            hi / c.get(0, n).powi(2)
        };
        assert!(ratio(&ct) > ratio(&cn));
    }
}
