//! Audio clips, WAV ingestion and sample-rate conversion.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

pub const TARGET_RATE: u32 = 16_000;

/// Mono audio at its native amplitude scale.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("non-finite audio sample".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a RIFF/WAVE file, averaging channels to mono. Integer PCM is scaled
/// by `2^(bits - 1)`; IEEE float samples are taken as-is.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_error(path, e))?
        }
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!("{fmt:?} with {bits} bits per sample")))
        }
    };
    if interleaved.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / frame.len() as f64)
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        // the file is already open, so read failures mean a truncated or corrupt stream
        hound::Error::IoError(io) => Error::Parse { path: path.to_path_buf(), msg: io.to_string() },
        hound::Error::Unsupported => Error::UnsupportedFormat(format!("{}", path.display())),
        other => Error::Parse { path: path.to_path_buf(), msg: other.to_string() },
    }
}

/// Writes a mono 16-bit PCM file, clipping to [-1, 1].
pub fn write_wav_pcm16(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = hound::WavWriter::new(std::io::BufWriter::new(file), spec).map_err(|e| wav_error(path, e))?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

/// Duration of a WAV file from its header.
pub fn wav_duration(path: &Path) -> Result<f64> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}

const SINC_ZEROS: f64 = 16.0;

/// Band-limited windowed-sinc conversion to 16 kHz. Output length is
/// `round(len * 16000 / rate)`.
pub fn resample_to_16k(clip: &AudioClip) -> Result<AudioClip> {
    resample(clip, TARGET_RATE)
}

pub fn resample(clip: &AudioClip, out_rate: u32) -> Result<AudioClip> {
    if clip.sample_rate < 4000 {
        return Err(Error::UnsupportedRate(clip.sample_rate));
    }
    if clip.sample_rate == out_rate {
        return Ok(clip.clone());
    }
    let in_rate = clip.sample_rate as f64;
    let ratio = out_rate as f64 / in_rate;
    let out_len = ((clip.len() as f64) * ratio).round().max(1.0) as usize;
    // cutoff relative to the input rate, a little below the lower Nyquist
    let cutoff = 0.95 * ratio.min(1.0);
    let half_width = SINC_ZEROS / cutoff;
    let x = &clip.samples;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let pos = n as f64 / ratio;
        let lo = (pos - half_width).ceil().max(0.0) as usize;
        let hi = ((pos + half_width).floor() as usize).min(x.len() - 1);
        let mut acc = 0.0;
        for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let t = k as f64 - pos;
            let arg = cutoff * t;
            let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
            // Blackman window over [-half_width, half_width]
            let u = (t / half_width + 1.0) * 0.5;
            let win = 0.42 - 0.5 * (2.0 * PI * u).cos() + 0.08 * (4.0 * PI * u).cos();
            acc += xk * cutoff * sinc * win;
        }
        out.push(acc);
    }
    AudioClip::new(out, out_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn sine(freq: f64, rate: u32, secs: f64, amp: f64) -> AudioClip {
        let n = (rate as f64 * secs) as usize;
        AudioClip::new(
            (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()).collect(),
            rate,
        )
        .unwrap()
    }

    fn peak_hz(clip: &AudioClip) -> f64 {
        let n = clip.len();
        let mut buf: Vec<Complex<f64>> = clip.samples.iter().map(|&x| Complex::new(x, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let k = (1..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
        k as f64 * clip.sample_rate as f64 / n as f64
    }

    #[test]
    fn pcm16_sine_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let clip = sine(440.0, 16000, 1.0, 0.5);
        write_wav_pcm16(&path, &clip).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.len(), 16000);
        assert_eq!(back.sample_rate, 16000);
        let peak = back.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // 0.5 * 32767 / 32768
        assert!((peak - 0.5 * 32767.0 / 32768.0).abs() < 2.0 / 32768.0);
    }

    #[test]
    fn stereo_identical_channels_mix_to_either() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        let vals: Vec<i16> = (0..100).map(|i| (i * 97 % 2000) as i16 - 1000).collect();
        for &v in &vals {
            w.write_sample(v).unwrap();
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let clip = load_wav(&path).unwrap();
        assert_eq!(clip.sample_rate, 8000);
        let expected: Vec<f64> = vals.iter().map(|&v| v as f64 / 32768.0).collect();
        assert_eq!(clip.samples, expected);
    }

    #[test]
    fn float_wav_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 22050, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for v in [0.25f32, -0.5, 0.75] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let clip = load_wav(&path).unwrap();
        assert_eq!(clip.samples, vec![0.25, -0.5, 0.75]);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.wav");
        std::fs::write(&bad, b"RIFF\x04\x00\x00\x00WAVEjunk").unwrap();
        let err = load_wav(&bad);
    assert!(matches!(err, Err(Error::Parse { .. }) | Err(Error::UnsupportedFormat(_))), "{err:?}");
        let empty = dir.path().join("empty.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        hound::WavWriter::create(&empty, spec).unwrap().finalize().unwrap();
        assert!(matches!(load_wav(&empty), Err(Error::EmptyAudio)));
        assert!(matches!(load_wav(&dir.path().join("missing.wav")), Err(Error::Io { .. })));
    }

    #[test]
    fn resample_identity_at_16k() {
        let clip = sine(300.0, 16000, 0.1, 0.3);
        assert_eq!(resample_to_16k(&clip).unwrap(), clip);
    }

    #[test]
    fn resample_upsampled_tone_keeps_frequency() {
        let clip = sine(1000.0, 8000, 1.0, 0.8);
        let out = resample_to_16k(&clip).unwrap();
        assert_eq!(out.len(), 16000);
        assert!((peak_hz(&out) - 1000.0).abs() <= 1.0);
    }

    #[test]
    fn resample_length_from_48k() {
        let clip = sine(440.0, 48000, 0.5, 0.5);
        let out = resample_to_16k(&clip).unwrap();
        assert!((out.len() as i64 - 8000).abs() <= 1);
        assert!((peak_hz(&out) - 440.0).abs() <= 2.0);
    }

    #[test]
    fn resample_rejects_low_rates() {
        let clip = AudioClip::new(vec![0.0; 100], 3000).unwrap();
        assert!(matches!(resample_to_16k(&clip), Err(Error::UnsupportedRate(3000))));
    }
}
