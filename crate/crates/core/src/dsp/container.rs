//! `CRYF` binary feature files and their JSON sidecars.
//!
//! Layout (little-endian): magic `CRYF`, `u32` version, `u32` channel count,
//! `u32` frame count, then `channels * frames` `f32` values row-major.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fuse::{AlignedFeatureTensor, N_CHANNELS};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CRYF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelBlock {
    pub name: String,
    pub start: usize,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub source: String,
    /// Rate of the source file before resampling.
    pub sample_rate: u32,
    pub duration_s: f64,
    pub frames: usize,
    pub config_hash: String,
    pub tool_version: String,
    pub subset: Vec<String>,
    pub channel_layout: Vec<ChannelBlock>,
}

impl FeatureSidecar {
    pub fn new(source: &Path, sample_rate: u32, duration_s: f64, frames: usize, config_hash: &str, subset: Vec<String>) -> Self {
        Self {
            source: source.display().to_string(),
            sample_rate,
            duration_s,
            frames,
            config_hash: config_hash.to_string(),
            tool_version: crate::VERSION.to_string(),
            subset,
            channel_layout: AlignedFeatureTensor::layout()
                .into_iter()
                .map(|(name, start, rows)| ChannelBlock { name: name.into(), start, rows })
                .collect(),
        }
    }
}

/// `<features>.json` next to a `.cryf` file.
pub fn sidecar_path(cryf: &Path) -> PathBuf {
    cryf.with_extension("json")
}

pub fn encode(t: &AlignedFeatureTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(N_CHANNELS as u32).to_le_bytes());
    out.extend_from_slice(&(t.frames as u32).to_le_bytes());
    for &v in &t.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<AlignedFeatureTensor> {
    let bad = |msg: String| Error::Parse { path: origin.to_path_buf(), msg };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a CRYF file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (version, channels, frames) = (word(1), word(2) as usize, word(3) as usize);
    if version != VERSION {
        return Err(bad(format!("unsupported CRYF version {version}")));
    }
    if channels != N_CHANNELS {
        return Err(bad(format!("expected {N_CHANNELS} channels, found {channels}")));
    }
    let body = &bytes[16..];
    if body.len() != 4 * channels * frames {
        return Err(bad(format!("payload of {} bytes does not match {channels}x{frames}", body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    AlignedFeatureTensor::new(frames, data)
}

pub fn write_cryf(path: &Path, t: &AlignedFeatureTensor) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_cryf(path: &Path) -> Result<AlignedFeatureTensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_sidecar(path: &Path, s: &FeatureSidecar) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(s)?).map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(path: &Path) -> Result<FeatureSidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_roundtrip() {
        let data: Vec<f64> = (0..273 * 233).map(|i| (i as f64 * 0.001).sin() as f32 as f64).collect();
        let t = AlignedFeatureTensor::new(233, data).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"CRYF");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 17, 1, 0, 0, 233, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 4 * 273 * 233);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.cryf");
        write_cryf(&p, &t).unwrap();
        assert_eq!(read_cryf(&p).unwrap(), t);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let t = AlignedFeatureTensor::new(2, vec![0.0; 273 * 2]).unwrap();
        let mut b = encode(&t);
        assert!(decode(&b[..b.len() - 1], Path::new("x")).is_err());
        b[4] = 2;
        assert!(decode(&b, Path::new("x")).is_err());
        assert!(decode(b"RIFF", Path::new("x")).is_err());
    }

    #[test]
    fn sidecar_records_layout() {
        let s = FeatureSidecar::new(Path::new("a.wav"), 8000, 1.5, 233, "abc", vec!["mfcc".into()]);
        assert_eq!(s.channel_layout.iter().map(|b| b.rows).sum::<usize>(), 273);
        let dir = tempfile::tempdir().unwrap();
        let p = sidecar_path(&dir.path().join("a.cryf"));
        write_sidecar(&p, &s).unwrap();
        assert_eq!(read_sidecar(&p).unwrap(), s);
    }
}
