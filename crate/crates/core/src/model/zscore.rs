//! Per-channel standardisation fitted on the training split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_STD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    /// Statistics over every frame of every sample; each sample is a
    /// row-major `[n_features, frames]` matrix.
    pub fn fit<'a, I>(samples: I, n_features: usize, frames: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut sum = vec![0.0f64; n_features];
        let mut sq = vec![0.0f64; n_features];
        let mut count = 0usize;
        for s in samples {
            if s.len() != n_features * frames {
                return Err(Error::Shape(format!(
                    "sample has {} values, expected {n_features}x{frames}",
                    s.len()
                )));
            }
            for (c, row) in s.chunks_exact(frames).enumerate() {
                for &v in row {
                    let v = v as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += frames;
        }
        if count == 0 {
            return Err(Error::Data("cannot fit normalisation on an empty set".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(MIN_STD))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, sample: &mut [f32]) -> Result<()> {
        let f = self.mean.len();
        if f == 0 || sample.len() % f != 0 {
            return Err(Error::Config(format!(
                "normalisation has {f} channels; sample of {} values does not match",
                sample.len()
            )));
        }
        let frames = sample.len() / f;
        for (c, row) in sample.chunks_exact_mut(frames).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            row.iter_mut().for_each(|v| *v = ((*v as f64 - m) / s) as f32);
        }
        Ok(())
    }
}
