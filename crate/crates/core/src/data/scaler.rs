use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to per-channel standard deviations.
pub const MIN_STD: f64 = 1e-8;

/// Per-channel affine standardization `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Sample mean and population standard deviation over time-major rows.
    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::EmptyDataset("cannot fit a scaler on no samples".into()));
        };
        if rows.len() < 2 {
            return Err(Error::invalid("scaler needs at least 2 samples per channel"));
        }
        let c = first.as_ref().len();
        if c == 0 || rows.iter().any(|r| r.as_ref().len() != c) {
            return Err(Error::invalid("scaler rows must share a non-zero channel count"));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; c];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(r.as_ref()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for r in rows {
            for ((s, &v), &m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(MIN_STD)).collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.channels() {
            return Err(Error::invalid(format!(
                "scaler has {} channels, input row has {len}",
                self.channels()
            )));
        }
        Ok(())
    }

    pub fn standardize(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check(row.len())?;
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&m, &s))| (x - m) / s)
            .collect())
    }

    pub fn inverse_standardize(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check(row.len())?;
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&z, (&m, &s))| z * s + m)
            .collect())
    }

    pub fn standardize_value(&self, channel: usize, x: f64) -> f64 {
        (x - self.mean[channel]) / self.std[channel]
    }

    pub fn inverse_value(&self, channel: usize, z: f64) -> f64 {
        z * self.std[channel] + self.mean[channel]
    }
}
