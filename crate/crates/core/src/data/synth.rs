//! Seeded synthetic charging-load generator for desk-scale experiments.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::series::LoadSeries;
use super::time::{format_timestamp, parse_timestamp};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub stations: usize,
    /// First bucket of station 0 (ISO-8601).
    pub start: String,
    /// Common exclusive end of all series (ISO-8601).
    pub end: String,
    /// Hours between consecutive station start times.
    pub stagger_hours: u32,
    pub granularity: i64,
    pub level: [f64; 2],
    pub daily_amp: [f64; 2],
    pub weekly_amp: [f64; 2],
    pub scale: [f64; 2],
    pub offset: [f64; 2],
    pub phase_hours: [f64; 2],
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            stations: 26,
            start: "2022-11-30T00:00:00Z".into(),
            end: "2023-01-15T00:00:00Z".into(),
            stagger_hours: 24,
            granularity: 3600,
            level: [4.0, 6.0],
            daily_amp: [2.0, 4.0],
            weekly_amp: [0.5, 1.5],
            scale: [0.8, 1.2],
            offset: [-0.5, 0.5],
            phase_hours: [-2.0, 2.0],
            noise_std: 0.3,
        }
    }
}

/// Per-station draw of the generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StationProfile {
    pub level: f64,
    pub daily_amp: f64,
    pub weekly_amp: f64,
    pub scale: f64,
    pub offset: f64,
    pub phase_hours: f64,
}

impl StationProfile {
    /// Noise-free, unclipped load at absolute time `t` (UTC seconds).
    pub fn clean_value(&self, t: i64) -> f64 {
        let h = t as f64 / 3600.0 + self.phase_hours;
        let base = self.level + self.daily_amp * (TAU * h / 24.0).sin() + self.weekly_amp * (TAU * h / 168.0).sin();
        self.scale * base + self.offset
    }
}

fn draw(r: &mut rng::Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        r.gen_range(range[0]..range[1])
    } else {
        range[0]
    }
}

impl SynthConfig {
    fn times(&self) -> Result<(i64, i64)> {
        let s = parse_timestamp(&self.start).ok_or_else(|| Error::invalid(format!("bad synth start {:?}", self.start)))?;
        let e = parse_timestamp(&self.end).ok_or_else(|| Error::invalid(format!("bad synth end {:?}", self.end)))?;
        Ok((s, e))
    }

    pub fn validate(&self) -> Result<()> {
        let (s, e) = self.times()?;
        if self.granularity <= 0 || 86_400 % self.granularity != 0 {
            return Err(Error::invalid("synth granularity must divide 86400"));
        }
        if s.rem_euclid(self.granularity) != 0 {
            return Err(Error::invalid(format!("synth start {} not aligned to granularity", format_timestamp(s))));
        }
        let last_start = s + (self.stations.saturating_sub(1) as i64) * self.stagger_hours as i64 * 3600;
        if self.stations == 0 || last_start >= e {
            return Err(Error::invalid("synth window leaves some station without data"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::invalid("noise_std must be >= 0"));
        }
        Ok(())
    }

    pub fn profile(&self, seed: u64, station: usize) -> StationProfile {
        let mut r = rng::stream(seed, &[0x5eed, station as u64]);
        StationProfile {
            level: draw(&mut r, self.level),
            daily_amp: draw(&mut r, self.daily_amp),
            weekly_amp: draw(&mut r, self.weekly_amp),
            scale: draw(&mut r, self.scale),
            offset: draw(&mut r, self.offset),
            phase_hours: draw(&mut r, self.phase_hours),
        }
    }
}

pub fn station_id(i: usize) -> String {
    format!("S{i:02}")
}

/// Generates one series per station: daily and weekly sinusoids, a
/// station-specific affine distortion, Gaussian noise, clipped at zero.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<BTreeMap<String, LoadSeries>> {
    cfg.validate()?;
    let (start, end) = cfg.times()?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = BTreeMap::new();
    for i in 0..cfg.stations {
        let p = cfg.profile(seed, i);
        let t0 = start + i as i64 * cfg.stagger_hours as i64 * 3600;
        let t0 = t0 - t0.rem_euclid(cfg.granularity);
        let n = ((end - t0) / cfg.granularity) as usize;
        let mut r = rng::stream(seed, &[0x401e, i as u64]);
        let values = (0..n)
            .map(|k| {
                let t = t0 + k as i64 * cfg.granularity;
                let eps = if cfg.noise_std > 0.0 { noise.sample(&mut r) } else { 0.0 };
                (p.clean_value(t) + eps).max(0.0)
            })
            .collect();
        let id = station_id(i);
        out.insert(id.clone(), LoadSeries::new(id, t0, cfg.granularity, values));
    }
    Ok(out)
}
