use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::scaler::Scaler;
use super::series::LoadSeries;
use super::split::{split_stations, StationSplit};
use super::time::parse_timestamp;
use super::window::{make_windows, WindowDataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub source_stride: usize,
    pub target_stride: usize,
    /// Number of earliest-active stations used for pre-training.
    pub n_source: usize,
    /// Target stations fine-tune before this instant and are evaluated after.
    pub target_cutoff: String,
    /// Stop source histories at the cutoff.
    pub source_until_cutoff: bool,
    /// Keep at most this many (earliest) fine-tune windows per target.
    pub max_finetune_windows: Option<usize>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            input_len: 96,
            horizon: 24,
            source_stride: 1,
            target_stride: 1,
            n_source: 21,
            target_cutoff: "2023-01-01T00:00:00Z".into(),
            source_until_cutoff: true,
            max_finetune_windows: None,
        }
    }
}

impl WindowConfig {
    pub fn cutoff(&self) -> Result<i64> {
        parse_timestamp(&self.target_cutoff)
            .ok_or_else(|| Error::invalid(format!("unparseable timestamp {:?}", self.target_cutoff)))
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        for (name, v) in [
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("source_stride", self.source_stride),
            ("target_stride", self.target_stride),
            ("n_source", self.n_source),
        ] {
            if v == 0 {
                p.push(format!("{name} must be at least 1"));
            }
        }
        if let Err(e) = self.cutoff() {
            p.push(format!("target_cutoff: {e}"));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Standardized windows for every phase of the transfer protocol.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: StationSplit,
    pub scaler: Scaler,
    pub source: WindowDataset,
    pub target_finetune: WindowDataset,
    pub target_eval: WindowDataset,
    pub warnings: Vec<String>,
}

impl PreparedData {
    /// Window counts per station as `(finetune_or_source, eval)`.
    pub fn window_counts(&self) -> BTreeMap<String, (usize, usize)> {
        let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for id in self.split.source_ids.iter().chain(&self.split.target_ids) {
            counts.insert(id.clone(), (0, 0));
        }
        for w in self.source.windows.iter().chain(&self.target_finetune.windows) {
            counts.entry(w.station_id.clone()).or_default().0 += 1;
        }
        for w in &self.target_eval.windows {
            counts.entry(w.station_id.clone()).or_default().1 += 1;
        }
        counts
    }
}

/// Splits stations, fits the scaler on the source slices and cuts windows.
pub fn prepare_windows(series: &BTreeMap<String, LoadSeries>, cfg: &WindowConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let split = split_stations(series, cfg.n_source, cfg.cutoff()?)?;
    let slices = split.slices(series, cfg.source_until_cutoff);
    let mut warnings = split.warnings.clone();
    warnings.extend(slices.warnings.iter().cloned());

    let rows: Vec<_> = slices.source.iter().flat_map(|s| s.features()).collect();
    let scaler = Scaler::fit(&rows).map_err(|e| match e {
        Error::EmptyDataset(_) => Error::EmptyDataset("source stations have no data before the cutoff".into()),
        e => e,
    })?;

    let cut = |list: &[LoadSeries], stride: usize| -> Result<WindowDataset> {
        let mut ds = WindowDataset::empty(cfg.input_len, cfg.horizon);
        for s in list {
            ds.extend(make_windows(s, &scaler, cfg.input_len, cfg.horizon, stride)?);
        }
        Ok(ds)
    };
    let source = cut(&slices.source, cfg.source_stride)?;
    let mut target_finetune = cut(&slices.target_finetune, cfg.target_stride)?;
    if let Some(max) = cfg.max_finetune_windows {
        target_finetune.truncate_per_station(max);
    }
    let target_eval = cut(&slices.target_eval, cfg.target_stride)?;
    if source.is_empty() {
        return Err(Error::EmptyDataset(
            "source slices are shorter than input_len + horizon".into(),
        ));
    }
    Ok(PreparedData {
        split,
        scaler,
        source,
        target_finetune,
        target_eval,
        warnings,
    })
}
