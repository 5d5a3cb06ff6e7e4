use super::scaler::Scaler;
use super::series::{LoadSeries, LOAD_CHANNEL, NUM_CHANNELS};
use crate::error::Result;

/// One supervised pair cut from a single station's series.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub station_id: String,
    /// Timestamp of the first input step.
    pub input_start: i64,
    /// Timestamp of the first forecast step.
    pub target_start: i64,
    pub granularity: i64,
    /// Standardized features, `[input_len, channels]` row-major.
    pub input: Vec<f64>,
    /// Standardized load for the next `horizon` steps.
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowDataset {
    pub input_len: usize,
    pub horizon: usize,
    pub channels: usize,
    pub windows: Vec<Window>,
}

/// Window start offsets: `0, stride, 2·stride, …` while the pair fits.
pub fn window_offsets(len: usize, input_len: usize, horizon: usize, stride: usize) -> Vec<usize> {
    let need = input_len + horizon;
    if stride == 0 || len < need {
        return Vec::new();
    }
    (0..=len - need).step_by(stride).collect()
}

impl WindowDataset {
    pub fn empty(input_len: usize, horizon: usize) -> Self {
        Self {
            input_len,
            horizon,
            channels: NUM_CHANNELS,
            windows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn extend(&mut self, other: WindowDataset) {
        self.windows.extend(other.windows);
    }

    /// Holds out the chronologically last `frac` of each station's windows.
    /// Stations with a single window keep it for training.
    pub fn split_validation(&self, frac: f64) -> (WindowDataset, WindowDataset) {
        let mut train = WindowDataset::empty(self.input_len, self.horizon);
        let mut val = WindowDataset::empty(self.input_len, self.horizon);
        let mut i = 0;
        while i < self.windows.len() {
            let id = &self.windows[i].station_id;
            let j = i + self.windows[i..].iter().take_while(|w| &w.station_id == id).count();
            let n = j - i;
            let n_val = if n < 2 { 0 } else { ((n as f64 * frac).ceil() as usize).clamp(1, n - 1) };
            train.windows.extend_from_slice(&self.windows[i..j - n_val]);
            val.windows.extend_from_slice(&self.windows[j - n_val..j]);
            i = j;
        }
        (train, val)
    }

    /// Windows of one station, in their original order.
    pub fn station(&self, id: &str) -> WindowDataset {
        WindowDataset {
            windows: self.windows.iter().filter(|w| w.station_id == id).cloned().collect(),
            ..WindowDataset::empty(self.input_len, self.horizon)
        }
    }

    /// Station ids in order of first appearance.
    pub fn station_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for w in &self.windows {
            if ids.last() != Some(&w.station_id) && !ids.contains(&w.station_id) {
                ids.push(w.station_id.clone());
            }
        }
        ids
    }

    /// Keeps the earliest `max_per_station` windows of every station.
    pub fn truncate_per_station(&mut self, max_per_station: usize) {
        let mut out = Vec::new();
        let mut count = std::collections::BTreeMap::<String, usize>::new();
        for w in self.windows.drain(..) {
            let c = count.entry(w.station_id.clone()).or_default();
            if *c < max_per_station {
                *c += 1;
                out.push(w);
            }
        }
        self.windows = out;
    }
}

/// Cuts a standardized series into (input, target) pairs. A series shorter
/// than `input_len + horizon` yields an empty dataset.
pub fn make_windows(
    series: &LoadSeries,
    scaler: &Scaler,
    input_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowDataset> {
    let mut ds = WindowDataset::empty(input_len, horizon);
    let offsets = window_offsets(series.len(), input_len, horizon, stride);
    if offsets.is_empty() {
        return Ok(ds);
    }
    let feats: Vec<Vec<f64>> = series
        .features()
        .iter()
        .map(|row| scaler.standardize(row))
        .collect::<Result<_>>()?;
    for off in offsets {
        let input = feats[off..off + input_len].iter().flatten().copied().collect();
        let target = feats[off + input_len..off + input_len + horizon]
            .iter()
            .map(|r| r[LOAD_CHANNEL])
            .collect();
        ds.windows.push(Window {
            station_id: series.station_id.clone(),
            input_start: series.timestamp(off),
            target_start: series.timestamp(off + input_len),
            granularity: series.granularity,
            input,
            target,
        });
    }
    Ok(ds)
}
