use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{Scaler, Window, WindowDataset, LOAD_CHANNEL};
use crate::error::{Error, Result};
use crate::model::MikModel;
use crate::scalar::{c, Scalar};

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::invalid(format!(
            "prediction length {} differs from target length {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("metrics need at least one value"));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (t - p).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean squared error.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (t - p).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Anything that maps one flattened `[L_x · C]` standardized window to an
/// `[H]` standardized forecast.
pub trait Forecaster {
    fn forecast(&self, input: &[f64]) -> Result<Vec<f64>>;
}

impl<T: Scalar> Forecaster for MikModel<T> {
    fn forecast(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x: Vec<T> = input.iter().map(|&v| c(v)).collect();
        Ok(self.predict(&x)?.into_iter().map(|v| v.to_f64_lossy()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PersistenceKind {
    /// Repeat the last observed load.
    Naive,
    /// Copy the last full cycle of the given period.
    Seasonal(usize),
}

/// Forecasts from the load channel of the input window alone.
#[derive(Clone, Copy, Debug)]
pub struct Persistence {
    pub kind: PersistenceKind,
    pub input_len: usize,
    pub channels: usize,
    pub horizon: usize,
}

impl Persistence {
    pub fn for_dataset(kind: PersistenceKind, ds: &WindowDataset) -> Result<Self> {
        if let PersistenceKind::Seasonal(p) = kind {
            if p == 0 || ds.input_len < p || ds.horizon > p {
                return Err(Error::invalid(format!(
                    "seasonal persistence with period {p} needs input_len >= {p} and horizon <= {p}"
                )));
            }
        }
        Ok(Self {
            kind,
            input_len: ds.input_len,
            channels: ds.channels,
            horizon: ds.horizon,
        })
    }
}

impl Forecaster for Persistence {
    fn forecast(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_len * self.channels {
            return Err(Error::invalid("persistence input has the wrong length"));
        }
        let load = |i: usize| input[i * self.channels + LOAD_CHANNEL];
        Ok(match self.kind {
            PersistenceKind::Naive => vec![load(self.input_len - 1); self.horizon],
            PersistenceKind::Seasonal(p) => (0..self.horizon).map(|h| load(self.input_len - p + h)).collect(),
        })
    }
}

/// Predicts the mean input load for every step.
#[derive(Clone, Copy, Debug)]
pub struct MeanForecaster {
    pub channels: usize,
    pub horizon: usize,
}

impl Forecaster for MeanForecaster {
    fn forecast(&self, input: &[f64]) -> Result<Vec<f64>> {
        let n = input.len() / self.channels;
        let m = (0..n).map(|i| input[i * self.channels + LOAD_CHANNEL]).sum::<f64>() / n as f64;
        Ok(vec![m; self.horizon])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Standardized,
    Kwh,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StationMetrics {
    pub mae: f64,
    pub mse: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mae: f64,
    pub mse: f64,
    /// Number of windows.
    pub n_samples: usize,
    pub units: Units,
    pub per_station: BTreeMap<String, StationMetrics>,
}

/// Forecasts every window and aggregates errors overall and per station.
/// Windows are visited in (station, time) order so the result does not
/// depend on dataset order. With a scaler, errors are in kWh.
pub fn evaluate(f: &dyn Forecaster, ds: &WindowDataset, scaler: Option<&Scaler>) -> Result<MetricReport> {
    evaluate_with(ds, scaler, |w| f.forecast(&w.input))
}

/// Like [`evaluate`], with a separate forecaster per station.
pub fn evaluate_per_station(
    models: &BTreeMap<String, &dyn Forecaster>,
    ds: &WindowDataset,
    scaler: Option<&Scaler>,
) -> Result<MetricReport> {
    evaluate_with(ds, scaler, |w| {
        models
            .get(&w.station_id)
            .ok_or_else(|| Error::invalid(format!("no model for station {}", w.station_id)))?
            .forecast(&w.input)
    })
}

fn evaluate_with(
    ds: &WindowDataset,
    scaler: Option<&Scaler>,
    forecast: impl Fn(&Window) -> Result<Vec<f64>>,
) -> Result<MetricReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset("evaluation set has no windows".into()));
    }
    let mut order: Vec<&Window> = ds.windows.iter().collect();
    order.sort_by(|a, b| (&a.station_id, a.target_start).cmp(&(&b.station_id, b.target_start)));
    let phys = |v: f64| scaler.map_or(v, |s| s.inverse_value(LOAD_CHANNEL, v));

    let mut per: BTreeMap<String, (f64, f64, usize, usize)> = BTreeMap::new();
    for w in order {
        let pred = forecast(w)?;
        check(&pred, &w.target)?;
        let e = per.entry(w.station_id.clone()).or_default();
        for (p, t) in pred.iter().zip(&w.target) {
            let d = phys(*t) - phys(*p);
            e.0 += d.abs();
            e.1 += d * d;
        }
        e.2 += pred.len();
        e.3 += 1;
    }
    let (mut sa, mut ss, mut n, mut windows) = (0.0, 0.0, 0, 0);
    let per_station = per
        .into_iter()
        .map(|(id, (a, s, k, w))| {
            sa += a;
            ss += s;
            n += k;
            windows += w;
            (
                id,
                StationMetrics {
                    mae: a / k as f64,
                    mse: s / k as f64,
                    n_samples: w,
                },
            )
        })
        .collect();
    Ok(MetricReport {
        mae: sa / n as f64,
        mse: ss / n as f64,
        n_samples: windows,
        units: if scaler.is_some() { Units::Kwh } else { Units::Standardized },
        per_station,
    })
}

/// Plain-text table with columns padded to equal width.
pub fn format_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in width.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&line(width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(|s| s.as_str()).collect()));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(|s| s.as_str()).collect()));
        out.push('\n');
    }
    out
}
