use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::{Read, Write};

use super::time::{day_of_week, format_timestamp, hour_of_day, parse_timestamp};
use crate::error::{Error, Result};

/// Model input channels per time step: load, hour-of-day sin/cos, and a
/// day-of-week one-hot.
pub const NUM_CHANNELS: usize = 10;
/// Index of the load channel (the forecast target).
pub const LOAD_CHANNEL: usize = 0;

pub const DEFAULT_GRANULARITY: i64 = 3600;

/// Contiguous fixed-step load history of one station.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadSeries {
    pub station_id: String,
    /// UTC seconds of the first bucket.
    pub t0: i64,
    /// Bucket width in seconds.
    pub granularity: i64,
    pub values: Vec<f64>,
    /// `true` where a bucket had no source data and was filled with 0.
    pub missing: Vec<bool>,
}

impl LoadSeries {
    pub fn new(station_id: impl Into<String>, t0: i64, granularity: i64, values: Vec<f64>) -> Self {
        let missing = vec![false; values.len()];
        Self {
            station_id: station_id.into(),
            t0,
            granularity,
            values,
            missing,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, i: usize) -> i64 {
        self.t0 + i as i64 * self.granularity
    }

    /// Exclusive end of the last bucket.
    pub fn end(&self) -> i64 {
        self.timestamp(self.len())
    }

    /// Timestamp of the first bucket with non-zero load.
    pub fn first_activity(&self) -> Option<i64> {
        self.values
            .iter()
            .position(|&v| v > 0.0)
            .map(|i| self.timestamp(i))
    }

    /// Buckets whose start lies in `[from, to)`.
    pub fn slice_time(&self, from: i64, to: i64) -> LoadSeries {
        let idx = |t: i64| -> usize {
            if t <= self.t0 {
                0
            } else {
                (((t - self.t0) + self.granularity - 1) / self.granularity).min(self.len() as i64) as usize
            }
        };
        let (a, b) = (idx(from), idx(to).max(idx(from)));
        LoadSeries {
            station_id: self.station_id.clone(),
            t0: self.timestamp(a),
            granularity: self.granularity,
            values: self.values[a..b].to_vec(),
            missing: self.missing[a..b].to_vec(),
        }
    }

    /// Calendar and load features, one row of `NUM_CHANNELS` per bucket.
    pub fn features(&self) -> Vec<[f64; NUM_CHANNELS]> {
        (0..self.len())
            .map(|i| {
                let t = self.timestamp(i);
                let mut row = [0.0; NUM_CHANNELS];
                row[LOAD_CHANNEL] = self.values[i];
                let phase = TAU * hour_of_day(t) / 24.0;
                row[1] = phase.sin();
                row[2] = phase.cos();
                row[3 + day_of_week(t)] = 1.0;
                row
            })
            .collect()
    }
}

/// Writes `station,timestamp,load` rows for every series, in map order.
pub fn write_series_csv<W: Write>(out: W, series: &BTreeMap<String, LoadSeries>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["station", "timestamp", "load"])?;
    for s in series.values() {
        for (i, v) in s.values.iter().enumerate() {
            if s.missing[i] {
                continue;
            }
            w.write_record([s.station_id.as_str(), &format_timestamp(s.timestamp(i)), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `station,timestamp,load` rows back into series. Timestamps must be
/// aligned to `granularity`; gaps become flagged zero buckets.
pub fn read_series_csv<R: Read>(input: R, granularity: i64) -> Result<BTreeMap<String, LoadSeries>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(|e| Error::Header(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["station", "timestamp", "load"] {
        return Err(Error::Header(format!("expected station,timestamp,load; got {headers:?}")));
    }
    let mut points: BTreeMap<String, BTreeMap<i64, f64>> = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let t = parse_timestamp(&row[1])
            .ok_or_else(|| Error::invalid(format!("line {line}: bad timestamp {:?}", &row[1])))?;
        if t.rem_euclid(granularity) != 0 {
            return Err(Error::invalid(format!("line {line}: timestamp not aligned to {granularity}s")));
        }
        let v: f64 = row[2]
            .parse()
            .map_err(|_| Error::invalid(format!("line {line}: bad load {:?}", &row[2])))?;
        points.entry(row[0].to_string()).or_default().insert(t, v);
    }
    Ok(points
        .into_iter()
        .map(|(id, pts)| {
            let t0 = *pts.keys().next().unwrap();
            let t1 = *pts.keys().next_back().unwrap();
            let n = ((t1 - t0) / granularity + 1) as usize;
            let mut values = vec![0.0; n];
            let mut missing = vec![true; n];
            for (t, v) in pts {
                let i = ((t - t0) / granularity) as usize;
                values[i] = v;
                missing[i] = false;
            }
            let s = LoadSeries {
                station_id: id.clone(),
                t0,
                granularity,
                values,
                missing,
            };
            (id, s)
        })
        .collect())
}
