use std::collections::BTreeMap;

use super::series::LoadSeries;
use super::sessions::SessionRecord;
use crate::error::{Error, Result};

/// Spreads each session's energy uniformly over the buckets its
/// `[start, start + duration)` interval overlaps. Zero-duration sessions put
/// everything in the start bucket.
pub fn aggregate_load(records: &[SessionRecord], granularity: i64) -> Result<BTreeMap<String, LoadSeries>> {
    if granularity <= 0 || 86_400 % granularity != 0 {
        return Err(Error::invalid(format!("granularity {granularity}s must divide 86400")));
    }
    let g = granularity as f64;
    let mut by_station: BTreeMap<&str, Vec<&SessionRecord>> = BTreeMap::new();
    for r in records {
        by_station.entry(r.station_id.as_str()).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (id, recs) in by_station {
        let t0 = recs
            .iter()
            .map(|r| r.start_time.div_euclid(granularity) * granularity)
            .min()
            .unwrap();
        let last = recs
            .iter()
            .map(|r| {
                let end = r.start_time as f64 + r.duration;
                if r.duration > 0.0 {
                    ((end - t0 as f64) / g).ceil() as usize
                } else {
                    ((r.start_time - t0) / granularity) as usize + 1
                }
            })
            .max()
            .unwrap();
        let mut values = vec![0.0; last];
        for r in recs {
            let rel = (r.start_time - t0) as f64;
            let first = (rel / g).floor() as usize;
            if r.duration <= 0.0 {
                values[first] += r.energy;
                continue;
            }
            let end = rel + r.duration;
            let rate = r.energy / r.duration;
            let mut b = first;
            while (b as f64) * g < end {
                let lo = rel.max(b as f64 * g);
                let hi = end.min((b + 1) as f64 * g);
                if hi > lo {
                    values[b] += rate * (hi - lo);
                }
                b += 1;
            }
        }
        out.insert(id.to_string(), LoadSeries::new(id, t0, granularity, values));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, start: i64, dur: f64, e: f64) -> SessionRecord {
        SessionRecord {
            station_id: id.into(),
            start_time: start,
            duration: dur,
            energy: e,
        }
    }

    #[test]
    fn uniform_split_over_two_buckets() {
        let m = aggregate_load(&[rec("A", 7200, 7200.0, 4.0)], 3600).unwrap();
        assert_eq!(m["A"].values, vec![2.0, 2.0]);
        assert_eq!(m["A"].t0, 7200);
    }

    #[test]
    fn zero_duration_deposits_in_start_bucket() {
        let m = aggregate_load(&[rec("A", 3600 + 59, 0.0, 1.5)], 3600).unwrap();
        assert_eq!(m["A"].values, vec![1.5]);
    }

    #[test]
    fn empty_and_bad_granularity() {
        assert!(aggregate_load(&[], 3600).unwrap().is_empty());
        assert!(aggregate_load(&[], 7000).is_err());
    }

    /// Minute-level brute force: each whole minute of a session receives an
    /// equal share and is dropped into the bucket containing it.
    fn minute_oracle(records: &[SessionRecord], granularity: i64, t0: i64, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for r in records {
            let minutes = (r.duration / 60.0) as i64;
            if minutes == 0 {
                out[((r.start_time - t0) / granularity) as usize] += r.energy;
                continue;
            }
            for m in 0..minutes {
                let t = r.start_time + m * 60;
                out[((t - t0) / granularity) as usize] += r.energy / minutes as f64;
            }
        }
        out
    }

    #[test]
    fn overlapping_sessions_match_minute_oracle() {
        let recs = vec![
            rec("A", 600, 5400.0, 3.0),
            rec("A", 1800, 9000.0, 7.5),
            rec("A", 3600 * 3 + 120, 0.0, 0.25),
            rec("A", 3600 * 2 + 300, 1200.0, 1.0),
        ];
        let m = aggregate_load(&recs, 3600).unwrap();
        let s = &m["A"];
        let oracle = minute_oracle(&recs, 3600, s.t0, s.len());
        for (a, b) in s.values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let total: f64 = recs.iter().map(|r| r.energy).sum();
        assert!((s.values.iter().sum::<f64>() - total).abs() < 1e-9);
    }

    proptest::proptest! {
        #[test]
        fn energy_is_conserved(
            sessions in proptest::collection::vec((0i64..200_000, 0.0f64..40_000.0, 0.0f64..50.0, 0usize..3), 1..40),
            gran in proptest::sample::select(vec![900i64, 1800, 3600, 7200]),
        ) {
            let recs: Vec<_> = sessions
                .iter()
                .map(|&(s, d, e, k)| rec(["A", "B", "C"][k], s, d, e))
                .collect();
            let m = aggregate_load(&recs, gran).unwrap();
            for (id, series) in &m {
                let want: f64 = recs.iter().filter(|r| &r.station_id == id).map(|r| r.energy).sum();
                let got: f64 = series.values.iter().sum();
                proptest::prop_assert!((got - want).abs() <= 1e-6 * want.max(1e-12) + 1e-12);
            }
        }
    }
}
