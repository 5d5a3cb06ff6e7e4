use std::collections::BTreeMap;

use log::warn;

use super::series::LoadSeries;
use super::time::format_timestamp;
use crate::error::{Error, Result};

/// Source/target partition of stations ordered by first recorded activity.
#[derive(Clone, Debug, PartialEq)]
pub struct StationSplit {
    pub source_ids: Vec<String>,
    pub target_ids: Vec<String>,
    pub target_cutoff: i64,
    /// First non-zero bucket per kept station.
    pub first_activity: BTreeMap<String, i64>,
    pub warnings: Vec<String>,
}

/// Series slices each phase may use.
#[derive(Clone, Debug, Default)]
pub struct SplitSeries {
    /// Source histories (truncated at the cutoff when requested).
    pub source: Vec<LoadSeries>,
    /// Target data strictly before the cutoff.
    pub target_finetune: Vec<LoadSeries>,
    /// Target data at or after the cutoff.
    pub target_eval: Vec<LoadSeries>,
    pub warnings: Vec<String>,
}

/// Orders stations by first activity (ties broken by id) and assigns the
/// first `n_source` to the source domain. Stations without any load are
/// dropped with a warning.
pub fn split_stations(
    series: &BTreeMap<String, LoadSeries>,
    n_source: usize,
    cutoff: i64,
) -> Result<StationSplit> {
    let mut warnings = Vec::new();
    let mut active: Vec<(i64, &str)> = Vec::new();
    for (id, s) in series {
        match s.first_activity() {
            Some(t) => active.push((t, id)),
            None => {
                let msg = format!("station {id} has no recorded load; excluded");
                warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    if n_source >= active.len() {
        return Err(Error::invalid(format!(
            "n_source = {n_source} leaves no target among {} usable stations",
            active.len()
        )));
    }
    active.sort();
    let ids: Vec<String> = active.iter().map(|(_, id)| id.to_string()).collect();
    Ok(StationSplit {
        source_ids: ids[..n_source].to_vec(),
        target_ids: ids[n_source..].to_vec(),
        target_cutoff: cutoff,
        first_activity: active.iter().map(|&(t, id)| (id.to_string(), t)).collect(),
        warnings,
    })
}

impl StationSplit {
    pub fn role(&self, id: &str) -> Option<&'static str> {
        if self.source_ids.iter().any(|s| s == id) {
            Some("source")
        } else if self.target_ids.iter().any(|s| s == id) {
            Some("target")
        } else {
            None
        }
    }

    /// Cuts every station into the slices of the protocol. With
    /// `source_until_cutoff`, source histories stop at the cutoff so no
    /// training data shares time with the target evaluation period.
    pub fn slices(&self, series: &BTreeMap<String, LoadSeries>, source_until_cutoff: bool) -> SplitSeries {
        let mut out = SplitSeries::default();
        for id in &self.source_ids {
            let s = &series[id];
            out.source.push(if source_until_cutoff {
                s.slice_time(i64::MIN, self.target_cutoff)
            } else {
                s.clone()
            });
        }
        for id in &self.target_ids {
            let s = &series[id];
            let ft = s.slice_time(i64::MIN, self.target_cutoff);
            if ft.is_empty() {
                let msg = format!(
                    "target station {id} has no data before {}; fine-tune slice is empty",
                    format_timestamp(self.target_cutoff)
                );
                warn!("{msg}");
                out.warnings.push(msg);
            }
            out.target_finetune.push(ft);
            out.target_eval.push(s.slice_time(self.target_cutoff, i64::MAX));
        }
        out
    }
}
