use std::io::Read;

use serde::{Deserialize, Serialize};

use super::time::parse_timestamp;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SessionRecord {
    pub station_id: String,
    /// UTC seconds.
    pub start_time: i64,
    /// Seconds, `>= 0`.
    pub duration: f64,
    /// kWh, `>= 0`.
    pub energy: f64,
}

/// Header names of the session CSV columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub station: String,
    pub start_time: String,
    /// Optional; sessions without it have zero duration.
    pub duration: Option<String>,
    pub energy: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            station: "station".into(),
            start_time: "start_time".into(),
            duration: Some("duration_s".into()),
            energy: "energy_kwh".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowWarning {
    /// 1-based line number in the input, header included.
    pub line: u64,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedSessions {
    pub records: Vec<SessionRecord>,
    pub warnings: Vec<RowWarning>,
}

/// Accepts plain seconds or `hh:mm:ss`.
fn parse_duration(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return Some(v);
    }
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return None;
    }
    let h: f64 = parts[0].parse().ok()?;
    let m: f64 = parts[1].parse().ok()?;
    let sec: f64 = parts[2].parse().ok()?;
    Some(h * 3600.0 + m * 60.0 + sec)
}

/// Reads charging sessions from CSV. Bad rows are skipped and reported.
pub fn parse_sessions<R: Read>(input: R, columns: &ColumnMap) -> Result<ParsedSessions> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Header(e.to_string()))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let missing: Vec<&str> = [&columns.station, &columns.start_time, &columns.energy]
        .into_iter()
        .filter(|c| find(c).is_none())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Header(format!("missing column(s) {}", missing.join(", "))));
    }
    let station_col = find(&columns.station).unwrap();
    let start_col = find(&columns.start_time).unwrap();
    let energy_col = find(&columns.energy).unwrap();
    let duration_col = match &columns.duration {
        Some(name) => Some(find(name).ok_or_else(|| Error::Header(format!("missing column(s) {name}")))?),
        None => None,
    };

    let mut out = ParsedSessions::default();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                out.warnings.push(RowWarning { line, message: e.to_string() });
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("");
        let parsed = (|| -> std::result::Result<SessionRecord, String> {
            let station_id = field(station_col).to_string();
            if station_id.is_empty() {
                return Err("empty station id".into());
            }
            let start_time = parse_timestamp(field(start_col))
                .ok_or_else(|| format!("bad timestamp {:?}", field(start_col)))?;
            let energy: f64 = field(energy_col)
                .parse()
                .map_err(|_| format!("bad energy {:?}", field(energy_col)))?;
            if !energy.is_finite() || energy < 0.0 {
                return Err(format!("energy must be finite and >= 0, got {energy}"));
            }
            let duration = match duration_col {
                Some(i) => parse_duration(field(i)).ok_or_else(|| format!("bad duration {:?}", field(i)))?,
                None => 0.0,
            };
            if !duration.is_finite() || duration < 0.0 {
                return Err(format!("duration must be finite and >= 0, got {duration}"));
            }
            Ok(SessionRecord { station_id, start_time, duration, energy })
        })();
        match parsed {
            Ok(r) => out.records.push(r),
            Err(message) => out.warnings.push(RowWarning { line, message }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "station,start_time,duration_s,energy_kwh\n";

    fn parse(body: &str) -> ParsedSessions {
        parse_sessions(format!("{HEADER}{body}").as_bytes(), &ColumnMap::default()).unwrap()
    }

    #[test]
    fn single_valid_row() {
        let p = parse("A,2023-01-01T00:00:00Z,3600,4.0\n");
        assert_eq!(p.records.len(), 1);
        assert!(p.warnings.is_empty());
        assert_eq!(p.records[0].duration, 3600.0);
    }

    #[test]
    fn negative_energy_is_skipped() {
        let p = parse("A,2023-01-01T00:00:00Z,3600,-1\n");
        assert!(p.records.is_empty());
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn bad_timestamp_in_middle_row() {
        let p = parse(
            "A,2023-01-01T00:00:00Z,3600,1.0\n\
             A,not-a-time,3600,1.0\n\
             B,2023-01-02T00:00:00Z,0:30:00,2.0\n",
        );
        assert_eq!(p.records.len(), 2);
        assert_eq!(p.warnings.len(), 1);
        assert_eq!(p.warnings[0].line, 3);
        assert_eq!(p.records[1].duration, 1800.0);
    }

    #[test]
    fn malformed_header_is_fatal() {
        let err = parse_sessions("id,when,kwh\nA,2023-01-01,1\n".as_bytes(), &ColumnMap::default()).unwrap_err();
        assert!(matches!(err, Error::Header(_)));
    }

    #[test]
    fn custom_column_map_without_duration() {
        let cols = ColumnMap {
            station: "Station_Name".into(),
            start_time: "Start".into(),
            duration: None,
            energy: "Energy__kWh_".into(),
        };
        let p = parse_sessions("Start,Station_Name,Energy__kWh_\n2023-01-01 08:00:00,X,2.5\n".as_bytes(), &cols).unwrap();
        assert_eq!(p.records[0].station_id, "X");
        assert_eq!(p.records[0].duration, 0.0);
    }
}
