use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, Utc};

/// Parses an ISO-8601 timestamp into UTC seconds. Offsets are honoured;
/// naive timestamps are taken as UTC.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M", "%m/%d/%Y %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

pub fn format_timestamp(t: i64) -> String {
    DateTime::<Utc>::from_timestamp(t, 0)
        .map(|dt| dt.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| t.to_string())
}

/// Hour of day in `[0, 24)` including the fractional part.
pub fn hour_of_day(t: i64) -> f64 {
    t.rem_euclid(86_400) as f64 / 3600.0
}

/// Monday = 0 … Sunday = 6.
pub fn day_of_week(t: i64) -> usize {
    // 1970-01-01 was a Thursday
    ((t.div_euclid(86_400) + 3).rem_euclid(7)) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_common_forms() {
        let t = parse_timestamp("2023-01-01T00:00:00Z").unwrap();
        assert_eq!(t, 1_672_531_200);
        assert_eq!(parse_timestamp("2023-01-01 00:00:00"), Some(t));
        assert_eq!(parse_timestamp("2023-01-01T02:00:00+02:00"), Some(t));
        assert_eq!(parse_timestamp("2023-01-01"), Some(t));
        assert_eq!(parse_timestamp("yesterday"), None);
        assert_eq!(format_timestamp(t), "2023-01-01T00:00:00Z");
        // 2023-01-01 was a Sunday
        assert_eq!(day_of_week(t), 6);
        assert_eq!(hour_of_day(t + 5400), 1.5);
    }
}
