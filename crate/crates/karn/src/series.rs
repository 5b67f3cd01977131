//! Hourly load CSV ingestion.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, TimeDelta};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest tolerated share of missing hours.
pub const MAX_MISSING_FRACTION: f64 = 0.05;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Column names of the input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub timestamp: String,
    pub load: String,
    pub temperature: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            load: "load_kwh".into(),
            temperature: "temperature_c".into(),
        }
    }
}

/// A gap-free hourly series.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSeries {
    pub source: String,
    pub timestamps: Vec<NaiveDateTime>,
    pub load: Vec<f64>,
    pub temperature: Vec<f64>,
    /// Hours filled by linear interpolation.
    pub interpolated: Vec<bool>,
}

impl LoadSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn missing_hours(&self) -> usize {
        self.interpolated.iter().filter(|&&b| b).count()
    }
}

/// Accepts `2021-03-01T00:00:00`, `2021-03-01 00:00`, RFC 3339 with offset, and
/// similar ISO-8601 variants. Offsets are dropped after conversion to UTC.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for f in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, f) {
            return Some(t);
        }
    }
    DateTime::parse_from_rfc3339(s).ok().map(|t| t.naive_utc())
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<LoadSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut series = ingest_reader(file, schema, path)?;
    series.source = path.display().to_string();
    Ok(series)
}

/// Parse, sort and gap-fill. `origin` names the input in error messages.
pub fn ingest_reader<R: Read>(reader: R, schema: &CsvSchema, origin: &Path) -> Result<LoadSeries> {
    let csv_err = |message: String| Error::Csv {
        path: origin.to_path_buf(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| csv_err(format!("missing column `{name}` (found: {})", headers.iter().collect::<Vec<_>>().join(", "))))
    };
    let (ct, cl, cx) = (column(&schema.timestamp)?, column(&schema.load)?, column(&schema.temperature)?);

    let mut rows: BTreeMap<NaiveDateTime, (f64, f64)> = BTreeMap::new();
    let mut bad = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        // header is line 1
        let line = k + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                bad.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let field = |c: usize| rec.get(c).unwrap_or("");
        let Some(t) = parse_timestamp(field(ct)) else {
            bad.push(format!("line {line}: bad timestamp `{}`", field(ct)));
            continue;
        };
        if t.and_utc().timestamp() % 3600 != 0 {
            bad.push(format!("line {line}: timestamp `{}` is not on the hour", field(ct)));
            continue;
        }
        let num = |c: usize, what: &str| -> std::result::Result<f64, String> {
            match field(c).parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(format!("line {line}: bad {what} `{}`", field(c))),
            }
        };
        let (load, temp) = match (num(cl, "load"), num(cx, "temperature")) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                bad.push(e);
                continue;
            }
        };
        if rows.insert(t, (load, temp)).is_some() {
            return Err(csv_err(format!(
                "duplicate timestamp {} (line {line})",
                t.format(TIMESTAMP_FORMAT)
            )));
        }
    }
    if !bad.is_empty() {
        let shown: Vec<_> = bad.iter().take(10).cloned().collect();
        let more = if bad.len() > 10 {
            format!(" (and {} more)", bad.len() - 10)
        } else {
            String::new()
        };
        return Err(csv_err(format!("unparsable rows: {}{more}", shown.join("; "))));
    }
    let (Some((&first, _)), Some((&last, _))) = (rows.first_key_value(), rows.last_key_value()) else {
        return Err(csv_err("no data rows".into()));
    };
    let expected = ((last - first).num_hours() + 1) as usize;
    let missing = expected - rows.len();
    if missing as f64 > MAX_MISSING_FRACTION * expected as f64 {
        return Err(Error::Data(format!(
            "{}: {missing} of {expected} hours missing ({:.1}%), more than the 5% limit",
            origin.display(),
            100.0 * missing as f64 / expected as f64
        )));
    }

    let mut series = LoadSeries {
        source: origin.display().to_string(),
        timestamps: Vec::with_capacity(expected),
        load: Vec::with_capacity(expected),
        temperature: Vec::with_capacity(expected),
        interpolated: Vec::with_capacity(expected),
    };
    let mut prev: Option<(NaiveDateTime, f64, f64)> = None;
    for (&t, &(load, temp)) in &rows {
        if let Some((t0, l0, x0)) = prev {
            let gap = (t - t0).num_hours();
            for h in 1..gap {
                let w = h as f64 / gap as f64;
                series.timestamps.push(t0 + TimeDelta::hours(h));
                series.load.push(l0 + w * (load - l0));
                series.temperature.push(x0 + w * (temp - x0));
                series.interpolated.push(true);
            }
        }
        series.timestamps.push(t);
        series.load.push(load);
        series.temperature.push(temp);
        series.interpolated.push(false);
        prev = Some((t, load, temp));
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ingest(text: &str) -> Result<LoadSeries> {
        ingest_reader(text.as_bytes(), &CsvSchema::default(), Path::new("mem.csv"))
    }

    fn rows(n: usize, skip: &[usize]) -> String {
        let mut s = String::from("timestamp,load_kwh,temperature_c\n");
        let t0 = parse_timestamp("2021-01-01T00:00:00").unwrap();
        for h in 0..n {
            if skip.contains(&h) {
                continue;
            }
            let t = t0 + TimeDelta::hours(h as i64);
            s.push_str(&format!("{},{},{}\n", t.format(TIMESTAMP_FORMAT), 10.0 + h as f64, 5.0));
        }
        s
    }

    #[test]
    fn well_formed_file() {
        let s = ingest(&rows(48, &[])).unwrap();
        assert_eq!(s.len(), 48);
        assert_eq!(s.missing_hours(), 0);
    }

    #[test]
    fn duplicate_is_named() {
        let mut text = rows(5, &[]);
        text.push_str("2021-01-01T02:00:00,1,1\n");
        let err = ingest(&text).unwrap_err().to_string();
        assert!(err.contains("duplicate timestamp 2021-01-01T02:00:00"), "{err}");
    }

    #[test]
    fn order_does_not_matter() {
        let text = rows(30, &[]);
        let mut lines: Vec<&str> = text.lines().collect();
        let header = lines.remove(0);
        lines.reverse();
        let shuffled = format!("{header}\n{}\n", lines.join("\n"));
        assert_eq!(ingest(&shuffled).unwrap(), ingest(&text).unwrap());
    }

    #[test]
    fn gaps_are_interpolated_and_flagged() {
        let s = ingest(&rows(100, &[10, 11, 50])).unwrap();
        assert_eq!(s.len(), 100);
        assert_eq!(s.missing_hours(), 3);
        assert!(s.interpolated[10] && s.interpolated[11] && s.interpolated[50]);
        assert!((s.load[11] - 21.0).abs() < 1e-12);
    }

    #[test]
    fn too_many_missing_is_fatal() {
        let skip: Vec<usize> = (20..26).collect();
        let err = ingest(&rows(100, &skip)).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn bad_rows_report_lines() {
        let mut text = rows(4, &[]);
        text.push_str("2021-01-02T00:00:00,abc,1\nnot-a-time,1,1\n");
        let err = ingest(&text).unwrap_err().to_string();
        assert!(err.contains("line 6") && err.contains("line 7"), "{err}");
    }

    #[test]
    fn missing_column_is_named() {
        let err = ingest("timestamp,load\n2021-01-01T00:00:00,1\n").unwrap_err().to_string();
        assert!(err.contains("load_kwh"), "{err}");
    }

    #[test]
    fn timestamp_variants() {
        let a = parse_timestamp("2021-03-01T05:00:00").unwrap();
        assert_eq!(parse_timestamp("2021-03-01 05:00").unwrap(), a);
        assert_eq!(parse_timestamp("2021-03-01T06:00:00+01:00").unwrap(), a);
        assert!(parse_timestamp("03/01/2021").is_none());
    }
}
