//! Click-log format adapters.
//!
//! Three CSV layouts feed the same pipeline:
//! - canonical: header `session_id,timestamp_ms,item_id`
//! - yoochoose: headerless `session_id,ISO8601-timestamp,item_id,category`
//!   (category ignored)
//! - diginetica: `;`-separated, header
//!   `sessionId;userId;itemId;timeframe;eventdate`; ordering key is
//!   (eventdate, timeframe), realized as midnight-epoch-ms + timeframe;
//!   userId ignored.

use std::io::Read;

use crate::error::{FgnnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    Canonical,
    Yoochoose,
    Diginetica,
}

impl std::str::FromStr for LogFormat {
    type Err = FgnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(LogFormat::Canonical),
            "yoochoose" => Ok(LogFormat::Yoochoose),
            "diginetica" => Ok(LogFormat::Diginetica),
            other => Err(FgnnError::Usage(format!(
                "unknown input format '{other}' (expected canonical|yoochoose|diginetica)"
            ))),
        }
    }
}

/// One click. Timestamps are integer milliseconds since the epoch and
/// never negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEvent {
    pub session_key: String,
    pub timestamp_ms: i64,
    pub item_key: String,
}

#[derive(Debug)]
pub struct LoadOutcome {
    pub events: Vec<RawEvent>,
    /// Rows whose fields failed to parse; counted, skipped, reported.
    pub skipped_rows: usize,
}

/// Parse a byte stream in the named format. Unparsable rows are counted
/// and skipped; zero parsable rows is an error.
pub fn load_events(source: impl Read, format: LogFormat) -> Result<LoadOutcome> {
    let mut builder = csv::ReaderBuilder::new();
    builder.flexible(true);
    match format {
        LogFormat::Canonical => {
            builder.has_headers(true);
        }
        LogFormat::Yoochoose => {
            builder.has_headers(false);
        }
        LogFormat::Diginetica => {
            builder.has_headers(true).delimiter(b';');
        }
    }
    let mut reader = builder.from_reader(source);

    if format == LogFormat::Canonical {
        let headers = reader
            .headers()
            .map_err(|e| FgnnError::Data(format!("unreadable canonical header: {e}")))?;
        let expected = ["session_id", "timestamp_ms", "item_id"];
        let got: Vec<&str> = headers.iter().map(str::trim).collect();
        if got != expected {
            return Err(FgnnError::Data(format!(
                "canonical header mismatch: expected {expected:?}, found {got:?}"
            )));
        }
    }
    if format == LogFormat::Diginetica {
        let headers = reader
            .headers()
            .map_err(|e| FgnnError::Data(format!("unreadable diginetica header: {e}")))?;
        if headers.len() < 5 {
            return Err(FgnnError::Data(format!(
                "diginetica header has {} fields, expected 5",
                headers.len()
            )));
        }
    }

    let mut events = Vec::new();
    let mut skipped = 0usize;
    for record in reader.into_records() {
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        match parse_record(&record, format) {
            Some(event) => events.push(event),
            None => skipped += 1,
        }
    }

    if events.is_empty() {
        return Err(FgnnError::EmptyInput(format!(
            "no parsable rows ({skipped} skipped)"
        )));
    }
    Ok(LoadOutcome {
        events,
        skipped_rows: skipped,
    })
}

fn parse_record(record: &csv::StringRecord, format: LogFormat) -> Option<RawEvent> {
    match format {
        LogFormat::Canonical => {
            if record.len() != 3 {
                return None;
            }
            let timestamp_ms: i64 = record.get(1)?.trim().parse().ok()?;
            if timestamp_ms < 0 {
                return None;
            }
            Some(RawEvent {
                session_key: non_empty(record.get(0)?)?,
                timestamp_ms,
                item_key: non_empty(record.get(2)?)?,
            })
        }
        LogFormat::Yoochoose => {
            if record.len() < 3 {
                return None;
            }
            let instant = chrono::DateTime::parse_from_rfc3339(record.get(1)?.trim()).ok()?;
            let timestamp_ms = instant.timestamp_millis();
            if timestamp_ms < 0 {
                return None;
            }
            Some(RawEvent {
                session_key: non_empty(record.get(0)?)?,
                timestamp_ms,
                item_key: non_empty(record.get(2)?)?,
            })
        }
        LogFormat::Diginetica => {
            if record.len() < 5 {
                return None;
            }
            let timeframe: i64 = record.get(3)?.trim().parse().ok()?;
            let date = chrono::NaiveDate::parse_from_str(record.get(4)?.trim(), "%Y-%m-%d").ok()?;
            let midnight_ms = date.and_hms_opt(0, 0, 0)?.and_utc().timestamp_millis();
            let timestamp_ms = midnight_ms.checked_add(timeframe)?;
            if timestamp_ms < 0 {
                return None;
            }
            Some(RawEvent {
                session_key: non_empty(record.get(0)?)?,
                timestamp_ms,
                item_key: non_empty(record.get(2)?)?,
            })
        }
    }
}

fn non_empty(field: &str) -> Option<String> {
    let trimmed = field.trim();
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_string())
    }
}
