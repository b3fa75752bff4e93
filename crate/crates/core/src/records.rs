//! Line-delimited prediction/ground-truth log format shared by the
//! tracker, the evaluation suite, and the CLI.
//!
//! A log file starts with a header line `{"format":"bevmap-predlog-v1"}`
//! followed by one JSON record per line. Ground-truth logs use the same
//! schema with the instance id as `track_id`, score 1, and no `pred_next`.

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::geometry::Point;
use crate::world::MapClass;

pub const PREDLOG_FORMAT: &str = "bevmap-predlog-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub sequence: String,
    pub frame_index: usize,
    pub track_id: u64,
    pub class: MapClass,
    pub score: f64,
    pub points: Vec<Point>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pred_next: Option<Vec<Point>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
}

pub fn to_log_text(records: &[LogRecord]) -> String {
    let mut out = String::new();
    out.push_str(
        &serde_json::to_string(&Header {
            format: PREDLOG_FORMAT.to_string(),
        })
        .expect("header serializes"),
    );
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn from_log_text(text: &str) -> Result<Vec<LogRecord>, MetricsError> {
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| MetricsError::Parse("empty log".into()))?;
    let header: Header = serde_json::from_str(header_line)
        .map_err(|e| MetricsError::Parse(format!("bad header: {e}")))?;
    if header.format != PREDLOG_FORMAT {
        return Err(MetricsError::Parse(format!(
            "unsupported log format '{}', expected '{PREDLOG_FORMAT}'",
            header.format
        )));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let r: LogRecord = serde_json::from_str(line)
            .map_err(|e| MetricsError::Parse(format!("record {}: {e}", i + 2)))?;
        if !(0.0..=1.0).contains(&r.score) {
            return Err(MetricsError::Parse(format!(
                "record {}: score {} outside [0,1]",
                i + 2,
                r.score
            )));
        }
        records.push(r);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> Vec<LogRecord> {
        vec![
            LogRecord {
                sequence: "s0".into(),
                frame_index: 0,
                track_id: 3,
                class: MapClass::Divider,
                score: 0.9,
                points: vec![(0.0, 1.0), (2.0, 1.0)],
                pred_next: Some(vec![(0.5, 1.0), (2.5, 1.0)]),
            },
            LogRecord {
                sequence: "s0".into(),
                frame_index: 1,
                track_id: 3,
                class: MapClass::Divider,
                score: 0.8,
                points: vec![(0.1, 1.0), (2.1, 1.0)],
                pred_next: None,
            },
        ]
    }

    #[test]
    fn log_round_trip_byte_identical() {
        let text = to_log_text(&demo());
        let parsed = from_log_text(&text).unwrap();
        assert_eq!(to_log_text(&parsed), text);
    }

    #[test]
    fn log_rejects_wrong_format() {
        let text = to_log_text(&demo()).replace(PREDLOG_FORMAT, "v999");
        assert!(from_log_text(&text).is_err());
    }

    #[test]
    fn log_rejects_bad_score() {
        let mut records = demo();
        records[0].score = 1.5;
        assert!(from_log_text(&to_log_text(&records)).is_err());
    }
}
