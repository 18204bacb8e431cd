//! The one record type every plugin emits and the core validates.

use serde::{Deserialize, Serialize};

use crate::timefmt;

/// Closed set of feature kinds a record may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureType {
    Os,
    Package,
    ConfigFile,
    Process,
    Connection,
    OpenFile,
    Metric,
    Error,
}

impl FeatureType {
    pub const ALL: [FeatureType; 8] = [
        FeatureType::Os,
        FeatureType::Package,
        FeatureType::ConfigFile,
        FeatureType::Process,
        FeatureType::Connection,
        FeatureType::OpenFile,
        FeatureType::Metric,
        FeatureType::Error,
    ];
}

/// Serialized payloads above this size are rejected.
pub const MAX_PAYLOAD_BYTES: usize = 64 * 1024;

/// One emitted feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionRecord {
    /// Guest identifier the record belongs to.
    pub namespace_label: String,
    pub feature_type: FeatureType,
    pub feature_key: String,
    /// RFC 3339 UTC.
    pub timestamp: String,
    /// Collection cycle sequence number.
    pub cycle: u64,
    pub payload: serde_json::Map<String, serde_json::Value>,
}

impl CollectionRecord {
    pub fn new(
        namespace_label: &str,
        feature_type: FeatureType,
        feature_key: &str,
        now_ms: i64,
        cycle: u64,
        payload: serde_json::Map<String, serde_json::Value>,
    ) -> Self {
        CollectionRecord {
            namespace_label: namespace_label.to_string(),
            feature_type,
            feature_key: feature_key.to_string(),
            timestamp: timefmt::format_epoch_millis(now_ms),
            cycle,
            payload,
        }
    }

    /// Error record, used for per-plugin failures that must not abort a cycle.
    pub fn error(namespace_label: &str, key: &str, now_ms: i64, cycle: u64, reason: &str) -> Self {
        let mut payload = serde_json::Map::new();
        payload.insert("reason".into(), serde_json::Value::String(reason.to_string()));
        CollectionRecord::new(namespace_label, FeatureType::Error, key, now_ms, cycle, payload)
    }

    pub fn timestamp_ms(&self) -> Option<i64> {
        timefmt::parse_rfc3339(&self.timestamp)
    }

    pub fn to_line(&self) -> String {
        // Infallible for this shape; the fallback only defends fuzzed payloads.
        serde_json::to_string(self).unwrap_or_else(|_| "{}".into())
    }
}

/// Why a line was rejected. Rejections are data: counted and dropped,
/// never fatal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum RejectReason {
    NotJson,
    SchemaMismatch { detail: String },
    UnknownType { got: String },
    Oversize { bytes: usize },
    BadTimestamp { got: String },
    NonMonotoneTimestamp { stream: String },
    EmptyKey,
}

/// Schema check for a single line, stateless except for what the caller
/// passes in. Timestamp monotonicity lives in [`crate::session::Validator`],
/// which owns per-stream state.
pub fn validate_line(line: &[u8]) -> Result<CollectionRecord, RejectReason> {
    let text = std::str::from_utf8(line).map_err(|_| RejectReason::NotJson)?;
    let value: serde_json::Value = serde_json::from_str(text).map_err(|_| RejectReason::NotJson)?;

    // Distinguish "unknown feature_type" from other schema errors before
    // handing the document to serde.
    if let Some(ft) = value.get("feature_type") {
        let is_known = ft
            .as_str()
            .map(|s| serde_json::from_value::<FeatureType>(serde_json::Value::String(s.into())).is_ok())
            .unwrap_or(false);
        if !is_known {
            return Err(RejectReason::UnknownType {
                got: ft.as_str().unwrap_or("<non-string>").to_string(),
            });
        }
    }

    let record: CollectionRecord = serde_json::from_value(value).map_err(|e| RejectReason::SchemaMismatch {
        detail: e.to_string(),
    })?;

    if record.feature_key.is_empty() {
        return Err(RejectReason::EmptyKey);
    }
    let payload_bytes = serde_json::to_vec(&record.payload).map(|v| v.len()).unwrap_or(usize::MAX);
    if payload_bytes > MAX_PAYLOAD_BYTES {
        return Err(RejectReason::Oversize { bytes: payload_bytes });
    }
    if record.timestamp_ms().is_none() {
        return Err(RejectReason::BadTimestamp {
            got: record.timestamp.clone(),
        });
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid_line() -> String {
        CollectionRecord::new(
            "g1",
            FeatureType::Process,
            "pid/42",
            1_714_567_890_123,
            3,
            serde_json::Map::new(),
        )
        .to_line()
    }

    #[test]
    fn accepts_a_valid_record() {
        let rec = validate_line(valid_line().as_bytes()).unwrap();
        assert_eq!(rec.feature_type, FeatureType::Process);
        assert_eq!(rec.cycle, 3);
    }

    #[test]
    fn rejects_unknown_feature_type() {
        let line = valid_line().replace("process", "exfil");
        assert!(matches!(
            validate_line(line.as_bytes()),
            Err(RejectReason::UnknownType { got }) if got == "exfil"
        ));
    }

    #[test]
    fn rejects_oversize_payload() {
        let mut payload = serde_json::Map::new();
        payload.insert("blob".into(), serde_json::Value::String("x".repeat(MAX_PAYLOAD_BYTES + 1)));
        let rec = CollectionRecord::new("g1", FeatureType::Os, "os", 0, 0, payload);
        assert!(matches!(
            validate_line(rec.to_line().as_bytes()),
            Err(RejectReason::Oversize { .. })
        ));
    }

    #[test]
    fn rejects_bad_timestamps_and_non_json() {
        let mut rec = validate_line(valid_line().as_bytes()).unwrap();
        rec.timestamp = "yesterday".into();
        assert!(matches!(
            validate_line(rec.to_line().as_bytes()),
            Err(RejectReason::BadTimestamp { .. })
        ));
        assert!(matches!(validate_line(b"not json"), Err(RejectReason::NotJson)));
        assert!(matches!(validate_line(&[0xFF, 0xFE]), Err(RejectReason::NotJson)));
    }
}
