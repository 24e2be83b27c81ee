//! Round snapshots as self-describing JSON documents.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::RoundSnapshot;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct Envelope<'a> {
    schema_version: u32,
    #[serde(flatten)]
    snapshot: &'a RoundSnapshot,
}

/// Writes the snapshot atomically (temp file + rename).
pub fn persist_round(snapshot: &RoundSnapshot, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let body = serde_json::to_string_pretty(&Envelope {
        schema_version: SCHEMA_VERSION,
        snapshot,
    })
    .map_err(|e| Error::Snapshot {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_round(path: impl AsRef<Path>) -> Result<RoundSnapshot> {
    let path = path.as_ref();
    let bad = |message: String| Error::Snapshot {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| bad("snapshot is not a JSON object".into()))?;
    let version = obj
        .remove("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("missing schema_version".into()))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(Error::SchemaVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;
    use crate::datamodel::{ClientSubmission, QueryRecord};

    fn sample() -> RoundSnapshot {
        let submissions: Vec<ClientSubmission> = (0..3)
            .map(|c| ClientSubmission {
                client_id: c,
                query_id: 7,
                steps: vec![format!("step from {c}"), "ünïcödé ✓".into()],
                answer: ["A", "B", "B"][c].into(),
                uncertainty: 0.1 + c as f64 / 3.0,
            })
            .collect();
        let mut weights = BTreeMap::new();
        weights.insert((7, 0), 0.5);
        weights.insert((7, 1), 0.3);
        weights.insert((7, 2), 0.2);
        let mut metrics = BTreeMap::new();
        metrics.insert("accuracy".into(), 2.0 / 3.0);
        RoundSnapshot {
            round: 2,
            query_set: vec![QueryRecord {
                query_id: 7,
                query: "Is tomato a fruit?".into(),
                steps: vec!["It has seeds.".into()],
                answer: "A".into(),
                round: 2,
            }],
            submissions,
            weights,
            metrics,
        }
    }

    #[test]
    fn empty_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round_0");
        persist_round(&RoundSnapshot::default(), &path).unwrap();
        assert_eq!(load_round(&path).unwrap(), RoundSnapshot::default());
    }

    #[test]
    fn populated_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round_2");
        let snap = sample();
        persist_round(&snap, &path).unwrap();
        assert_eq!(load_round(&path).unwrap(), snap);
    }

    #[test]
    fn truncated_file_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round_2");
        persist_round(&sample(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_round(&path), Err(Error::Snapshot { .. })));
        let mut garbage = bytes.clone();
        garbage.extend_from_slice(b"\x00\xffjunk");
        fs::write(&path, garbage).unwrap();
        assert!(matches!(load_round(&path), Err(Error::Snapshot { .. })));
    }

    #[test]
    fn schema_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round_1");
        persist_round(&sample(), &path).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 2");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            load_round(&path),
            Err(Error::SchemaVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_round("/nonexistent/round_9").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/round_9"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn reals_roundtrip_exactly(
            us in proptest::collection::vec(0.0f64..1e6, 0..6),
            text in "\\PC{0,30}",
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("round_1");
            let snap = RoundSnapshot {
                round: 1,
                submissions: us.iter().enumerate().map(|(i, &u)| ClientSubmission {
                    client_id: i,
                    query_id: 0,
                    steps: vec![text.clone()],
                    answer: text.clone(),
                    uncertainty: u,
                }).collect(),
                weights: us.iter().enumerate().map(|(i, &u)| ((0, i), u)).collect(),
                ..Default::default()
            };
            persist_round(&snap, &path).unwrap();
            prop_assert_eq!(load_round(&path).unwrap(), snap);
        }
    }
}
