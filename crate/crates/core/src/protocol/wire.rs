//! Messages exchanged between the server and clients. A submission carries
//! only answers to server queries; nothing in the schema can hold a client's
//! private records.

use serde::{Deserialize, Serialize};

use crate::datamodel::{ClientSubmission, QueryRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Distribute {
        round: usize,
        query_set: Vec<QueryRecord>,
    },
    Submit {
        round: usize,
        client_id: usize,
        submissions: Vec<ClientSubmission>,
    },
}

impl WireMessage {
    pub fn round(&self) -> usize {
        match self {
            WireMessage::Distribute { round, .. } | WireMessage::Submit { round, .. } => *round,
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use serde_json::Value;

    use super::*;

    fn keys(value: &Value, out: &mut BTreeSet<String>) {
        match value {
            Value::Object(map) => {
                for (k, v) in map {
                    out.insert(k.clone());
                    keys(v, out);
                }
            }
            Value::Array(items) => items.iter().for_each(|v| keys(v, out)),
            _ => {}
        }
    }

    #[test]
    fn submit_schema_has_no_private_fields() {
        let msg = WireMessage::Submit {
            round: 2,
            client_id: 1,
            submissions: vec![ClientSubmission {
                client_id: 1,
                query_id: 4,
                steps: vec!["s".into()],
                answer: "B".into(),
                uncertainty: 0.3,
            }],
        };
        let mut found = BTreeSet::new();
        keys(&serde_json::to_value(&msg).unwrap(), &mut found);
        let allowed: BTreeSet<String> = [
            "type",
            "round",
            "client_id",
            "submissions",
            "query_id",
            "steps",
            "answer",
            "uncertainty",
        ]
        .into_iter()
        .map(String::from)
        .collect();
        assert_eq!(found, allowed);
    }

    #[test]
    fn messages_round_trip() {
        let msg = WireMessage::Distribute {
            round: 1,
            query_set: vec![QueryRecord {
                query_id: 0,
                query: "q".into(),
                steps: vec![],
                answer: "A".into(),
                round: 1,
            }],
        };
        let text = serde_json::to_string(&msg).unwrap();
        assert!(text.contains("\"type\":\"distribute\""));
        assert_eq!(serde_json::from_str::<WireMessage>(&text).unwrap(), msg);
        assert_eq!(msg.round(), 1);
    }
}
