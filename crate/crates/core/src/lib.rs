//! Federated reasoning engine.
//!
//! A server holds a set of queries and iteratively improves its reasoning
//! traces by coordinating clients that keep private demonstration sets.
//! Each round the server distributes its current query set, clients refine
//! their local context with server demonstrations, label the server queries
//! with an entropy-based uncertainty score, and the server aggregates the
//! submissions with uncertainty-derived trust weights.
//!
//! Besides the protocol itself the crate ships a numerical simulator of the
//! linear-self-attention regression model used to analyse the protocol
//! ([`theory`]) and a closed-form compute/communication cost model
//! ([`cost`]).

pub mod aggregation;
pub mod backend;
pub mod cost;
pub mod datamodel;
pub mod error;
pub mod protocol;
pub mod selection;
pub mod theory;
pub mod uncertainty;

pub use aggregation::{AggregationMode, AggregationResult, AnswerGroup};
pub use backend::{Backend, GenerationRequest, GenerationResponse};
pub use datamodel::{ClientDataset, ClientSubmission, Demonstration, QueryRecord, RoundSnapshot, TaskKind, UNPARSED};
pub use error::{Error, Result};
pub use protocol::{FederationConfig, FederationMode, FederationState};
pub use selection::{Embedder, EmbeddingVector, SelectionConfig};
pub use uncertainty::{TokenDistribution, TrustWeights, UncertaintyScore};
