//! Encrypted-traffic classification from per-flow packet graphs.
//!
//! Pipeline: [`ingest`] parses classic pcap captures into five-tuple flows,
//! [`graph`] turns each flow into a graph whose nodes are packets and whose
//! edges are window and acknowledgment relationships, [`stability`] picks the
//! packet attributes whose distributions stay put across environments, and
//! [`model`] classifies graphs with a sampled mean-aggregation block followed
//! by multi-head attention. [`eval`] holds metrics, cross-validation, open
//! world rejection and shift analysis; [`synth`] generates labeled traffic
//! with known structure for tests and demos.

pub mod attributes;
pub mod error;
pub mod eval;
pub mod exec;
pub mod features;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod pcap;
pub mod seed;
pub mod stability;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
pub use features::FeatureSet;
pub use graph::{build_flow_graph, FlowGraph};
pub use ingest::{assemble_flows, parse_capture, Flow, PacketRecord};
pub use model::{GraphSat, ModelConfig};
