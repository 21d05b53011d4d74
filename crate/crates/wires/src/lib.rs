//! Declarative dataflow engine for the edge gateway.
//!
//! A graph document lists stages and the edges between their ports. Stage
//! kinds come from a [`Registry`] of factories; the runtime runs each stage
//! on its own thread and joins them with bounded FIFO queues.

pub mod graph;
pub mod record;
pub mod registry;
pub mod runtime;
pub mod stage;
pub mod stages;

pub use graph::{load_graph, validate_graph, Edge, EdgeDoc, GraphDoc, GraphSpec, StageDoc, Violation};
pub use record::{RecordType, Source, WireRecord, WINDOW_LEN};
pub use registry::{parse_params, BuildContext, OutType, PortSpec, Registry, StageFactory, TransportFactory};
pub use runtime::{Pipeline, PipelineReport, StageStats, WiresError};
pub use stage::{Control, ControlReply, Outbox, Stage};
pub use stages::emitter::MACHINE_NODE;
pub use stages::logger::STAMP_TAG;
pub use stages::score::{with_candidate, RecommendGrid};
pub use stages::{JoinCore, JoinParams};
