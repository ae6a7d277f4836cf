//! Chain runtime building blocks: DAG compilation, roots, message queues
//! and vertex statistics. The simulator wires them together.

mod dag;
mod queue;
mod root;
mod stats;

pub use dag::{compile, DagError, LogicalDag, PhysicalDag, PhysicalVertex, VertexSpec};
pub use queue::{MessageQueue, QueueKey, QueueStats};
pub use root::{DeleteOutcome, LogEntry, RootState, RootStats, DEFAULT_DROP_THRESHOLD, DEFAULT_PERSIST_EVERY};
pub use stats::{stragglers, InstanceStats, DEFAULT_THETA};
