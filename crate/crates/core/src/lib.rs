//! Discrete-event simulation and look-ahead scheduling of EPR-pair
//! generation in quantum data centers.
//!
//! The crate is organised bottom-up:
//!
//! - [`topology`]: racks, switches, multiplexed links and path search.
//! - [`workload`]: benchmark demand generators and the demand file format.
//! - [`dag`]: the overlap-dependency DAG over demands.
//! - [`models`]: latency, fidelity and distillation models.
//! - [`resources`]: per-QPU qubit accounting and the scheduling conditions.
//! - [`scheduler`]: the look-ahead, conservative and just-in-time strategies.
//! - [`engine`]: the event loop with snapshot-and-downgrade retry.
//! - [`metrics`]: normalized latency, weighted EPR count and buffer wait.

pub mod dag;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod models;
pub mod resources;
pub mod scheduler;
pub mod topology;
pub mod workload;

pub use engine::{simulate, EventKind, PairCategory, PairRecord, RunStats, SimEvent, SimOutcome, Timeline};
pub use error::{QdcError, Result};
pub use metrics::{compute_metrics, improvement_factor, pair_weight, MetricsReport};
pub use models::{distill_werner, epr_mean_latency, FidelityModel, LatencyModel, StochasticParams};
pub use scheduler::{SchedulerConfig, Strategy};
pub use topology::{build_topology, NetworkTopology, QpuId, QpuSpec, TopologyKind, TopologyParams};
pub use workload::{EprDemand, Origin, Protocol};
