pub mod engine;
pub mod model;
pub mod pools;
pub mod router;
pub mod workload;
pub mod autoscaler;
pub mod cost;
pub mod metrics;
pub mod orchestrator;
pub mod simulation;
pub mod report;
pub mod scenario;
pub mod canned;
