//! Deterministic federated-learning simulation core.
//!
//! The crate simulates communication rounds between a server and a set of
//! clients holding non-IID data. Three aggregation methods are provided:
//! a fair quasi-Newton scheme built on scaled Gram-Schmidt gradient
//! orthogonalization with closed-form min-norm combination weights
//! (`dqnfed`), plain gradient averaging (`fedavg`), and naive averaging of
//! per-client quasi-Newton directions (`newton-avg`).
//!
//! Every run is a pure function of its configuration: one master seed is
//! expanded into independent named streams, client work is reduced in a
//! fixed order, and the optional rayon backend (`parallel` feature) is
//! observationally identical to sequential execution.

pub mod aggregate;
pub mod data;
pub mod exec;
pub mod local;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod orchestrator;
pub mod rng;
pub mod vecops;
