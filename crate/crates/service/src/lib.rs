//! HTTP service and command line over the sparse video anomaly reward engine.

pub mod cli;
pub mod config;
pub mod engine;
pub mod http_judge;
pub mod server;
