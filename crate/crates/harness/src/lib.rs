pub mod cli;
pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod train;
