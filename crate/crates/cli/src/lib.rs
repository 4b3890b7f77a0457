//! Command-line driver and live-session HTTP service.

pub mod cli;
pub mod service;
