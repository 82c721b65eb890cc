//! Command-line and HTTP front ends for the reliability pipeline.

pub mod commands;
pub mod service;
pub mod store;
