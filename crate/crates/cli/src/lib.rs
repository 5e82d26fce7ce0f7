//! Run configuration and output schemas for the `czsl` binary.

pub mod config;
pub mod output;
