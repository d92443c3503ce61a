//! Dataset loading, endpoint clients, the response cache and the stage
//! pipeline for auditing vision-language models for spurious cues.
//!
//! The numeric and combinatorial core lives in [`spurlens_core`]; this crate
//! owns everything that touches files, sockets or threads.

pub mod cli;
pub mod config;
pub mod endpoints;
pub mod error;
pub mod imaging;
pub mod loader;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod services;
pub mod store;
pub mod study_server;

pub use error::{Error, Result};
pub use spurlens_core as core;
