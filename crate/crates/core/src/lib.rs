//! Core of a spurious-cue audit for multimodal models: candidate cue
//! bookkeeping, spuriosity rankings, gap arithmetic and the supporting
//! statistics. No IO lives here.
#![no_std]

extern crate alloc;

pub mod ablation;
pub mod answer;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod eval;
pub mod gaps;
pub mod lemma;
pub mod mask;
pub mod probe;
pub mod prompts;
pub mod proposal;
pub mod rng;
pub mod study;

pub use error::{Error, Result};
