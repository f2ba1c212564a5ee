//! Collaborative bird's-eye-view perception testbed: synthetic multi-agent
//! scenes, confidence-gated and box-prior feature selection, a sparse wire
//! protocol with byte budgets, attention fusion, and detection scoring.

pub mod confidence;
pub mod conformance;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod grid;
pub mod losses;
pub mod protocol;
pub mod scene;
pub mod selection;

pub use error::{Error, Result};
