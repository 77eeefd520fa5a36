//! Station and reanalysis fusion, the ABED forecaster, and forecast verification.

pub mod abed;
pub mod error;
pub mod evaluator;
pub mod featurecube;
pub mod fsutil;
pub mod geogrid;
pub mod ingest;
pub mod pipeline;
pub mod selfcheck;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
