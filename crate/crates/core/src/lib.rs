//! Core library for multi-view object instance retrieval.

pub mod data;
pub mod evaluation;
pub mod encoder;
pub mod nn;
pub mod registry;
pub mod retrieval;
pub mod trainer;
pub mod util;
