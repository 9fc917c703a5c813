pub mod config;
pub mod data;
pub mod error;
pub mod explainer;
pub mod graph;
pub mod manifest;
pub mod mode;
pub mod model;
pub mod report;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use mode::{Mode, ModeMap};
