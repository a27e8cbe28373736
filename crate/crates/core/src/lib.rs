pub mod attention;
pub mod cli;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod heatmap;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
