pub mod calibrate;
pub mod config;
pub mod counting;
pub mod detector;
pub mod error;
pub mod figures;
pub mod nist;
pub mod pipeline;
pub mod provenance;
pub mod qrng;
pub mod rng;
pub mod source;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
