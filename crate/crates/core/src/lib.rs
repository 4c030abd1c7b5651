//! Multi-tone phase coding (MTPC) of inter-microphone time differences and
//! spiking-network decoders that turn the coded patterns into azimuths.

pub mod baseline;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fft;
pub mod sim;
pub mod snn;
pub mod wav;

pub use error::{Error, Result};
