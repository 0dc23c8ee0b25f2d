pub mod checkpoint;
pub mod conv;
pub mod cyclegan;
pub mod data;
pub mod error;
pub mod ffa;
pub mod grid;
pub mod imageio;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

/// Resolves a device name. Only the CPU backend is compiled in.
pub fn device(name: &str) -> Result<candle_core::Device> {
    match name.trim().to_ascii_lowercase().as_str() {
        "" | "cpu" => Ok(candle_core::Device::Cpu),
        other => Err(Error::Config(format!("device {other:?} is not available; this build supports \"cpu\" only"))),
    }
}
