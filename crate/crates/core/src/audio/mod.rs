//! Audio files and the checkpoint container. No signal processing lives here.

mod checkpoint;
mod wav;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, TensorData, FORMAT_VERSION, MAGIC,
};
pub use wav::{read_wav, write_wav, WavEncoding};

use crate::error::{Error, Result};

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Trims or zero-pads to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> Waveform {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}
