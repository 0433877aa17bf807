//! Speech bandwidth extension with parallel amplitude and phase spectrum
//! prediction, trained adversarially against waveform and spectral discriminators.

pub mod audio;
pub mod autodiff;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod spectral;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
