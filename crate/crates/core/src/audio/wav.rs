use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        hound::Error::Unsupported => Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: "unsupported WAV feature".into(),
        },
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Reads a mono (or first-channel) PCM16 / float32 WAV file. 16-bit samples are
/// scaled by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.len() == 0 {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            message: "empty file".into(),
        });
    }
    let mut reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding {
                path: path.to_path_buf(),
                detail: format!("{fmt:?} with {bits} bits per sample"),
            })
        }
    };
    let samples: Vec<f64> = interleaved.into_iter().step_by(channels).collect();
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            message: format!("non-finite sample at index {i}"),
        });
    }
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    if let Some(i) = w.samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sample {i} of waveform for {}", path.display())));
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    match encoding {
        WavEncoding::Pcm16 => {
            for &s in &w.samples {
                let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(q).map_err(|e| wav_err(path, e))?;
            }
        }
        WavEncoding::Float32 => {
            for &s in &w.samples {
                writer.write_sample(s as f32).map_err(|e| wav_err(path, e))?;
            }
        }
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}
