//! Paired wideband/narrowband training segments.
//!
//! Each utterance is low-passed once per source rate at full length. A segment is a
//! crop of the wideband signal at an offset aligned to the decimation factor, and the
//! matching narrowband segment is the decimated crop of the low-passed signal.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::audio::{read_wav, Waveform};
use crate::error::{Error, Result};
use crate::spectral::sinc_lowpass;

/// Energy-based silence trimmer, applied before pairing.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrimConfig {
    pub enabled: bool,
    pub threshold_dbfs: f64,
    pub frame: usize,
}

impl Default for TrimConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            threshold_dbfs: -40.0,
            frame: 320,
        }
    }
}

/// Drops leading and trailing frames whose RMS is below the threshold. An
/// all-silent input is returned unchanged.
pub fn trim_silence(w: &Waveform, cfg: &TrimConfig) -> Waveform {
    let frame = cfg.frame.max(1);
    let thresh = 10f64.powf(cfg.threshold_dbfs / 20.0);
    let loud: Vec<bool> = w
        .samples
        .chunks(frame)
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt() >= thresh)
        .collect();
    match (loud.iter().position(|&l| l), loud.iter().rposition(|&l| l)) {
        (Some(a), Some(b)) => Waveform {
            samples: w.samples[a * frame..((b + 1) * frame).min(w.len())].to_vec(),
            sample_rate: w.sample_rate,
        },
        _ => w.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub wide: Waveform,
    pub narrow: Waveform,
    /// Crop offset in wideband samples; always a multiple of the factor.
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub name: String,
    /// Zero-padded to at least one segment.
    pub wide: Waveform,
    /// Low-passed copies of `wide`, keyed by source rate.
    lowpassed: BTreeMap<u32, Vec<f64>>,
}

impl Utterance {
    pub fn new(name: String, wide: Waveform, segment: usize, source_rates: &[u32]) -> Result<Self> {
        let mut wide = wide;
        if wide.len() < segment {
            wide = wide.fit_to(segment);
        }
        let mut lowpassed = BTreeMap::new();
        for &sr in source_rates {
            let lp = if sr == wide.sample_rate {
                wide.samples.clone()
            } else {
                sinc_lowpass(&wide, sr as f64 / 2.0)?.samples
            };
            lowpassed.insert(sr, lp);
        }
        Ok(Self { name, wide, lowpassed })
    }

    /// Full-length narrowband version at `source_sr`.
    pub fn narrow(&self, source_sr: u32) -> Result<Waveform> {
        let n = factor(self.wide.sample_rate, source_sr)?;
        let lp = self
            .lowpassed
            .get(&source_sr)
            .ok_or_else(|| Error::InvalidArgument(format!("no low-passed copy at {source_sr} Hz")))?;
        Waveform::new(lp.iter().step_by(n).copied().collect(), source_sr)
    }

    /// Segments counted toward the epoch length.
    pub fn n_segments(&self, segment: usize) -> usize {
        (self.wide.len() / segment).max(1)
    }

    /// Crop at a random offset aligned to `target_sr / source_sr`.
    pub fn random_pair(&self, segment: usize, source_sr: u32, rng: &mut impl Rng) -> Result<PairedExample> {
        let n = factor(self.wide.sample_rate, source_sr)?;
        let slots = (self.wide.len() - segment) / n;
        let offset = rng.random_range(0..=slots) * n;
        self.pair_at(segment, source_sr, offset)
    }

    pub fn pair_at(&self, segment: usize, source_sr: u32, offset: usize) -> Result<PairedExample> {
        let n = factor(self.wide.sample_rate, source_sr)?;
        if offset % n != 0 || offset + segment > self.wide.len() || segment % n != 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {offset}+{segment} invalid for {} samples at factor {n}",
                self.wide.len()
            )));
        }
        let lp = self
            .lowpassed
            .get(&source_sr)
            .ok_or_else(|| Error::InvalidArgument(format!("no low-passed copy at {source_sr} Hz")))?;
        Ok(PairedExample {
            wide: Waveform {
                samples: self.wide.samples[offset..offset + segment].to_vec(),
                sample_rate: self.wide.sample_rate,
            },
            narrow: Waveform {
                samples: lp[offset..offset + segment].iter().step_by(n).copied().collect(),
                sample_rate: source_sr,
            },
            offset,
        })
    }
}

fn factor(target: u32, source: u32) -> Result<usize> {
    if source == 0 || source > target || target % source != 0 {
        return Err(Error::SampleRate {
            expected: target,
            found: source,
            path: None,
        });
    }
    Ok((target / source) as usize)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub target_sr: u32,
    pub source_rates: Vec<u32>,
    pub segment: usize,
    pub utterances: Vec<Utterance>,
    /// Utterance index of every segment slot, in corpus order.
    pub slots: Vec<usize>,
}

impl Dataset {
    pub fn new(
        named: Vec<(String, Waveform)>,
        target_sr: u32,
        source_rates: &[u32],
        segment: usize,
        trim: &TrimConfig,
    ) -> Result<Self> {
        if named.is_empty() {
            return Err(Error::Corpus("no utterances".into()));
        }
        if source_rates.is_empty() {
            return Err(Error::Config("at least one source rate is required".into()));
        }
        for &sr in source_rates {
            let n = factor(target_sr, sr)?;
            if segment % n != 0 {
                return Err(Error::Config(format!(
                    "segment length {segment} is not a multiple of factor {n}"
                )));
            }
        }
        let mut utterances = Vec::with_capacity(named.len());
        for (name, w) in named {
            if w.sample_rate != target_sr {
                return Err(Error::SampleRate {
                    expected: target_sr,
                    found: w.sample_rate,
                    path: Some(PathBuf::from(name)),
                });
            }
            let w = if trim.enabled { trim_silence(&w, trim) } else { w };
            utterances.push(Utterance::new(name, w, segment, source_rates)?);
        }
        let slots = utterances
            .iter()
            .enumerate()
            .flat_map(|(i, u)| std::iter::repeat_n(i, u.n_segments(segment)))
            .collect();
        Ok(Self {
            target_sr,
            source_rates: source_rates.to_vec(),
            segment,
            utterances,
            slots,
        })
    }

    pub fn n_segments(&self) -> usize {
        self.slots.len()
    }
}

/// Sorted `.wav` files directly inside `dir`.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads every WAV in `dir` (sorted by name) and builds the paired dataset.
/// A file at the wrong rate fails with an error naming it.
pub fn prepare_pairs(
    dir: &Path,
    target_sr: u32,
    source_rates: &[u32],
    segment: usize,
    trim: &TrimConfig,
) -> Result<Dataset> {
    let files = list_wavs(dir)?;
    if files.is_empty() {
        return Err(Error::Corpus(format!("no WAV files in {}", dir.display())));
    }
    let mut named = Vec::with_capacity(files.len());
    for f in files {
        let w = read_wav(&f)?;
        if w.sample_rate != target_sr {
            return Err(Error::SampleRate {
                expected: target_sr,
                found: w.sample_rate,
                path: Some(f),
            });
        }
        let name = f.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        named.push((name, w));
    }
    Dataset::new(named, target_sr, source_rates, segment, trim)
}
