//! On-disk paired datasets.
//!
//! A prepared directory holds the (optionally trimmed) wideband utterances under
//! `wide/`, the full-length narrowband version of each under `narrow_<sr>/`, and
//! `pairs.json` describing both. Training crops are drawn from these at run time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{list_wavs, prepare_pairs, Dataset, TrimConfig};
use super::hex;
use crate::audio::{read_wav, write_wav, WavEncoding};
use crate::error::{Error, Result};

pub const PREPARED_MANIFEST: &str = "pairs.json";
pub const WIDE_DIR: &str = "wide";

pub fn narrow_dir(source_sr: u32) -> String {
    format!("narrow_{source_sr}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareConfig {
    pub target_sr: u32,
    pub source_rates: Vec<u32>,
    pub segment_length: usize,
    pub trim: TrimConfig,
}

impl PrepareConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedUtterance {
    pub name: String,
    /// Wideband length after trimming and padding.
    pub samples: usize,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedManifest {
    pub config: PrepareConfig,
    pub config_hash: String,
    /// Set when more than one source rate is sampled per example.
    pub multi_rate: bool,
    pub n_utterances: usize,
    pub n_segments: usize,
    pub utterances: Vec<PreparedUtterance>,
}

/// Reads a corpus of wideband WAVs, pairs it and writes the prepared directory.
pub fn prepare_dir(input: &Path, out: &Path, cfg: &PrepareConfig) -> Result<PreparedManifest> {
    let ds = prepare_pairs(input, cfg.target_sr, &cfg.source_rates, cfg.segment_length, &cfg.trim)?;
    let mkdir = |d: &Path| std::fs::create_dir_all(d).map_err(|e| Error::io(d, e));
    mkdir(&out.join(WIDE_DIR))?;
    for &sr in &cfg.source_rates {
        mkdir(&out.join(narrow_dir(sr)))?;
    }
    let mut utterances = Vec::with_capacity(ds.utterances.len());
    for u in &ds.utterances {
        write_wav(out.join(WIDE_DIR).join(&u.name), &u.wide, WavEncoding::Float32)?;
        for &sr in &cfg.source_rates {
            write_wav(out.join(narrow_dir(sr)).join(&u.name), &u.narrow(sr)?, WavEncoding::Float32)?;
        }
        utterances.push(PreparedUtterance {
            name: u.name.clone(),
            samples: u.wide.len(),
            segments: u.n_segments(ds.segment),
        });
    }
    let manifest = PreparedManifest {
        config: cfg.clone(),
        config_hash: cfg.hash()?,
        multi_rate: cfg.source_rates.len() > 1,
        n_utterances: utterances.len(),
        n_segments: ds.n_segments(),
        utterances,
    };
    let path = out.join(PREPARED_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Other(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(PREPARED_MANIFEST)
}

pub fn read_manifest(dir: &Path) -> Result<PreparedManifest> {
    let path = manifest_path(dir);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: PreparedManifest =
        serde_json::from_str(&text).map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
    if m.config.hash()? != m.config_hash {
        return Err(Error::Corpus(format!("{}: config hash does not match its config", path.display())));
    }
    Ok(m)
}

/// Loads a prepared directory back into a [`Dataset`]. Trimming has already
/// been applied, so the stored wideband files are used as they are.
pub fn load_prepared(dir: &Path) -> Result<(PreparedManifest, Dataset)> {
    let m = read_manifest(dir)?;
    let wide = dir.join(WIDE_DIR);
    let on_disk = list_wavs(&wide)?;
    if on_disk.len() != m.utterances.len() {
        return Err(Error::Corpus(format!(
            "{} lists {} utterances but {} has {} WAV files",
            PREPARED_MANIFEST,
            m.utterances.len(),
            wide.display(),
            on_disk.len()
        )));
    }
    let mut named = Vec::with_capacity(m.utterances.len());
    for u in &m.utterances {
        let w = read_wav(wide.join(&u.name))?;
        if w.len() != u.samples {
            return Err(Error::Corpus(format!("{}: expected {} samples, found {}", u.name, u.samples, w.len())));
        }
        named.push((u.name.clone(), w));
    }
    let c = &m.config;
    let ds = Dataset::new(named, c.target_sr, &c.source_rates, c.segment_length, &TrimConfig::default())?;
    Ok((m, ds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_toy_corpus;

    fn cfg(rates: Vec<u32>) -> PrepareConfig {
        PrepareConfig {
            target_sr: 16000,
            source_rates: rates,
            segment_length: 8000,
            trim: TrimConfig::default(),
        }
    }

    #[test]
    fn round_trip_preserves_dataset() {
        let dir = tempfile::tempdir().unwrap();
        make_toy_corpus(3, &dir.path().join("c"), 16000, 4).unwrap();
        let out = dir.path().join("p");
        let m = prepare_dir(&dir.path().join("c"), &out, &cfg(vec![4000, 8000])).unwrap();
        assert!(m.multi_rate);
        assert_eq!((m.n_utterances, m.n_segments), (3, 12));

        let (m2, ds) = load_prepared(&out).unwrap();
        assert_eq!(m, m2);
        assert_eq!(ds.n_segments(), 12);
        let direct = prepare_pairs(&dir.path().join("c"), 16000, &[4000, 8000], 8000, &TrimConfig::default()).unwrap();
        for (a, b) in ds.utterances.iter().zip(&direct.utterances) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.pair_at(8000, 4000, 4000).unwrap(), b.pair_at(8000, 4000, 4000).unwrap());
        }
        let narrow = crate::audio::read_wav(out.join(narrow_dir(4000)).join(&m.utterances[0].name)).unwrap();
        // Stored as float32.
        let exact = direct.utterances[0].narrow(4000).unwrap();
        assert_eq!((narrow.sample_rate, narrow.len()), (exact.sample_rate, exact.len()));
        assert!(narrow.samples.iter().zip(&exact.samples).all(|(a, b)| (a - b).abs() < 1e-7));
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        make_toy_corpus(1, &dir.path().join("c"), 16000, 4).unwrap();
        let out = dir.path().join("p");
        prepare_dir(&dir.path().join("c"), &out, &cfg(vec![8000])).unwrap();
        let path = out.join(PREPARED_MANIFEST);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"segment_length\": 8000", "\"segment_length\": 4000");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_prepared(&out), Err(Error::Corpus(_))));
    }
}
