//! Deterministic synthetic audio with known spectral content: harmonic complexes,
//! linear chirps, band-limited noise bursts and amplitude-modulated tones.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, WavEncoding, Waveform};
use crate::error::{Error, Result};

pub const PEAK: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthKind {
    /// Partials at every multiple of `f0` below Nyquist with amplitude 1/k.
    Harmonic { f0: f64 },
    /// Linear sweep from `f_start` to `f_end` over the whole duration.
    Chirp { f_start: f64, f_end: f64 },
    /// Gaussian noise restricted to `[low, high]` Hz, gated on between 20% and 80% of the duration.
    NoiseBurst { low: f64, high: f64 },
    AmTone { carrier: f64, mod_freq: f64, depth: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(flatten)]
    pub kind: SynthKind,
    pub duration: f64,
    pub sr: u32,
    pub seed: u64,
}

impl SynthSpec {
    pub fn len(&self) -> usize {
        (self.duration * self.sr as f64).round() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let nyq = self.sr as f64 / 2.0;
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synth spec: {m}")));
        if self.sr == 0 || !(self.duration > 0.0) || self.is_empty() {
            return bad("duration and sample rate must be positive");
        }
        let in_band = |f: f64| f > 0.0 && f < nyq;
        match self.kind {
            SynthKind::Harmonic { f0 } if !in_band(f0) => bad("f0 must lie below Nyquist"),
            SynthKind::Chirp { f_start, f_end } if !(in_band(f_start) && in_band(f_end)) => {
                bad("chirp endpoints must lie below Nyquist")
            }
            SynthKind::NoiseBurst { low, high } if !(low >= 0.0 && low < high && high <= nyq) => {
                bad("noise band must satisfy 0 <= low < high <= Nyquist")
            }
            SynthKind::AmTone { carrier, mod_freq, depth }
                if !(in_band(carrier + mod_freq) && carrier > mod_freq && mod_freq > 0.0 && (0.0..=1.0).contains(&depth)) =>
            {
                bad("AM tone sidebands must lie in (0, Nyquist) and depth in [0, 1]")
            }
            _ => Ok(()),
        }
    }
}

/// Renders `spec` and normalizes its peak to [`PEAK`].
pub fn synth(spec: &SynthSpec) -> Result<Waveform> {
    spec.validate()?;
    let raw = render(spec);
    normalize(raw, PEAK, spec.sr)
}

fn render(spec: &SynthSpec) -> Vec<f64> {
    let n = spec.len();
    let sr = spec.sr as f64;
    let t = |i: usize| i as f64 / sr;
    match spec.kind {
        SynthKind::Harmonic { f0 } => {
            let nyq = sr / 2.0;
            let partials: Vec<usize> = (1..).take_while(|&k| k as f64 * f0 < nyq).collect();
            (0..n)
                .map(|i| {
                    partials
                        .iter()
                        .map(|&k| (2.0 * PI * k as f64 * f0 * t(i)).sin() / k as f64)
                        .sum()
                })
                .collect()
        }
        SynthKind::Chirp { f_start, f_end } => {
            let rate = (f_end - f_start) / spec.duration;
            (0..n)
                .map(|i| (2.0 * PI * (f_start * t(i) + 0.5 * rate * t(i) * t(i))).sin())
                .collect()
        }
        SynthKind::NoiseBurst { low, high } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let banded = band_limit(&noise, sr, low, high);
            let (on, off) = (0.2 * n as f64, 0.8 * n as f64);
            let ramp = 0.02 * n as f64;
            banded
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let x = i as f64;
                    let g = if x < on || x > off {
                        0.0
                    } else {
                        let edge = ((x - on).min(off - x) / ramp).min(1.0);
                        0.5 - 0.5 * (PI * edge).cos()
                    };
                    v * g
                })
                .collect()
        }
        SynthKind::AmTone { carrier, mod_freq, depth } => (0..n)
            .map(|i| (1.0 + depth * (2.0 * PI * mod_freq * t(i)).sin()) * (2.0 * PI * carrier * t(i)).sin())
            .collect(),
    }
}

/// Zeroes every DFT bin outside `[low, high]`.
fn band_limit(x: &[f64], sr: f64, low: f64, high: f64) -> Vec<f64> {
    let n = x.len();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, z) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if f < low || f > high {
            *z = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|z| z.re / n as f64).collect()
}

fn normalize(x: Vec<f64>, peak: f64, sr: u32) -> Result<Waveform> {
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(max > 0.0) {
        return Err(Error::InvalidArgument("synthesized signal is silent".into()));
    }
    Waveform::new(x.into_iter().map(|v| v * peak / max).collect(), sr)
}

/// A mixture of weighted components rendered at a common length and rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub file: String,
    /// Output peak is `gain · PEAK`.
    pub gain: f64,
    pub components: Vec<(f64, SynthSpec)>,
}

impl Utterance {
    pub fn render(&self) -> Result<Waveform> {
        let first = self
            .components
            .first()
            .ok_or_else(|| Error::InvalidArgument("utterance has no components".into()))?;
        let (len, sr) = (first.1.len(), first.1.sr);
        let mut mix = vec![0.0; len];
        for (w, spec) in &self.components {
            if spec.len() != len || spec.sr != sr {
                return Err(Error::InvalidArgument("components differ in length or rate".into()));
            }
            for (m, v) in mix.iter_mut().zip(synth(spec)?.samples) {
                *m += w * v;
            }
        }
        normalize(mix, self.gain * PEAK, sr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub sample_rate: u32,
    pub utterances: Vec<Utterance>,
}

impl Manifest {
    /// Specs for `n` utterances of `duration` seconds at `sr`. Each mixes a harmonic
    /// complex with a chirp or AM tone and a noise burst reaching into the top quarter
    /// of the band, at a per-utterance level.
    pub fn toy(n: usize, sr: u32, duration: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nyq = sr as f64 / 2.0;
        let utterances = (0..n)
            .map(|u| {
                let spec = |kind, seed| SynthSpec { kind, duration, sr, seed };
                let harmonic = SynthKind::Harmonic {
                    f0: rng.random_range(100.0..300.0),
                };
                let second = if u % 2 == 0 {
                    SynthKind::Chirp {
                        f_start: rng.random_range(100.0..0.2 * nyq),
                        f_end: rng.random_range(0.5 * nyq..0.9 * nyq),
                    }
                } else {
                    let mod_freq = rng.random_range(2.0..8.0);
                    SynthKind::AmTone {
                        carrier: rng.random_range(0.1 * nyq..0.8 * nyq),
                        mod_freq,
                        depth: rng.random_range(0.3..0.9),
                    }
                };
                let noise = SynthKind::NoiseBurst {
                    low: rng.random_range(0.3 * nyq..0.5 * nyq),
                    high: nyq,
                };
                let components = vec![
                    (1.0, spec(harmonic, rng.random())),
                    (rng.random_range(0.2..0.5), spec(second, rng.random())),
                    (rng.random_range(0.05..0.2), spec(noise, rng.random())),
                ];
                Utterance {
                    file: format!("toy_{u:03}.wav"),
                    gain: rng.random_range(0.4..1.0),
                    components,
                }
            })
            .collect();
        Self {
            seed,
            sample_rate: sr,
            utterances,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Other(format!("manifest: {e}")))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `n` toy utterances (2 s each at `sr`) as float32 WAVs plus `manifest.json` into `dir`.
pub fn make_toy_corpus(n: usize, dir: &Path, sr: u32, seed: u64) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest::toy(n, sr, 2.0, seed);
    for u in &manifest.utterances {
        write_wav(&dir.join(&u.file), &u.render()?, WavEncoding::Float32)?;
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spectrum_db(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        buf[..n / 2 + 1].iter().map(|z| 20.0 * (2.0 * z.norm() / n as f64).max(1e-12).log10()).collect()
    }

    fn spec(kind: SynthKind) -> SynthSpec {
        SynthSpec {
            kind,
            duration: 1.0,
            sr: 16000,
            seed: 9,
        }
    }

    #[test]
    fn harmonic_partials_follow_inverse_k() {
        let w = synth(&spec(SynthKind::Harmonic { f0: 200.0 })).unwrap();
        let db = spectrum_db(&w.samples);
        // 1 s at 16 kHz: bin k sits at k Hz.
        for k in 1..40 {
            let expect = db[200] - 20.0 * (k as f64).log10();
            assert!((db[200 * k] - expect).abs() < 0.5, "partial {k}");
        }
        assert!(db[300] < db[200] - 100.0);
    }

    #[test]
    fn deterministic_and_bounded() {
        let s = spec(SynthKind::NoiseBurst { low: 4000.0, high: 8000.0 });
        let (a, b) = (synth(&s).unwrap(), synth(&s).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.len(), 16000);
        assert!((a.peak() - PEAK).abs() < 1e-12);
        let db = spectrum_db(&a.samples);
        let energy = |r: std::ops::Range<usize>| db[r].iter().map(|v| 10f64.powf(v / 10.0)).sum::<f64>();
        // The gate's ramps spread a little energy below the band edge.
        assert!(energy(0..3800) < 1e-3 * energy(4000..8001));
    }

    #[test]
    fn chirp_frequency_is_monotone() {
        let w = synth(&spec(SynthKind::Chirp { f_start: 100.0, f_end: 7000.0 })).unwrap();
        // Analytic signal via FFT, then the time derivative of its unwrapped phase.
        let n = w.len();
        let mut buf: Vec<Complex<f64>> = w.samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut buf);
        for (k, z) in buf.iter_mut().enumerate() {
            *z *= match k {
                0 => 1.0,
                k if k < n / 2 => 2.0,
                k if k == n / 2 => 1.0,
                _ => 0.0,
            };
        }
        planner.plan_fft_inverse(n).process(&mut buf);
        let phase: Vec<f64> = buf.iter().map(|z| z.arg()).collect();
        let iaf: Vec<f64> = phase
            .windows(2)
            .map(|p| crate::spectral::wrap_to_pi(p[1] - p[0]) * 16000.0 / (2.0 * PI))
            .collect();
        let smooth: Vec<f64> = iaf[200..n - 200].chunks(400).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        assert!(smooth.windows(2).all(|p| p[1] > p[0]), "{smooth:?}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(synth(&spec(SynthKind::Harmonic { f0: 9000.0 })).is_err());
        assert!(synth(&SynthSpec { duration: 0.0, ..spec(SynthKind::Harmonic { f0: 100.0 }) }).is_err());
        assert!(synth(&spec(SynthKind::NoiseBurst { low: 5000.0, high: 4000.0 })).is_err());
    }

    #[test]
    fn toy_manifest_is_reproducible_with_high_band_content() {
        let a = Manifest::toy(20, 16000, 2.0, 1);
        assert_eq!(a.to_json().unwrap(), Manifest::toy(20, 16000, 2.0, 1).to_json().unwrap());
        assert_eq!(a.utterances.len(), 20);
        let w = a.utterances[0].render().unwrap();
        assert!(w.peak() <= PEAK + 1e-12);
        let db = spectrum_db(&w.samples);
        let hz_per_bin = 16000.0 / w.len() as f64;
        let high = (4000.0 / hz_per_bin) as usize;
        assert!(db[high..].iter().any(|&v| v > -60.0));
    }
}
