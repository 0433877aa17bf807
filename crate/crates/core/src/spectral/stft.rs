//! Framed FFT analysis and weighted overlap-add synthesis.
//!
//! Frames are `win_length` samples long, centred (with `center_padding`) by
//! reflecting `win_length / 2` samples at both ends, so a signal of `L` samples
//! yields `floor(L / hop) + 1` frames. The windowed frame sits in the middle of
//! an `n_fft` buffer before the transform.

use std::any::Any;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Grid;
use crate::audio::Waveform;
use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Smallest acceptable overlap-add normalizer.
pub const NORMALIZER_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
    Rectangular,
}

impl WindowKind {
    /// Periodic window of length `n`.
    pub fn samples(self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub window: WindowKind,
    pub center_padding: bool,
}

impl StftConfig {
    pub fn new(
        n_fft: usize,
        win_length: usize,
        hop_length: usize,
        window: WindowKind,
        center_padding: bool,
    ) -> Result<Self> {
        let cfg = Self {
            n_fft,
            win_length,
            hop_length,
            window,
            center_padding,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Generator front end: 1024-point FFT, 320-sample Hann window, hop 80.
    pub fn model() -> Self {
        Self::new(1024, 320, 80, WindowKind::Hann, true).expect("valid")
    }

    /// Evaluation metrics: 2048-point FFT, 2048-sample Hann window, hop 512.
    pub fn eval() -> Self {
        Self::new(2048, 2048, 512, WindowKind::Hann, true).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.hop_length && self.hop_length <= self.win_length && self.win_length <= self.n_fft)
        {
            return Err(Error::Config(format!(
                "need 0 < hop ({}) <= win ({}) <= n_fft ({})",
                self.hop_length, self.win_length, self.n_fft
            )));
        }
        // steady-state overlap-add normalizer must stay away from zero
        let w = self.window.samples(self.win_length);
        let min = (0..self.hop_length)
            .map(|phase| {
                (phase..self.win_length)
                    .step_by(self.hop_length)
                    .map(|i| w[i] * w[i])
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        if min < NORMALIZER_FLOOR {
            return Err(Error::Config(format!(
                "{:?} window of {} with hop {} violates the overlap-add reconstruction condition",
                self.window, self.win_length, self.hop_length
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn pad(&self) -> usize {
        if self.center_padding {
            self.win_length / 2
        } else {
            0
        }
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        let padded = len + 2 * self.pad();
        if padded < self.win_length {
            0
        } else {
            (padded - self.win_length) / self.hop_length + 1
        }
    }

    /// Shortest signal the analysis accepts.
    pub fn min_len(&self) -> usize {
        if self.center_padding {
            self.win_length.max(self.pad() + 1)
        } else {
            self.win_length
        }
    }

    pub fn bin_frequency(&self, bin: usize, sample_rate: u32) -> f64 {
        bin as f64 * sample_rate as f64 / self.n_fft as f64
    }
}

/// Real/imaginary T×F grids plus what is needed to invert them.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub real: Grid,
    pub imag: Grid,
    pub config: StftConfig,
    pub source_length: usize,
}

impl ComplexSpectrum {
    pub fn new(real: Grid, imag: Grid, config: StftConfig, source_length: usize) -> Result<Self> {
        if real.shape() != imag.shape() {
            return Err(Error::Shape(format!(
                "real {:?} vs imag {:?}",
                real.shape(),
                imag.shape()
            )));
        }
        if real.cols() != config.n_bins() {
            return Err(Error::Shape(format!(
                "spectrum has {} bins, config expects {}",
                real.cols(),
                config.n_bins()
            )));
        }
        Ok(Self {
            real,
            imag,
            config,
            source_length,
        })
    }

    pub fn frames(&self) -> usize {
        self.real.rows()
    }

    pub fn bins(&self) -> usize {
        self.real.cols()
    }

    /// Plane-major `[2, T, F]` buffer (real plane first).
    pub fn to_planes(&self) -> Vec<f64> {
        let mut v = self.real.data().to_vec();
        v.extend_from_slice(self.imag.data());
        v
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            real: self.real.map(|v| v * k),
            imag: self.imag.map(|v| v * k),
            ..self.clone()
        }
    }
}

type PlanKey = (std::any::TypeId, usize, bool);

fn plan<R: Real>(n: usize, inverse: bool) -> Arc<dyn Fft<R>> {
    static CACHE: OnceLock<Mutex<HashMap<PlanKey, Box<dyn Any + Send + Sync>>>> = OnceLock::new();
    let key = (std::any::TypeId::of::<R>(), n, inverse);
    let mut cache = CACHE.get_or_init(Default::default).lock().expect("fft cache");
    let entry = cache.entry(key).or_insert_with(|| {
        let mut planner = FftPlanner::<R>::new();
        let p = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        Box::new(p)
    });
    entry
        .downcast_ref::<Arc<dyn Fft<R>>>()
        .expect("plan type matches key")
        .clone()
}

type KernelKey = (std::any::TypeId, StftConfig);

/// Process-wide shared kernel for `cfg`.
pub fn shared_kernel<R: Real>(cfg: StftConfig) -> Arc<StftKernel<R>> {
    static CACHE: OnceLock<Mutex<HashMap<KernelKey, Box<dyn Any + Send + Sync>>>> = OnceLock::new();
    let key = (std::any::TypeId::of::<R>(), cfg);
    let mut cache = CACHE.get_or_init(Default::default).lock().expect("kernel cache");
    cache
        .entry(key)
        .or_insert_with(|| Box::new(Arc::new(StftKernel::<R>::new(cfg))))
        .downcast_ref::<Arc<StftKernel<R>>>()
        .expect("kernel type matches key")
        .clone()
}

/// Reusable analysis/synthesis kernels for one config, generic over precision.
/// Spectra are plane-major `[2, T, F]` buffers.
pub struct StftKernel<R: Real> {
    cfg: StftConfig,
    window: Vec<R>,
    forward: Arc<dyn Fft<R>>,
    inverse: Arc<dyn Fft<R>>,
}

impl<R: Real> StftKernel<R> {
    pub fn new(cfg: StftConfig) -> Self {
        Self {
            cfg,
            window: cfg.window.samples(cfg.win_length).into_iter().map(R::of).collect(),
            forward: plan(cfg.n_fft, false),
            inverse: plan(cfg.n_fft, true),
        }
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    fn offset(&self) -> usize {
        (self.cfg.n_fft - self.cfg.win_length) / 2
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len < self.cfg.min_len() {
            return Err(Error::SignalTooShort {
                len,
                win: self.cfg.min_len(),
            });
        }
        Ok(())
    }

    /// Index into the original signal for a position in the padded signal.
    fn source_index(&self, padded_idx: usize, len: usize) -> usize {
        let pad = self.cfg.pad();
        if padded_idx < pad {
            pad - padded_idx
        } else if padded_idx - pad < len {
            padded_idx - pad
        } else {
            let over = padded_idx - pad - len;
            len - 2 - over
        }
    }

    pub fn analyze(&self, x: &[R]) -> Result<(Vec<R>, usize)> {
        self.check_len(x.len())?;
        let (n, f) = (self.cfg.n_fft, self.cfg.n_bins());
        let frames = self.cfg.n_frames(x.len());
        let off = self.offset();
        let mut out = vec![R::zero(); 2 * frames * f];
        let mut buf = vec![Complex::new(R::zero(), R::zero()); n];
        let mut scratch = vec![Complex::new(R::zero(), R::zero()); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(R::zero(), R::zero()));
            for j in 0..self.cfg.win_length {
                let s = x[self.source_index(t * self.cfg.hop_length + j, x.len())];
                buf[off + j].re = s * self.window[j];
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..f {
                out[t * f + k] = buf[k].re;
                out[frames * f + t * f + k] = buf[k].im;
            }
        }
        Ok((out, frames))
    }

    /// Adjoint of [`Self::analyze`]: maps a `[2, T, F]` gradient back onto the signal.
    pub fn analyze_adjoint(&self, grad: &[R], len: usize) -> Vec<R> {
        let (n, f) = (self.cfg.n_fft, self.cfg.n_bins());
        let frames = self.cfg.n_frames(len);
        assert_eq!(grad.len(), 2 * frames * f, "analyze_adjoint: gradient size");
        let off = self.offset();
        let mut gx = vec![R::zero(); len];
        let mut buf = vec![Complex::new(R::zero(), R::zero()); n];
        let mut scratch = vec![Complex::new(R::zero(), R::zero()); self.inverse.get_inplace_scratch_len()];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(R::zero(), R::zero()));
            for k in 0..f {
                buf[k] = Complex::new(grad[t * f + k], grad[frames * f + t * f + k]);
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            for j in 0..self.cfg.win_length {
                let src = self.source_index(t * self.cfg.hop_length + j, len);
                gx[src] = gx[src] + buf[off + j].re * self.window[j];
            }
        }
        gx
    }

    fn hermitian_weight(&self, k: usize) -> R {
        let n = self.cfg.n_fft;
        if k == 0 || (n % 2 == 0 && k == n / 2) {
            R::one()
        } else {
            R::of(2.0)
        }
    }

    fn envelope(&self, frames: usize) -> Vec<R> {
        let len = (frames - 1) * self.cfg.hop_length + self.cfg.win_length;
        let mut env = vec![R::zero(); len];
        for t in 0..frames {
            for (j, &w) in self.window.iter().enumerate() {
                env[t * self.cfg.hop_length + j] = env[t * self.cfg.hop_length + j] + w * w;
            }
        }
        env
    }

    /// Per-output-sample normalizer (index into the overlap-added buffer, 1/env).
    fn output_map(&self, frames: usize, out_len: usize) -> Result<Vec<Option<(usize, R)>>> {
        let env = self.envelope(frames);
        let pad = self.cfg.pad();
        (0..out_len)
            .map(|i| {
                let p = i + pad;
                if p >= env.len() {
                    return Err(Error::NormalizerUnderflow { index: i, value: 0.0 });
                }
                let e = env[p];
                if e.f64() < NORMALIZER_FLOOR {
                    return Err(Error::NormalizerUnderflow {
                        index: i,
                        value: e.f64(),
                    });
                }
                Ok(Some((p, R::one() / e)))
            })
            .collect()
    }

    /// Inverse transform of a `[2, T, F]` buffer to `out_len` samples.
    pub fn synthesize(&self, spec: &[R], frames: usize, out_len: usize) -> Result<Vec<R>> {
        let (n, f) = (self.cfg.n_fft, self.cfg.n_bins());
        if spec.len() != 2 * frames * f || frames == 0 {
            return Err(Error::Shape(format!(
                "synthesize: {} values for {frames} frames of {f} bins",
                spec.len()
            )));
        }
        let map = self.output_map(frames, out_len)?;
        let off = self.offset();
        let inv_n = R::one() / R::of(n as f64);
        let mut acc = vec![R::zero(); (frames - 1) * self.cfg.hop_length + self.cfg.win_length];
        let mut buf = vec![Complex::new(R::zero(), R::zero()); n];
        let mut scratch = vec![Complex::new(R::zero(), R::zero()); self.inverse.get_inplace_scratch_len()];
        for t in 0..frames {
            for k in 0..f {
                buf[k] = Complex::new(spec[t * f + k], spec[frames * f + t * f + k]);
            }
            buf[0].im = R::zero();
            if n % 2 == 0 {
                buf[n / 2].im = R::zero();
            }
            for k in f..n {
                buf[k] = buf[n - k].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            for (j, &w) in self.window.iter().enumerate() {
                let p = t * self.cfg.hop_length + j;
                acc[p] = acc[p] + buf[off + j].re * inv_n * w;
            }
        }
        Ok(map
            .into_iter()
            .map(|m| m.map_or(R::zero(), |(p, inv)| acc[p] * inv))
            .collect())
    }

    /// Adjoint of [`Self::synthesize`].
    pub fn synthesize_adjoint(&self, grad: &[R], frames: usize, out_len: usize) -> Result<Vec<R>> {
        let (n, f) = (self.cfg.n_fft, self.cfg.n_bins());
        assert_eq!(grad.len(), out_len, "synthesize_adjoint: gradient size");
        let map = self.output_map(frames, out_len)?;
        let off = self.offset();
        let inv_n = R::one() / R::of(n as f64);
        let mut gacc = vec![R::zero(); (frames - 1) * self.cfg.hop_length + self.cfg.win_length];
        for (m, &g) in map.iter().zip(grad) {
            if let Some((p, inv)) = m {
                gacc[*p] = gacc[*p] + g * *inv;
            }
        }
        let mut out = vec![R::zero(); 2 * frames * f];
        let mut buf = vec![Complex::new(R::zero(), R::zero()); n];
        let mut scratch = vec![Complex::new(R::zero(), R::zero()); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(R::zero(), R::zero()));
            for (j, &w) in self.window.iter().enumerate() {
                buf[off + j].re = gacc[t * self.cfg.hop_length + j] * w;
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..f {
                let c = self.hermitian_weight(k) * inv_n;
                out[t * f + k] = buf[k].re * c;
                let dc_or_nyquist = k == 0 || (n % 2 == 0 && k == n / 2);
                out[frames * f + t * f + k] = if dc_or_nyquist { R::zero() } else { buf[k].im * c };
            }
        }
        Ok(out)
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrum> {
    let kernel = StftKernel::<f64>::new(*cfg);
    let (planes, frames) = kernel.analyze(&w.samples)?;
    let f = cfg.n_bins();
    let (re, im) = planes.split_at(frames * f);
    ComplexSpectrum::new(
        Grid::new(frames, f, re.to_vec())?,
        Grid::new(frames, f, im.to_vec())?,
        *cfg,
        w.len(),
    )
}

/// Inverse STFT; the result has `source_length` samples at `sample_rate`.
pub fn istft(s: &ComplexSpectrum, sample_rate: u32) -> Result<Waveform> {
    let kernel = StftKernel::<f64>::new(s.config);
    let samples = kernel.synthesize(&s.to_planes(), s.frames(), s.source_length)?;
    Waveform::new(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000).unwrap()
    }

    #[test]
    fn model_config_frame_count() {
        let s = stft(&Waveform::zeros(8000, 16000), &StftConfig::model()).unwrap();
        assert_eq!((s.frames(), s.bins()), (101, 513));
        assert!(s.real.data().iter().chain(s.imag.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_signal_is_rejected() {
        let r = stft(&Waveform::zeros(100, 16000), &StftConfig::model());
        assert!(matches!(r, Err(Error::SignalTooShort { .. })));
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(StftConfig::new(256, 512, 128, WindowKind::Hann, true).is_err());
        // hann with hop == win has zero normalizer at frame edges
        assert!(StftConfig::new(512, 512, 512, WindowKind::Hann, true).is_err());
        assert!(StftConfig::new(512, 512, 512, WindowKind::Rectangular, true).is_ok());
    }

    #[test]
    fn bin_centred_cosine_concentrates_energy() {
        // rectangular window, win = n_fft: a bin-centred cosine is a single spectral line
        let n = 64;
        let cfg = StftConfig::new(n, n, n / 2, WindowKind::Rectangular, false).unwrap();
        let bin = 5;
        let x: Vec<f64> = (0..4 * n)
            .map(|i| (2.0 * std::f64::consts::PI * bin as f64 * i as f64 / n as f64).cos())
            .collect();
        let s = stft(&Waveform::new(x.clone(), 16000).unwrap(), &cfg).unwrap();
        for t in 0..s.frames() {
            // independent direct DFT of the same frame
            let frame = &x[t * n / 2..t * n / 2 + n];
            for k in 0..s.bins() {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, &v) in frame.iter().enumerate() {
                    let th = 2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                    re += v * th.cos();
                    im -= v * th.sin();
                }
                assert!((s.real.get(t, k) - re).abs() < 1e-9);
                assert!((s.imag.get(t, k) - im).abs() < 1e-9);
                let mag = (re * re + im * im).sqrt();
                if k == bin {
                    assert!((mag - n as f64 / 2.0).abs() < 1e-9);
                } else {
                    assert!(mag < 1e-9);
                }
            }
        }
    }

    #[test]
    fn round_trip_reconstructs_signal() {
        let cfg = StftConfig::model();
        let x = random_wave(8000, 3);
        let s = stft(&x, &cfg).unwrap();
        let y = istft(&s, 16000).unwrap();
        assert_eq!(y.len(), 8000);
        let err = x.samples.iter().zip(&y.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn istft_is_linear() {
        let cfg = StftConfig::model();
        let x = random_wave(4000, 9);
        let s = stft(&x, &cfg).unwrap();
        let y1 = istft(&s, 16000).unwrap();
        let y2 = istft(&s.scaled(2.0), 16000).unwrap();
        for (a, b) in y1.samples.iter().zip(&y2.samples) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        let z = istft(&s.scaled(0.0), 16000).unwrap();
        assert!(z.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <A x, g> == <x, Aᵀ g> for analysis and synthesis
        let cfg = StftConfig::new(64, 48, 12, WindowKind::Hann, true).unwrap();
        let k = StftKernel::<f64>::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (ax, frames) = k.analyze(&x).unwrap();
        let g: Vec<f64> = (0..ax.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = ax.iter().zip(&g).map(|(a, b)| a * b).sum();
        let atg = k.analyze_adjoint(&g, x.len());
        let rhs: f64 = x.iter().zip(&atg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));

        let sx = k.synthesize(&g, frames, x.len()).unwrap();
        let lhs: f64 = sx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let stg = k.synthesize_adjoint(&x, frames, x.len()).unwrap();
        let rhs: f64 = g.iter().zip(&stg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
