//! Kaiser-windowed sinc FIR filters, integer-factor interpolation and decimation.

use std::f64::consts::PI;

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Design stopband attenuation.
pub const STOPBAND_DB: f64 = 80.0;
const MAX_TAPS: usize = 8193;
/// Half-length in units of `sr / cutoff`.
const HALF_LENGTH_FACTOR: f64 = 32.0;

/// Kaiser beta for a given stopband attenuation in dB.
pub fn kaiser_beta(atten_db: f64) -> f64 {
    if atten_db > 50.0 {
        0.1102 * (atten_db - 8.7)
    } else if atten_db >= 21.0 {
        0.5842 * (atten_db - 21.0).powf(0.4) + 0.07886 * (atten_db - 21.0)
    } else {
        0.0
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut term, mut sum) = (1.0, 1.0);
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Odd-length, symmetric low-pass taps with unit DC gain.
pub fn lowpass_taps(sample_rate: u32, cutoff_hz: f64) -> Result<Vec<f64>> {
    let sr = sample_rate as f64;
    if !(cutoff_hz > 0.0 && cutoff_hz < sr / 2.0) {
        return Err(Error::InvalidArgument(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {}) for sample rate {sample_rate}",
            sr / 2.0
        )));
    }
    let half = ((HALF_LENGTH_FACTOR * sr / cutoff_hz).ceil() as usize).min(MAX_TAPS / 2);
    let beta = kaiser_beta(STOPBAND_DB);
    let fc = cutoff_hz / sr;
    let norm = bessel_i0(beta);
    let mut taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let m = i as f64 - half as f64;
            let sinc = if m == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * m).sin() / (PI * m)
            };
            let r = m / half as f64;
            sinc * bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / norm
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    Ok(taps)
}

/// Zero-stuffs `x` by `up` and applies the centred FIR `taps` with gain `up`,
/// returning `x.len() * up` samples. Samples outside the signal count as zero.
fn upsample_filter(x: &[f64], up: usize, taps: &[f64]) -> Vec<f64> {
    let half = (taps.len() / 2) as isize;
    let out_len = x.len() * up;
    let mut y = vec![0.0; out_len];
    let gain = up as f64;
    for (j, &v) in x.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let centre = (j * up) as isize;
        let lo = (centre - half).max(0);
        let hi = (centre + half).min(out_len as isize - 1);
        for m in lo..=hi {
            y[m as usize] += gain * v * taps[(m - centre + half) as usize];
        }
    }
    y
}

pub fn sinc_lowpass(w: &Waveform, cutoff_hz: f64) -> Result<Waveform> {
    let taps = lowpass_taps(w.sample_rate, cutoff_hz)?;
    Waveform::new(upsample_filter(&w.samples, 1, &taps), w.sample_rate)
}

/// Band-limited upsampling by an integer factor; the reconstruction filter cuts
/// at the original Nyquist frequency.
pub fn sinc_interpolate(w: &Waveform, n: usize) -> Result<Waveform> {
    if n < 1 {
        return Err(Error::InvalidArgument("interpolation factor must be >= 1".into()));
    }
    if n == 1 {
        return Ok(w.clone());
    }
    let sr = w.sample_rate as usize * n;
    let sr = u32::try_from(sr)
        .map_err(|_| Error::InvalidArgument(format!("target sample rate {sr} overflows")))?;
    let taps = lowpass_taps(sr, w.sample_rate as f64 / 2.0)?;
    Waveform::new(upsample_filter(&w.samples, n, &taps), sr)
}

/// Keeps every `n`-th sample. The caller is responsible for band-limiting first.
pub fn decimate(w: &Waveform, n: usize) -> Result<Waveform> {
    if n < 1 || w.sample_rate as usize % n != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot decimate {} Hz audio by {n}",
            w.sample_rate
        )));
    }
    Waveform::new(
        w.samples.iter().step_by(n).copied().collect(),
        w.sample_rate / n as u32,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    fn tone(freq: f64, sr: u32, len: usize) -> Waveform {
        let s = (0..len)
            .map(|i| (2.0 * PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    /// Peak magnitude near `freq` of a Hann-windowed interior segment.
    fn level_at(w: &Waveform, freq: f64) -> f64 {
        let n = 8192.min(w.len() / 2).next_power_of_two() / 2;
        let start = (w.len() - n) / 2;
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|i| {
                let h = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
                Complex::new(w.samples[start + i] * h, 0.0)
            })
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let bin = (freq * n as f64 / w.sample_rate as f64).round() as usize;
        (bin.saturating_sub(3)..=bin + 3)
            .map(|k| buf[k].norm())
            .fold(0.0, f64::max)
    }

    fn db(a: f64, b: f64) -> f64 {
        20.0 * (a / b).log10()
    }

    #[test]
    fn dc_passes() {
        let w = Waveform::new(vec![0.5; 4000], 16000).unwrap();
        let y = sinc_lowpass(&w, 4000.0).unwrap();
        for &v in &y.samples[500..3500] {
            assert!((v - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn passband_and_stopband() {
        let x = tone(1000.0, 16000, 16000);
        let y = sinc_lowpass(&x, 4000.0).unwrap();
        assert!(db(level_at(&y, 1000.0), level_at(&x, 1000.0)).abs() < 0.1);

        let x = tone(6000.0, 16000, 16000);
        let y = sinc_lowpass(&x, 4000.0).unwrap();
        assert!(db(level_at(&y, 6000.0), level_at(&x, 6000.0)) < -60.0);
    }

    #[test]
    fn invalid_cutoff() {
        let x = tone(100.0, 16000, 100);
        assert!(sinc_lowpass(&x, 0.0).is_err());
        assert!(sinc_lowpass(&x, 8000.0).is_err());
    }

    #[test]
    fn interpolation_suppresses_images() {
        let x = tone(1000.0, 8000, 8000);
        let y = sinc_interpolate(&x, 2).unwrap();
        assert_eq!((y.len(), y.sample_rate), (16000, 16000));
        let main = level_at(&y, 1000.0);
        assert!(db(main, level_at(&x, 1000.0) * 2.0).abs() < 0.1);
        assert!(db(level_at(&y, 7000.0), main) < -60.0);
    }

    #[test]
    fn interpolation_trivial_cases() {
        let x = tone(300.0, 8000, 400);
        assert_eq!(sinc_interpolate(&x, 1).unwrap(), x);
        let z = sinc_interpolate(&Waveform::zeros(100, 8000), 3).unwrap();
        assert!(z.samples.iter().all(|&v| v == 0.0));
        assert_eq!(z.len(), 300);
        assert!(sinc_interpolate(&x, 0).is_err());
    }

    #[test]
    fn interpolate_then_lowpass_is_idempotent() {
        let x = tone(700.0, 8000, 8000);
        let y = sinc_interpolate(&x, 2).unwrap();
        let z = sinc_lowpass(&y, 4000.0).unwrap();
        let err = y.samples[2000..14000]
            .iter()
            .zip(&z.samples[2000..14000])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn decimate_keeps_every_nth() {
        let w = Waveform::new((0..10).map(|i| i as f64).collect(), 16000).unwrap();
        let d = decimate(&w, 2).unwrap();
        assert_eq!(d.samples, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        assert_eq!(d.sample_rate, 8000);
        assert!(decimate(&w, 3).is_err());
    }

    #[test]
    fn kaiser_beta_for_80_db() {
        assert!((kaiser_beta(80.0) - 7.857).abs() < 1e-3);
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        // I0(1) reference value
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
    }
}
