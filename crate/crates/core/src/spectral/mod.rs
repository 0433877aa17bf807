//! Classical DSP: STFT/iSTFT, amplitude and phase extraction, phase
//! reparameterization, anti-wrapping, differentials and sinc filtering.

mod filter;
mod phase;
mod stft;

pub use filter::{decimate, kaiser_beta, lowpass_taps, sinc_interpolate, sinc_lowpass, STOPBAND_DB};
pub use phase::{
    anti_wrap, anti_wrap_grad, diff_freq, diff_time, phase_from_pseudo, pseudo_phase,
    pseudo_phase_grad, wrap_to_pi,
};
pub use stft::{istft, shared_kernel, stft, ComplexSpectrum, StftConfig, StftKernel, WindowKind, NORMALIZER_FLOOR};

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Amplitudes below this have phase defined as 0.
pub const PHASE_FLOOR: f64 = 1e-10;
/// Bins with `|im| <= REAL_AXIS_TOL * |re|` are treated as lying on the real axis.
pub const REAL_AXIS_TOL: f64 = 1e-12;
/// Floor applied to amplitudes before taking a logarithm.
pub const LOG_AMP_FLOOR: f64 = 1e-5;

/// Row-major frame × bin grid (T rows, F columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.check_same(other)?;
        Ok(Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "grid {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Swaps rows and columns.
    pub fn transposed(&self) -> Grid {
        Grid::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeSpectrum {
    pub values: Grid,
}

impl AmplitudeSpectrum {
    pub fn new(values: Grid) -> Result<Self> {
        if values.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "amplitudes must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { values })
    }

    /// Natural log with the amplitude floor.
    pub fn log(&self) -> Grid {
        self.values.map(|a| a.max(LOG_AMP_FLOOR).ln())
    }

    pub fn from_log(log_amp: &Grid) -> Self {
        Self {
            values: log_amp.map(f64::exp),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpectrum {
    pub values: Grid,
}

impl PhaseSpectrum {
    pub fn new(values: Grid) -> Result<Self> {
        let pi = std::f64::consts::PI;
        if values.data().iter().any(|v| !(*v > -pi && *v <= pi)) {
            return Err(Error::InvalidArgument("phase values must lie in (-pi, pi]".into()));
        }
        Ok(Self { values })
    }

    /// Wraps arbitrary radians into (-pi, pi].
    pub fn wrapped(values: &Grid) -> Self {
        Self {
            values: values.map(wrap_to_pi),
        }
    }
}

/// Four-quadrant angle in (-pi, pi], 0 at (numerically) zero magnitude.
pub fn angle(re: f64, im: f64) -> f64 {
    if re.hypot(im) < PHASE_FLOOR {
        0.0
    } else if im.abs() <= REAL_AXIS_TOL * re.abs() {
        // Rounding noise on a real-valued bin must not flip it between -π and π.
        if re < 0.0 {
            PI
        } else {
            0.0
        }
    } else {
        wrap_to_pi(im.atan2(re))
    }
}

pub fn amp_phase(s: &ComplexSpectrum) -> (AmplitudeSpectrum, PhaseSpectrum) {
    let amp = s.real.zip_map(&s.imag, f64::hypot).expect("validated shape");
    let pha = s.real.zip_map(&s.imag, angle).expect("validated shape");
    (AmplitudeSpectrum { values: amp }, PhaseSpectrum { values: pha })
}

pub fn polar_to_complex(
    a: &AmplitudeSpectrum,
    p: &PhaseSpectrum,
    config: StftConfig,
    source_length: usize,
) -> Result<ComplexSpectrum> {
    let re = a.values.zip_map(&p.values, |a, p| a * p.cos())?;
    let im = a.values.zip_map(&p.values, |a, p| a * p.sin())?;
    ComplexSpectrum::new(re, im, config, source_length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn spec1(re: f64, im: f64) -> ComplexSpectrum {
        let cfg = StftConfig::new(2, 2, 1, WindowKind::Hann, false).unwrap();
        ComplexSpectrum::new(Grid::filled(1, 2, re), Grid::filled(1, 2, im), cfg, 2).unwrap()
    }

    #[test]
    fn amp_phase_quadrants() {
        let (a, p) = amp_phase(&spec1(1.0, 0.0));
        assert_eq!((a.values.get(0, 0), p.values.get(0, 0)), (1.0, 0.0));
        let (a, p) = amp_phase(&spec1(0.0, -1.0));
        assert_eq!((a.values.get(0, 0), p.values.get(0, 0)), (1.0, -FRAC_PI_2));
        let (_, p) = amp_phase(&spec1(-1.0, 0.0));
        assert_eq!(p.values.get(0, 0), PI);
        let (_, p) = amp_phase(&spec1(-1.0, -0.0));
        assert_eq!(p.values.get(0, 0), PI);
        let (_, p) = amp_phase(&spec1(1e-12, 1e-12));
        assert_eq!(p.values.get(0, 0), 0.0);
    }

    #[test]
    fn polar_round_trip() {
        let cfg = StftConfig::new(8, 8, 4, WindowKind::Hann, false).unwrap();
        let a = AmplitudeSpectrum::new(Grid::filled(1, 5, 1.0)).unwrap();
        let p = PhaseSpectrum::new(Grid::filled(1, 5, FRAC_PI_2)).unwrap();
        let c = polar_to_complex(&a, &p, cfg, 8).unwrap();
        assert!(c.real.get(0, 0).abs() < 1e-15 && (c.imag.get(0, 0) - 1.0).abs() < 1e-15);

        let z = AmplitudeSpectrum::new(Grid::zeros(1, 5)).unwrap();
        let c = polar_to_complex(&z, &p, cfg, 8).unwrap();
        assert!(c.real.data().iter().chain(c.imag.data()).all(|&v| v == 0.0));

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let a = AmplitudeSpectrum::new(Grid::from_fn(7, 5, |_, _| rng.random_range(0.01..3.0))).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = PhaseSpectrum::new(Grid::from_fn(7, 5, |_, _| rng.random_range(-3.1..3.1))).unwrap();
        let (a2, p2) = amp_phase(&polar_to_complex(&a, &p, cfg, 8).unwrap());
        for (x, y) in a.values.data().iter().zip(a2.values.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in p.values.data().iter().zip(p2.values.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn invariants_rejected() {
        assert!(AmplitudeSpectrum::new(Grid::filled(1, 1, -1.0)).is_err());
        assert!(PhaseSpectrum::new(Grid::filled(1, 1, -PI)).is_err());
        assert!(Grid::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn log_amp_uses_floor() {
        let a = AmplitudeSpectrum::new(Grid::new(1, 2, vec![0.0, 1.0]).unwrap()).unwrap();
        let l = a.log();
        assert_eq!(l.get(0, 0), LOG_AMP_FLOOR.ln());
        assert_eq!(l.get(0, 1), 0.0);
    }
}
