//! Training objectives: amplitude, anti-wrapping phase, spectral consistency,
//! hinge adversarial and feature-matching losses plus their weighted totals.
//!
//! The tape functions are the implementation; the plain `f64` functions
//! evaluate the same graph on constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Family, SpectralOps};
use crate::spectral::{AmplitudeSpectrum, ComplexSpectrum, Grid, PhaseSpectrum};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub amplitude: f64,
    pub phase: f64,
    pub complex: f64,
    pub spectral: f64,
    pub mpd_adv: f64,
    pub mpd_fm: f64,
    pub mrad_adv: f64,
    pub mrad_fm: f64,
    pub mrpd_adv: f64,
    pub mrpd_fm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            amplitude: 45.0,
            phase: 100.0,
            complex: 45.0,
            spectral: 1.0,
            mpd_adv: 1.0,
            mpd_fm: 1.0,
            mrad_adv: 0.1,
            mrad_fm: 0.1,
            mrpd_adv: 0.1,
            mrpd_fm: 0.1,
        }
    }
}

impl LossWeights {
    /// (adversarial, feature-matching) weights of a family.
    pub fn family(&self, f: Family) -> (f64, f64) {
        match f {
            Family::Mpd => (self.mpd_adv, self.mpd_fm),
            Family::Mrad => (self.mrad_adv, self.mrad_fm),
            Family::Mrpd => (self.mrpd_adv, self.mrpd_fm),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.amplitude,
            self.phase,
            self.complex,
            self.spectral,
            self.mpd_adv,
            self.mpd_fm,
            self.mrad_adv,
            self.mrad_fm,
            self.mrpd_adv,
            self.mrpd_fm,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Every named term of one training step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_a: f64,
    pub l_ip: f64,
    pub l_gd: f64,
    pub l_iaf: f64,
    pub l_p: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub mpd_adv: f64,
    pub mpd_fm: f64,
    pub mrad_adv: f64,
    pub mrad_fm: f64,
    pub mrpd_adv: f64,
    pub mrpd_fm: f64,
    pub l_g: f64,
    pub l_d: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 15] {
        [
            ("l_a", self.l_a),
            ("l_ip", self.l_ip),
            ("l_gd", self.l_gd),
            ("l_iaf", self.l_iaf),
            ("l_p", self.l_p),
            ("l_c", self.l_c),
            ("l_s", self.l_s),
            ("mpd_adv", self.mpd_adv),
            ("mpd_fm", self.mpd_fm),
            ("mrad_adv", self.mrad_adv),
            ("mrad_fm", self.mrad_fm),
            ("mrpd_adv", self.mrpd_adv),
            ("mrpd_fm", self.mrpd_fm),
            ("l_g", self.l_g),
            ("l_d", self.l_d),
        ]
    }

    pub fn terms_mut(&mut self) -> [(&'static str, &mut f64); 15] {
        [
            ("l_a", &mut self.l_a),
            ("l_ip", &mut self.l_ip),
            ("l_gd", &mut self.l_gd),
            ("l_iaf", &mut self.l_iaf),
            ("l_p", &mut self.l_p),
            ("l_c", &mut self.l_c),
            ("l_s", &mut self.l_s),
            ("mpd_adv", &mut self.mpd_adv),
            ("mpd_fm", &mut self.mpd_fm),
            ("mrad_adv", &mut self.mrad_adv),
            ("mrad_fm", &mut self.mrad_fm),
            ("mrpd_adv", &mut self.mrpd_adv),
            ("mrpd_fm", &mut self.mrpd_fm),
            ("l_g", &mut self.l_g),
            ("l_d", &mut self.l_d),
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    pub fn add_family(&mut self, f: Family, adv: f64, fm: f64) {
        let (a, m) = match f {
            Family::Mpd => (&mut self.mpd_adv, &mut self.mpd_fm),
            Family::Mrad => (&mut self.mrad_adv, &mut self.mrad_fm),
            Family::Mrpd => (&mut self.mrpd_adv, &mut self.mrpd_fm),
        };
        *a += adv;
        *m += fm;
    }
}

/// Phase loss nodes.
#[derive(Debug, Clone, Copy)]
pub struct PhaseLossVars {
    pub ip: Var,
    pub gd: Var,
    pub iaf: Var,
    pub total: Var,
}

/// Mean squared difference of two `[T, F]` log-amplitude nodes.
pub fn amplitude_loss_var<R: Real>(tape: &mut Tape<R>, log_y: Var, log_yhat: Var) -> Var {
    tape.mse(log_y, log_yhat)
}

/// Anti-wrapping instantaneous-phase, group-delay and instantaneous-frequency
/// losses on `[T, F]` phase nodes.
pub fn phase_losses_var<R: Real>(tape: &mut Tape<R>, y: Var, yhat: Var) -> PhaseLossVars {
    let term = |tape: &mut Tape<R>, a: Var, b: Var| {
        let d = tape.sub(a, b);
        let w = tape.anti_wrap(d);
        tape.mean(w)
    };
    let ip = term(tape, y, yhat);
    let (gy, gh) = (tape.diff_axis(y, 1), tape.diff_axis(yhat, 1));
    let gd = term(tape, gy, gh);
    let (iy, ih) = (tape.diff_axis(y, 0), tape.diff_axis(yhat, 0));
    let iaf = term(tape, iy, ih);
    let total = tape.add_n(&[ip, gd, iaf]);
    PhaseLossVars { ip, gd, iaf, total }
}

/// `mse(Y, Ŷ) + mse(Ŷ, Ŷ')` on `[2, T, F]` nodes (mean over both planes).
pub fn complex_loss_var<R: Real>(tape: &mut Tape<R>, y: Var, yhat: Var, yhat2: Var) -> Var {
    let a = tape.mse(y, yhat);
    let b = tape.mse(yhat, yhat2);
    tape.add(a, b)
}

pub fn spectral_loss_var<R: Real>(tape: &mut Tape<R>, l_a: Var, l_p: Var, l_c: Var, w: &LossWeights) -> Var {
    let a = tape.scale(l_a, R::of(w.amplitude));
    let p = tape.scale(l_p, R::of(w.phase));
    let c = tape.scale(l_c, R::of(w.complex));
    tape.add_n(&[a, p, c])
}

/// `max(0, 1 + fake) + max(0, 1 - real)`.
pub fn hinge_d_var<R: Real>(tape: &mut Tape<R>, score_real: Var, score_fake: Var) -> Var {
    let f = tape.add_scalar(score_fake, R::one());
    let f = tape.relu(f);
    let r = tape.neg(score_real);
    let r = tape.add_scalar(r, R::one());
    let r = tape.relu(r);
    tape.add(f, r)
}

/// `max(0, 1 - fake)`.
pub fn hinge_g_var<R: Real>(tape: &mut Tape<R>, score_fake: Var) -> Var {
    let f = tape.neg(score_fake);
    let f = tape.add_scalar(f, R::one());
    tape.relu(f)
}

/// Sum over layers of the mean absolute difference.
pub fn feature_matching_var<R: Real>(tape: &mut Tape<R>, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!(
            "feature lists of length {} and {}",
            real.len(),
            fake.len()
        )));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (&r, &f) in real.iter().zip(fake) {
        if tape.shape(r) != tape.shape(f) {
            return Err(Error::Shape(format!(
                "feature shapes {:?} and {:?}",
                tape.shape(r),
                tape.shape(f)
            )));
        }
        terms.push(tape.mean_abs_diff(r, f));
    }
    Ok(tape.add_n(&terms))
}

/// Adversarial terms of one sub-discriminator as seen by the generator.
#[derive(Debug, Clone, Copy)]
pub struct AdversarialVars {
    pub family: Family,
    pub hinge_g: Var,
    pub feature_matching: Var,
}

/// `Σ_k [λ_adv·hinge_g + λ_FM·FM] + λ_S·L_S`.
pub fn generator_total_var<R: Real>(
    tape: &mut Tape<R>,
    adv: &[AdversarialVars],
    l_s: Var,
    w: &LossWeights,
) -> Var {
    let mut terms = vec![tape.scale(l_s, R::of(w.spectral))];
    for a in adv {
        let (wa, wf) = w.family(a.family);
        terms.push(tape.scale(a.hinge_g, R::of(wa)));
        terms.push(tape.scale(a.feature_matching, R::of(wf)));
    }
    tape.add_n(&terms)
}

pub fn discriminator_total_var<R: Real>(tape: &mut Tape<R>, hinge_d: &[Var]) -> Var {
    if hinge_d.is_empty() {
        tape.scalar_const(R::zero())
    } else {
        tape.add_n(hinge_d)
    }
}

fn grid_var(tape: &mut Tape<f64>, g: &Grid) -> Var {
    tape.constant(&[g.rows(), g.cols()], g.data().to_vec())
}

fn spectrum_var(tape: &mut Tape<f64>, s: &ComplexSpectrum) -> Var {
    tape.constant(&[2, s.frames(), s.bins()], s.to_planes())
}

/// Mean squared log ratio of two amplitude spectra (amplitudes floored first).
pub fn amplitude_loss(y: &AmplitudeSpectrum, yhat: &AmplitudeSpectrum) -> Result<f64> {
    y.values.check_same(&yhat.values)?;
    let mut t = Tape::lenient();
    let a = grid_var(&mut t, &y.log());
    let b = grid_var(&mut t, &yhat.log());
    let l = amplitude_loss_var(&mut t, a, b);
    Ok(t.scalar(l))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseLosses {
    pub ip: f64,
    pub gd: f64,
    pub iaf: f64,
    pub total: f64,
}

pub fn phase_losses(y: &PhaseSpectrum, yhat: &PhaseSpectrum) -> Result<PhaseLosses> {
    phase_losses_grid(&y.values, &yhat.values)
}

/// Phase losses on raw radian grids (no range requirement).
pub fn phase_losses_grid(y: &Grid, yhat: &Grid) -> Result<PhaseLosses> {
    y.check_same(yhat)?;
    let mut t = Tape::lenient();
    let a = grid_var(&mut t, y);
    let b = grid_var(&mut t, yhat);
    let v = phase_losses_var(&mut t, a, b);
    Ok(PhaseLosses {
        ip: t.scalar(v.ip),
        gd: t.scalar(v.gd),
        iaf: t.scalar(v.iaf),
        total: t.scalar(v.total),
    })
}

pub fn complex_loss(y: &ComplexSpectrum, yhat: &ComplexSpectrum, yhat2: &ComplexSpectrum) -> Result<f64> {
    y.real.check_same(&yhat.real)?;
    y.real.check_same(&yhat2.real)?;
    let mut t = Tape::lenient();
    let a = spectrum_var(&mut t, y);
    let b = spectrum_var(&mut t, yhat);
    let c = spectrum_var(&mut t, yhat2);
    let l = complex_loss_var(&mut t, a, b, c);
    Ok(t.scalar(l))
}

pub fn spectral_loss(l_a: f64, l_p: f64, l_c: f64, w: &LossWeights) -> f64 {
    let mut t = Tape::lenient();
    let (a, p, c) = (t.scalar_const(l_a), t.scalar_const(l_p), t.scalar_const(l_c));
    let l = spectral_loss_var(&mut t, a, p, c, w);
    t.scalar(l)
}

pub fn hinge_d(score_real: f64, score_fake: f64) -> f64 {
    let mut t = Tape::lenient();
    let (r, f) = (t.scalar_const(score_real), t.scalar_const(score_fake));
    let l = hinge_d_var(&mut t, r, f);
    t.scalar(l)
}

pub fn hinge_g(score_fake: f64) -> f64 {
    let mut t = Tape::lenient();
    let f = t.scalar_const(score_fake);
    let l = hinge_g_var(&mut t, f);
    t.scalar(l)
}

pub fn feature_matching(real: &[Tensor<f64>], fake: &[Tensor<f64>]) -> Result<f64> {
    let mut t = Tape::lenient();
    let r: Vec<Var> = real.iter().map(|x| t.tensor(x)).collect();
    let f: Vec<Var> = fake.iter().map(|x| t.tensor(x)).collect();
    let l = feature_matching_var(&mut t, &r, &f)?;
    Ok(t.scalar(l))
}

/// Plain adversarial terms of one sub-discriminator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialTerms {
    pub family: Family,
    pub hinge_g: f64,
    pub feature_matching: f64,
}

/// Generator total; `expected` is the number of enabled sub-discriminators.
pub fn generator_total(terms: &[AdversarialTerms], l_s: f64, w: &LossWeights, expected: usize) -> Result<f64> {
    if terms.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "expected {expected} sub-discriminator reports, got {}",
            terms.len()
        )));
    }
    let mut t = Tape::lenient();
    let ls = t.scalar_const(l_s);
    let adv: Vec<AdversarialVars> = terms
        .iter()
        .map(|a| AdversarialVars {
            family: a.family,
            hinge_g: t.scalar_const(a.hinge_g),
            feature_matching: t.scalar_const(a.feature_matching),
        })
        .collect();
    let l = generator_total_var(&mut t, &adv, ls, w);
    Ok(t.scalar(l))
}

/// Unweighted sum of hinge_d over (score_real, score_fake) pairs.
pub fn discriminator_total(scores: &[(f64, f64)], expected: usize) -> Result<f64> {
    if scores.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "expected {expected} sub-discriminator reports, got {}",
            scores.len()
        )));
    }
    let mut t = Tape::lenient();
    let hs: Vec<Var> = scores
        .iter()
        .map(|&(r, f)| {
            let (r, f) = (t.scalar_const(r), t.scalar_const(f));
            hinge_d_var(&mut t, r, f)
        })
        .collect();
    let l = discriminator_total_var(&mut t, &hs);
    Ok(t.scalar(l))
}
