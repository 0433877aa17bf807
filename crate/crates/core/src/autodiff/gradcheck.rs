//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOpts {
    /// Central-difference step.
    pub h: f64,
    /// When set, only this many randomly chosen coordinates per input are probed.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOpts {
    fn default() -> Self {
        Self {
            h: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Gradients smaller than this fraction of `max(1, |f|)` are compared absolutely.
/// Central differences at h = 1e-6 carry roughly 1e-10·|f| of rounding noise, so
/// structurally zero gradients could not pass a purely relative test.
pub const GRAD_FLOOR_REL: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, floor)`
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::lenient();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.shape(), t.values().to_vec())).collect();
    let out = f(&mut tape, &vars);
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("gradcheck function returned {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar `f` against central differences
/// for every input tensor and returns the largest relative error.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: GradcheckOpts) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::lenient();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.shape(), t.values().to_vec())).collect();
    let out = f(&mut tape, &vars);
    let y = tape.scalar(out);
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("gradcheck function returned {y}")));
    }
    let grads = tape.backward(out);
    let floor = GRAD_FLOOR_REL * y.abs().max(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (idx, var) in vars.iter().enumerate() {
        let n = inputs[idx].len();
        let analytic = grads.get(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[idx].values()[c];
            work[idx].values_mut()[c] = orig + opts.h;
            let plus = eval(&f, &work)?;
            work[idx].values_mut()[c] = orig - opts.h;
            let minus = eval(&f, &work)?;
            work[idx].values_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let err = relative_error(analytic[c], numeric, floor);
            report.checked += 1;
            if report.checked == 1 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (idx, c);
            }
        }
    }
    Ok(report)
}
