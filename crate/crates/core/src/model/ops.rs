//! Differentiable spectral ops. Spectra are `[2, T, F]` nodes (real plane first),
//! waveforms are `[L]` nodes and amplitude/phase grids are `[T, F]`.

use std::sync::Arc;

use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::spectral::{pseudo_phase, pseudo_phase_grad, StftKernel, PHASE_FLOOR};

/// Squared magnitudes below this are treated as this value in angle gradients.
pub const ANGLE_GRAD_FLOOR: f64 = 1e-10;

pub trait SpectralOps<R: Real> {
    fn stft(&mut self, x: Var, kernel: &Arc<StftKernel<R>>) -> Result<Var>;
    fn istft(&mut self, spec: Var, kernel: &Arc<StftKernel<R>>, out_len: usize) -> Result<Var>;
    fn log_magnitude(&mut self, spec: Var, floor: R) -> Var;
    fn angle(&mut self, spec: Var) -> Var;
    fn pseudo_phase(&mut self, r: Var, i: Var) -> Var;
    fn polar(&mut self, amp: Var, phase: Var) -> Var;
    fn anti_wrap(&mut self, x: Var) -> Var;
    fn diff_axis(&mut self, x: Var, axis: usize) -> Var;
    fn reflect_pad_right(&mut self, x: Var, len: usize) -> Var;
}

fn split_planes<R: Real>(v: &[R]) -> (&[R], &[R]) {
    v.split_at(v.len() / 2)
}

impl<R: Real> SpectralOps<R> for Tape<R> {
    /// `[L] -> [2, T, F]`.
    fn stft(&mut self, x: Var, kernel: &Arc<StftKernel<R>>) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(Error::Shape(format!("stft expects [L], got {:?}", self.shape(x))));
        }
        let len = self.value(x).len();
        let (value, frames) = kernel.analyze(self.value(x))?;
        let k = Arc::clone(kernel);
        Ok(self.custom(
            &[x],
            vec![2, frames, kernel.config().n_bins()],
            value,
            Box::new(move |ctx| vec![Some(k.analyze_adjoint(ctx.grad, len))]),
        ))
    }

    /// `[2, T, F] -> [out_len]`.
    fn istft(&mut self, spec: Var, kernel: &Arc<StftKernel<R>>, out_len: usize) -> Result<Var> {
        let shape = self.shape(spec).to_vec();
        if shape.len() != 3 || shape[0] != 2 || shape[2] != kernel.config().n_bins() {
            return Err(Error::Shape(format!("istft expects [2, T, F], got {shape:?}")));
        }
        let frames = shape[1];
        let value = kernel.synthesize(self.value(spec), frames, out_len)?;
        let k = Arc::clone(kernel);
        Ok(self.custom(
            &[spec],
            vec![out_len],
            value,
            Box::new(move |ctx| {
                let g = k
                    .synthesize_adjoint(ctx.grad, frames, out_len)
                    .expect("normalizer validated in forward");
                vec![Some(g)]
            }),
        ))
    }

    /// `ln(max(|z|, floor))` for a `[2, T, F]` spectrum, giving `[T, F]`.
    fn log_magnitude(&mut self, spec: Var, floor: R) -> Var {
        let shape = self.shape(spec).to_vec();
        assert!(shape.len() == 3 && shape[0] == 2, "log_magnitude expects [2, T, F]");
        let (re, im) = split_planes(self.value(spec));
        let value: Vec<R> = re
            .iter()
            .zip(im)
            .map(|(&a, &b)| (a * a + b * b).sqrt().max(floor).ln())
            .collect();
        self.custom(
            &[spec],
            shape[1..].to_vec(),
            value,
            Box::new(move |ctx| {
                let (re, im) = split_planes(ctx.inputs[0]);
                let n = re.len();
                let mut g = vec![R::zero(); 2 * n];
                for j in 0..n {
                    let m2 = re[j] * re[j] + im[j] * im[j];
                    if m2.sqrt() > floor {
                        g[j] = ctx.grad[j] * re[j] / m2;
                        g[n + j] = ctx.grad[j] * im[j] / m2;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Wrapped phase of a `[2, T, F]` spectrum; 0 where the magnitude is below
    /// the phase floor. The gradient denominator is floored at [`ANGLE_GRAD_FLOOR`].
    fn angle(&mut self, spec: Var) -> Var {
        let shape = self.shape(spec).to_vec();
        assert!(shape.len() == 3 && shape[0] == 2, "angle expects [2, T, F]");
        let (re, im) = split_planes(self.value(spec));
        let value: Vec<R> = re
            .iter()
            .zip(im)
            .map(|(&a, &b)| R::of(crate::spectral::angle(a.f64(), b.f64())))
            .collect();
        self.custom(
            &[spec],
            shape[1..].to_vec(),
            value,
            Box::new(move |ctx| {
                let (re, im) = split_planes(ctx.inputs[0]);
                let n = re.len();
                let mut g = vec![R::zero(); 2 * n];
                for j in 0..n {
                    let (a, b) = (re[j].f64(), im[j].f64());
                    let m2 = a * a + b * b;
                    if m2.sqrt() >= PHASE_FLOOR {
                        let d = m2.max(ANGLE_GRAD_FLOOR);
                        g[j] = ctx.grad[j] * R::of(-b / d);
                        g[n + j] = ctx.grad[j] * R::of(a / d);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Element-wise phase from pseudo-real and pseudo-imaginary components.
    fn pseudo_phase(&mut self, r: Var, i: Var) -> Var {
        assert_eq!(self.shape(r), self.shape(i), "pseudo_phase: shape mismatch");
        let shape = self.shape(r).to_vec();
        let value: Vec<R> = self
            .value(r)
            .iter()
            .zip(self.value(i))
            .map(|(&a, &b)| R::of(pseudo_phase(a.f64(), b.f64())))
            .collect();
        self.custom(
            &[r, i],
            shape,
            value,
            Box::new(|ctx| {
                let (mut gr, mut gi) = (Vec::new(), Vec::new());
                for ((&a, &b), &g) in ctx.inputs[0].iter().zip(ctx.inputs[1]).zip(ctx.grad) {
                    let (dr, di) = pseudo_phase_grad(a.f64(), b.f64());
                    gr.push(g * R::of(dr));
                    gi.push(g * R::of(di));
                }
                vec![ctx.needs[0].then_some(gr), ctx.needs[1].then_some(gi)]
            }),
        )
    }

    /// `[T, F]` amplitude and phase to a `[2, T, F]` spectrum.
    fn polar(&mut self, amp: Var, phase: Var) -> Var {
        let c = self.cos(phase);
        let s = self.sin(phase);
        let re = self.mul(amp, c);
        let im = self.mul(amp, s);
        self.stack(&[re, im])
    }

    fn anti_wrap(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| R::of(crate::spectral::anti_wrap(v.f64())),
            |v, _| R::of(crate::spectral::anti_wrap_grad(v.f64())),
        )
    }

    /// First difference along `axis` (0 or 1) of a rank-2 node, zero at index 0.
    fn diff_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() == 2 && axis < 2, "diff_axis expects rank 2");
        let (rows, cols) = (shape[0], shape[1]);
        let stride = if axis == 0 { cols } else { 1 };
        let first = move |idx: usize| if axis == 0 { idx / cols == 0 } else { idx % cols == 0 };
        let v = self.value(x);
        let value: Vec<R> = (0..rows * cols)
            .map(|j| if first(j) { R::zero() } else { v[j] - v[j - stride] })
            .collect();
        self.custom(
            &[x],
            shape,
            value,
            Box::new(move |ctx| {
                let mut g = vec![R::zero(); rows * cols];
                for j in 0..rows * cols {
                    if !first(j) {
                        g[j] = g[j] + ctx.grad[j];
                        g[j - stride] = g[j - stride] - ctx.grad[j];
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Extends a `[L]` node to `len` samples by reflecting about the last sample.
    fn reflect_pad_right(&mut self, x: Var, len: usize) -> Var {
        let n = self.value(x).len();
        assert!(len >= n, "reflect_pad_right: target shorter than input");
        assert!(len - n < n, "reflect_pad_right: padding must be shorter than input");
        let src = move |j: usize| if j < n { j } else { 2 * (n - 1) - j };
        let v = self.value(x);
        let value: Vec<R> = (0..len).map(|j| v[src(j)]).collect();
        self.custom(
            &[x],
            vec![len],
            value,
            Box::new(move |ctx| {
                let mut g = vec![R::zero(); n];
                for (j, &gj) in ctx.grad.iter().enumerate() {
                    g[src(j)] = g[src(j)] + gj;
                }
                vec![Some(g)]
            }),
        )
    }
}

/// Folds a `[L]` waveform node into `[1, ceil(L / p), p]`, reflect-padding on the right.
pub fn period_reshape<R: Real>(tape: &mut Tape<R>, x: Var, p: usize) -> Var {
    assert!(p >= 1, "period must be >= 1");
    let n = tape.value(x).len();
    let rows = n.div_ceil(p);
    let padded = if rows * p > n {
        tape.reflect_pad_right(x, rows * p)
    } else {
        x
    };
    tape.reshape(padded, &[1, rows, p])
}
