//! Finite-difference verification of every differentiable building block, each
//! on three random toy configurations.
//!
//! Inputs are resampled until no anti-wrapping residual, hinge margin, L1
//! difference, leaky-ReLU input or phase-discriminator angle lies within
//! [`KINK_MARGIN`] of a kink or of the ±π wrap.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{gradcheck, Conv1dOpts, Conv2dOpts, GradcheckOpts, Tape, Tensor, Var};
use crate::error::Result;
use crate::losses::{
    amplitude_loss_var, complex_loss_var, discriminator_total_var, feature_matching_var, generator_total_var,
    hinge_d_var, hinge_g_var, phase_losses_var, spectral_loss_var, AdversarialVars, LossWeights,
};
use crate::model::{
    DiscriminatorConfig, Discriminators, Family, Generator, GeneratorConfig, MpdConfig, MrdConfig, Resolution,
    SpectralOps,
};
use crate::spectral::{StftConfig, WindowKind};

pub const TOLERANCE: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-4;
/// Coordinates probed per tensor for the model-sized checks.
const MODEL_COORDS: usize = 24;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub op: &'static str,
    pub case: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

type Case = (String, Vec<Tensor<f64>>);

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape and data agree")
}

/// Distance from `x` to the nearest multiple of π.
fn kink_distance(x: f64) -> f64 {
    let r = x.rem_euclid(PI);
    r.min(PI - r)
}

fn diffs(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for t in 0..rows {
        for f in 0..cols {
            if f > 0 {
                out.push(x[t * cols + f] - x[t * cols + f - 1]);
            }
            if t > 0 {
                out.push(x[t * cols + f] - x[(t - 1) * cols + f]);
            }
        }
    }
    out
}

struct Suite {
    rng: ChaCha8Rng,
    opts: GradcheckOpts,
    results: Vec<CheckResult>,
}

impl Suite {
    fn check<F>(&mut self, op: &'static str, cases: Vec<Case>, coords: Option<usize>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        for (case, inputs) in cases {
            let opts = GradcheckOpts {
                max_coords: coords,
                seed: self.rng.random(),
                ..self.opts
            };
            let r = gradcheck(&f, &inputs, opts)?;
            self.results.push(CheckResult {
                op,
                case,
                max_rel_error: r.max_rel_error,
                checked: r.checked,
                passed: r.max_rel_error <= TOLERANCE,
            });
        }
        Ok(())
    }

    /// Uniform tensor whose every entry is at least `KINK_MARGIN` from zero.
    fn away_from_zero(&mut self, shape: &[usize], scale: f64) -> Tensor<f64> {
        loop {
            let t = rand_tensor(&mut self.rng, shape, scale);
            if t.values().iter().all(|v| v.abs() > KINK_MARGIN) {
                return t;
            }
        }
    }

    /// A phase pair `(y, y + δ)` whose residuals and their differentials avoid the
    /// anti-wrapping kinks.
    fn phase_pair(&mut self, rows: usize, cols: usize) -> (Tensor<f64>, Tensor<f64>) {
        loop {
            let y = rand_tensor(&mut self.rng, &[rows, cols], PI);
            let d = rand_tensor(&mut self.rng, &[rows, cols], 3.0 * PI);
            let yhat: Vec<f64> = y.values().iter().zip(d.values()).map(|(a, b)| a + b).collect();
            let res: Vec<f64> = y.values().iter().zip(&yhat).map(|(a, b)| a - b).collect();
            let ok = res.iter().chain(&diffs(&res, rows, cols)).all(|&r| kink_distance(r) > KINK_MARGIN);
            if ok {
                return (y, Tensor::new(vec![rows, cols], yhat).expect("shape"));
            }
        }
    }

    /// A scalar score at least `KINK_MARGIN` from the hinge points ±1.
    fn score(&mut self) -> Tensor<f64> {
        loop {
            let s: f64 = self.rng.random_range(-2.5..2.5);
            if (s.abs() - 1.0).abs() > KINK_MARGIN {
                return Tensor::new(vec![1], vec![s]).expect("scalar");
            }
        }
    }

    /// Two feature lists whose element-wise differences avoid zero.
    fn feature_lists(&mut self, shapes: &[Vec<usize>]) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
        let real: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut self.rng, s, 1.0)).collect();
        let fake = real
            .iter()
            .map(|r| {
                let d = self.away_from_zero(r.shape(), 1.0);
                Tensor::new(r.shape().to_vec(), r.values().iter().zip(d.values()).map(|(a, b)| a + b).collect())
                    .expect("shape")
            })
            .collect();
        (real, fake)
    }
}

fn shape_name(s: &[usize]) -> String {
    format!("{s:?}")
}

/// Generator toy configurations: (F, C, N, A→P, P→A).
fn generator_configs() -> Vec<GeneratorConfig> {
    let stft = |n: usize, w: usize, h: usize| StftConfig::new(n, w, h, WindowKind::Hann, true).expect("valid toy stft");
    vec![
        GeneratorConfig {
            n_blocks: 2,
            hidden_channels: 4,
            stft: stft(16, 12, 4),
            ..GeneratorConfig::default()
        },
        GeneratorConfig {
            n_blocks: 1,
            hidden_channels: 3,
            stft: stft(8, 8, 2),
            amp_to_phase: false,
            ..GeneratorConfig::default()
        },
        GeneratorConfig {
            n_blocks: 3,
            hidden_channels: 3,
            stft: stft(16, 16, 4),
            phase_to_amp: false,
            kernel_size_dw: 3,
            input_kernel: 3,
            ..GeneratorConfig::default()
        },
    ]
}

fn discriminator_configs() -> Vec<DiscriminatorConfig> {
    let mrd = |res: Vec<Resolution>, channels: Vec<usize>, strides: Vec<(usize, usize)>| MrdConfig {
        resolutions: res,
        kernels: vec![(3, 3); channels.len()],
        channels,
        strides,
        ..MrdConfig::default()
    };
    vec![
        DiscriminatorConfig {
            mpd: MpdConfig {
                periods: vec![2, 3],
                channels: vec![2, 3],
                ..MpdConfig::default()
            },
            mrd: mrd(vec![Resolution { n_fft: 16, hop: 4, win: 16 }], vec![2, 2], vec![(2, 2), (1, 2)]),
            ..DiscriminatorConfig::default()
        },
        DiscriminatorConfig {
            mpd: MpdConfig {
                periods: vec![5],
                channels: vec![3],
                ..MpdConfig::default()
            },
            mrd: mrd(vec![Resolution { n_fft: 8, hop: 2, win: 8 }], vec![3], vec![(1, 1)]),
            ..DiscriminatorConfig::default()
        },
        DiscriminatorConfig {
            mpd: MpdConfig {
                periods: vec![7, 11],
                channels: vec![2, 2, 2],
                ..MpdConfig::default()
            },
            mrd: mrd(
                vec![Resolution { n_fft: 16, hop: 8, win: 12 }, Resolution { n_fft: 32, hop: 8, win: 32 }],
                vec![2, 2],
                vec![(1, 2), (2, 1)],
            ),
            ..DiscriminatorConfig::default()
        },
    ]
}

/// Runs every check; `seed` selects the random toy inputs.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        opts: GradcheckOpts::default(),
        results: Vec::new(),
    };

    // conv1d: (c_in, c_out, k, L, opts)
    let conv1d_cases = [
        (2, 3, 3, 10, Conv1dOpts::same(3)),
        (4, 4, 5, 12, Conv1dOpts { stride: 1, padding: 4, dilation: 2, groups: 2 }),
        (1, 2, 1, 7, Conv1dOpts { stride: 2, padding: 0, dilation: 1, groups: 1 }),
    ];
    for (ci, co, k, l, o) in conv1d_cases {
        let g = o.groups;
        let inputs = vec![
            rand_tensor(&mut s.rng, &[ci, l], 1.0),
            rand_tensor(&mut s.rng, &[co, ci / g, k], 1.0),
            rand_tensor(&mut s.rng, &[co], 1.0),
        ];
        s.check("conv1d", vec![(format!("{ci}->{co} k{k} L{l} {o:?}"), inputs)], None, move |t, v| {
            let y = t.conv1d(v[0], v[1], Some(v[2]), o);
            let y = t.square(y);
            t.sum(y)
        })?;
    }

    // conv2d: (c_in, c_out, kernel, (H, W), opts)
    let conv2d_cases = [
        (1, 2, (3, 3), (6, 5), Conv2dOpts { stride: (1, 1), padding: (1, 1) }),
        (2, 3, (5, 1), (9, 3), Conv2dOpts { stride: (3, 1), padding: (2, 0) }),
        (3, 2, (3, 9), (7, 11), Conv2dOpts { stride: (1, 2), padding: (1, 4) }),
    ];
    for (ci, co, k, (h, w), o) in conv2d_cases {
        let inputs = vec![
            rand_tensor(&mut s.rng, &[ci, h, w], 1.0),
            rand_tensor(&mut s.rng, &[co, ci, k.0, k.1], 1.0),
            rand_tensor(&mut s.rng, &[co], 1.0),
        ];
        s.check("conv2d", vec![(format!("{ci}->{co} k{k:?} {h}x{w} {o:?}"), inputs)], None, move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), o);
            let y = t.square(y);
            t.sum(y)
        })?;
    }

    let mut cases = Vec::new();
    for (c, l) in [(3, 5), (8, 2), (2, 7)] {
        let inputs = vec![
            rand_tensor(&mut s.rng, &[c, l], 2.0),
            rand_tensor(&mut s.rng, &[c], 1.5),
            rand_tensor(&mut s.rng, &[c], 1.0),
        ];
        cases.push((shape_name(&[c, l]), inputs));
    }
    let coeff: Vec<f64> = (0..64).map(|i| ((i * 13) as f64 * 0.71).sin()).collect();
    s.check("layer_norm", cases, None, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-6);
        let n: usize = t.shape(y).iter().product();
        let c = t.constant(t.shape(y).to_vec().as_slice(), coeff[..n].to_vec());
        let y = t.mul(y, c);
        t.sum(y)
    })?;

    let elementwise_shapes = [vec![5], vec![3, 4], vec![2, 3, 4]];
    let cases = elementwise_shapes
        .iter()
        .map(|sh| (shape_name(sh), vec![rand_tensor(&mut s.rng, sh, 3.0)]))
        .collect();
    s.check("gelu", cases, None, |t, v| {
        let y = t.gelu(v[0]);
        let y = t.square(y);
        t.sum(y)
    })?;
    let cases = elementwise_shapes
        .iter()
        .map(|sh| (shape_name(sh), vec![s.away_from_zero(sh, 3.0)]))
        .collect();
    s.check("leaky_relu", cases, None, |t, v| {
        let y = t.leaky_relu(v[0], 0.1);
        let y = t.square(y);
        t.sum(y)
    })?;

    // ConvNeXt block and generator forward share the toy configurations.
    for cfg in generator_configs() {
        let g = Generator::<f64>::new(cfg.clone(), s.rng.random())?;
        let n = g.params.len();
        let (f, c) = (cfg.n_bins(), cfg.hidden_channels);
        let frames = 6;
        let params: Vec<Tensor<f64>> = g
            .params
            .tensors_f64()
            .iter()
            .map(|p| rand_tensor(&mut s.rng, p.shape(), 0.5))
            .collect();
        let case = format!("F{f} C{c} N{} T{frames} a2p={} p2a={}", cfg.n_blocks, cfg.amp_to_phase, cfg.phase_to_amp);

        let mut block_in = params.clone();
        block_in.push(rand_tensor(&mut s.rng, &[c, frames], 1.0));
        let gb = &g;
        s.check("convnext_block", vec![(case.clone(), block_in)], Some(MODEL_COORDS), move |t, v| {
            let y = gb.convnext_block(t, &v[..n], true, 0, v[n]);
            let y = t.square(y);
            t.sum(y)
        })?;

        let mut fwd_in = params;
        fwd_in.push(rand_tensor(&mut s.rng, &[f, frames], 2.0));
        fwd_in.push(rand_tensor(&mut s.rng, &[f, frames], PI));
        s.check("generator_forward", vec![(case, fwd_in)], Some(MODEL_COORDS), move |t, v| {
            let out = gb.forward(t, &v[..n], v[n], v[n + 1]).expect("toy shapes agree");
            let la = t.sum(out.log_amp);
            let (cs, sn) = (t.cos(out.phase), t.sin(out.phase));
            let (cs, sn) = (t.sum(cs), t.sum(sn));
            t.add_n(&[la, cs, sn])
        })?;
    }

    let tf_shapes = [(4, 5), (7, 3), (2, 9)];
    let cases = tf_shapes
        .iter()
        .map(|&(r, c)| {
            let a = rand_tensor(&mut s.rng, &[r, c], 3.0);
            let b = rand_tensor(&mut s.rng, &[r, c], 3.0);
            (shape_name(&[r, c]), vec![a, b])
        })
        .collect();
    s.check("amplitude_loss", cases, None, |t, v| amplitude_loss_var(t, v[0], v[1]))?;

    let mut cases = Vec::new();
    for &(r, c) in &tf_shapes {
        let (y, yhat) = s.phase_pair(r, c);
        cases.push((shape_name(&[r, c]), vec![y, yhat]));
    }
    for (name, pick) in [("phase_loss_ip", 0), ("phase_loss_gd", 1), ("phase_loss_iaf", 2)] {
        s.check(name, cases.clone(), None, move |t, v| {
            let p = phase_losses_var(t, v[0], v[1]);
            [p.ip, p.gd, p.iaf][pick]
        })?;
    }

    let cases = tf_shapes
        .iter()
        .map(|&(r, c)| {
            let sh = [2, r, c];
            let inputs = (0..3).map(|_| rand_tensor(&mut s.rng, &sh, 2.0)).collect();
            (shape_name(&sh), inputs)
        })
        .collect();
    s.check("complex_loss", cases, None, |t, v| complex_loss_var(t, v[0], v[1], v[2]))?;

    let w = LossWeights::default();
    let mut cases = Vec::new();
    for &(r, c) in &tf_shapes {
        let (y, yhat) = s.phase_pair(r, c);
        let mut inputs = vec![rand_tensor(&mut s.rng, &[r, c], 3.0), rand_tensor(&mut s.rng, &[r, c], 3.0), y, yhat];
        inputs.extend((0..3).map(|_| rand_tensor(&mut s.rng, &[2, r, c], 2.0)));
        cases.push((shape_name(&[r, c]), inputs));
    }
    s.check("spectral_loss", cases, None, move |t, v| {
        let l_a = amplitude_loss_var(t, v[0], v[1]);
        let p = phase_losses_var(t, v[2], v[3]);
        let l_c = complex_loss_var(t, v[4], v[5], v[6]);
        spectral_loss_var(t, l_a, p.total, l_c, &w)
    })?;

    let cases = (0..3).map(|i| (format!("scores #{i}"), vec![s.score(), s.score()])).collect();
    s.check("hinge_d", cases, None, |t, v| hinge_d_var(t, v[0], v[1]))?;
    let cases = (0..3).map(|i| (format!("score #{i}"), vec![s.score()])).collect();
    s.check("hinge_g", cases, None, |t, v| hinge_g_var(t, v[0]))?;

    let fm_shapes: [Vec<Vec<usize>>; 3] = [
        vec![vec![2, 5], vec![3]],
        vec![vec![1, 4, 3], vec![2, 2, 2], vec![1, 2, 1]],
        vec![vec![6]],
    ];
    for shapes in fm_shapes {
        let (real, fake) = s.feature_lists(&shapes);
        let k = real.len();
        let inputs: Vec<Tensor<f64>> = real.into_iter().chain(fake).collect();
        s.check("feature_matching", vec![(format!("{shapes:?}"), inputs)], None, move |t, v| {
            feature_matching_var(t, &v[..k], &v[k..]).expect("matching shapes")
        })?;
    }

    // Weighted totals over 1, 3 and 11 sub-discriminators.
    for k in [1usize, 3, 11] {
        let families: Vec<Family> = (0..k)
            .map(|i| match i % 3 {
                0 => Family::Mpd,
                1 => Family::Mrad,
                _ => Family::Mrpd,
            })
            .collect();
        let mut inputs = vec![rand_tensor(&mut s.rng, &[1], 2.0)];
        for _ in 0..k {
            inputs.push(s.score());
            let (r, f) = s.feature_lists(&[vec![3]]);
            inputs.extend(r);
            inputs.extend(f);
        }
        let fams = families.clone();
        s.check("generator_total", vec![(format!("{k} sub-discriminators"), inputs)], None, move |t, v| {
            let adv: Vec<AdversarialVars> = fams
                .iter()
                .enumerate()
                .map(|(i, &family)| {
                    let b = 1 + 3 * i;
                    AdversarialVars {
                        family,
                        hinge_g: hinge_g_var(t, v[b]),
                        feature_matching: feature_matching_var(t, &v[b + 1..b + 2], &v[b + 2..b + 3])
                            .expect("matching shapes"),
                    }
                })
                .collect();
            generator_total_var(t, &adv, v[0], &w)
        })?;

        let inputs = (0..2 * k).map(|_| s.score()).collect();
        s.check("discriminator_total", vec![(format!("{k} sub-discriminators"), inputs)], None, move |t, v| {
            let h: Vec<Var> = (0..k).map(|i| hinge_d_var(t, v[2 * i], v[2 * i + 1])).collect();
            discriminator_total_var(t, &h)
        })?;
    }

    for (cfg, len) in discriminator_configs().into_iter().zip([64usize, 40, 72]) {
        let d = Discriminators::<f64>::new(cfg, s.rng.random())?;
        let n = d.params.len();
        let mut inputs: Vec<Tensor<f64>> = d
            .params
            .tensors_f64()
            .iter()
            .map(|p| rand_tensor(&mut s.rng, p.shape(), 0.5))
            .collect();
        // Keep every phase-plane entry away from the ±π wrap of the angle.
        let wave = loop {
            let w = rand_tensor(&mut s.rng, &[len], 1.0);
            let mut tape = Tape::<f64>::lenient();
            let x = tape.constant(&[len], w.values().to_vec());
            let mut ok = true;
            for k in (0..d.len()).filter(|&k| d.family(k) == Family::Mrpd) {
                let plane = d.front_end(&mut tape, k, x)?;
                // Bins on the real axis sit exactly at 0 or π and stay there.
                ok &= tape.value(plane).iter().all(|&p| p == PI || PI - p.abs() > KINK_MARGIN);
            }
            if ok {
                break w;
            }
        };
        inputs.push(wave);
        let dr = &d;
        for k in 0..d.len() {
            let op = match d.family(k) {
                Family::Mpd => "mpd_forward",
                Family::Mrad => "mrad_forward",
                Family::Mrpd => "mrpd_forward",
            };
            s.check(op, vec![(format!("{} L{len}", d.name(k)), inputs.clone())], Some(MODEL_COORDS), move |t, v| {
                let out = dr.forward_one(t, &v[..n], k, v[n]).expect("toy input long enough");
                let mut terms = vec![out.score];
                for f in out.features {
                    let sq = t.square(f);
                    terms.push(t.sum(sq));
                }
                t.add_n(&terms)
            })?;
        }
    }

    // End to end: spectral loss through synthesis from an interpolated waveform.
    let cfg = generator_configs().remove(0);
    let g = Generator::<f64>::new(cfg.clone(), s.rng.random())?;
    let n = g.params.len();
    for len in [48usize, 64, 80] {
        let mut inputs: Vec<Tensor<f64>> = g
            .params
            .tensors_f64()
            .iter()
            .map(|p| rand_tensor(&mut s.rng, p.shape(), 0.3))
            .collect();
        let up: Vec<f64> = (0..len).map(|_| s.rng.random_range(-0.5..0.5)).collect();
        inputs.push(rand_tensor(&mut s.rng, &[len], 0.5));
        let gr = &g;
        let kernel = crate::spectral::shared_kernel::<f64>(cfg.stft);
        s.check("synthesis_spectral_loss", vec![(format!("L{len}"), inputs)], Some(MODEL_COORDS), move |t, v| {
            let syn = gr.synthesize(t, &v[..n], &up).expect("toy length");
            let y_spec = t.stft(v[n], &kernel).expect("toy length");
            let y_log = t.log_magnitude(y_spec, 1e-5);
            let l_a = amplitude_loss_var(t, y_log, syn.log_amp);
            let re = t.stft(syn.waveform, &kernel).expect("toy length");
            let l_c = complex_loss_var(t, y_spec, syn.spectrum, re);
            t.add(l_a, l_c)
        })?;
    }

    Ok(s.results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kink_distance_measures_to_multiples_of_pi() {
        assert!(kink_distance(0.0) < 1e-15);
        assert!((kink_distance(PI / 2.0) - PI / 2.0).abs() < 1e-15);
        assert!(kink_distance(-3.0 * PI + 1e-3) < 1.1e-3);
    }
}
