//! Dual-stream generator: amplitude and phase streams of ConvNeXt blocks. After
//! every block each stream also adds the other stream's residual branch output.
//!
//! Parameter names follow `{amp|pha}.{layer}` and `{amp|pha}.block.{k}.{layer}.{weight|bias|gain}`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::SpectralOps;
use super::store::ParamStore;
use crate::audio::Waveform;
use crate::autodiff::{Conv1dOpts, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::spectral::{shared_kernel, sinc_interpolate, stft, StftConfig, LOG_AMP_FLOOR};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_blocks: usize,
    pub hidden_channels: usize,
    pub stft: StftConfig,
    /// Output sample rate; the interpolation factor is `target_sr / source_sr`.
    pub target_sr: u32,
    pub kernel_size_dw: usize,
    pub expansion_factor: usize,
    pub input_kernel: usize,
    /// Amplitude-stream residual branches are also added to the phase stream.
    pub amp_to_phase: bool,
    /// Phase-stream residual branches are also added to the amplitude stream.
    pub phase_to_amp: bool,
    /// Replace the output band below the source Nyquist with the interpolated input.
    pub replace_low_band: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_blocks: 8,
            hidden_channels: 512,
            stft: StftConfig::model(),
            target_sr: 16000,
            kernel_size_dw: 7,
            expansion_factor: 3,
            input_kernel: 7,
            amp_to_phase: true,
            phase_to_amp: true,
            replace_low_band: false,
        }
    }
}

impl GeneratorConfig {
    /// Hidden width 32, otherwise the full configuration.
    pub fn desk() -> Self {
        Self {
            hidden_channels: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 1 || self.hidden_channels < 1 || self.expansion_factor < 1 {
            return Err(Error::Config(
                "n_blocks, hidden_channels and expansion_factor must be >= 1".into(),
            ));
        }
        if self.kernel_size_dw % 2 == 0 || self.input_kernel % 2 == 0 {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if self.target_sr == 0 {
            return Err(Error::Config("target_sr must be positive".into()));
        }
        self.stft.validate()
    }

    pub fn n_bins(&self) -> usize {
        self.stft.n_bins()
    }

    pub fn interp_factor(&self, source_sr: u32) -> Result<usize> {
        if source_sr == 0 || source_sr > self.target_sr || self.target_sr % source_sr != 0 {
            return Err(Error::SampleRate {
                expected: self.target_sr,
                found: source_sr,
                path: None,
            });
        }
        Ok((self.target_sr / source_sr) as usize)
    }
}

struct BlockIdx {
    dw_w: usize,
    dw_b: usize,
    norm_g: usize,
    norm_b: usize,
    pw1_w: usize,
    pw1_b: usize,
    pw2_w: usize,
    pw2_b: usize,
}

struct StreamIdx {
    in_w: usize,
    in_b: usize,
    blocks: Vec<BlockIdx>,
}

/// Outputs of [`Generator::forward`], all `[F, T]`.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorOutput {
    pub log_amp: Var,
    pub phase: Var,
}

/// Spectral and waveform outputs of the full differentiable pipeline.
#[derive(Debug, Clone, Copy)]
pub struct Synthesis {
    /// `[T, F]`
    pub log_amp: Var,
    /// `[T, F]`
    pub phase: Var,
    /// `[2, T, F]`
    pub spectrum: Var,
    /// `[L]`
    pub waveform: Var,
}

pub struct Generator<R: Real> {
    pub config: GeneratorConfig,
    pub params: ParamStore<R>,
    amp: StreamIdx,
    pha: StreamIdx,
    amp_out_w: usize,
    amp_out_b: usize,
    pha_r_w: usize,
    pha_r_b: usize,
    pha_i_w: usize,
    pha_i_b: usize,
}

impl<R: Real> Clone for Generator<R> {
    fn clone(&self) -> Self {
        let mut g = Self::new(self.config.clone(), 0).expect("config already validated");
        g.params = self.params.clone();
        g
    }
}

fn add_stream<R: Real>(
    store: &mut ParamStore<R>,
    prefix: &str,
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StreamIdx> {
    let (f, c, e) = (cfg.n_bins(), cfg.hidden_channels, cfg.expansion_factor);
    let in_w = store.add_weight(&format!("{prefix}.input.weight"), &[c, f, cfg.input_kernel], rng)?;
    let in_b = store.add_zeros(&format!("{prefix}.input.bias"), &[c])?;
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for k in 0..cfg.n_blocks {
        let p = format!("{prefix}.block.{k}");
        blocks.push(BlockIdx {
            dw_w: store.add_weight(&format!("{p}.dwconv.weight"), &[c, 1, cfg.kernel_size_dw], rng)?,
            dw_b: store.add_zeros(&format!("{p}.dwconv.bias"), &[c])?,
            norm_g: store.add_ones(&format!("{p}.norm.gain"), &[c])?,
            norm_b: store.add_zeros(&format!("{p}.norm.bias"), &[c])?,
            pw1_w: store.add_weight(&format!("{p}.pwconv1.weight"), &[e * c, c, 1], rng)?,
            pw1_b: store.add_zeros(&format!("{p}.pwconv1.bias"), &[e * c])?,
            pw2_w: store.add_weight(&format!("{p}.pwconv2.weight"), &[c, e * c, 1], rng)?,
            pw2_b: store.add_zeros(&format!("{p}.pwconv2.bias"), &[c])?,
        });
    }
    Ok(StreamIdx { in_w, in_b, blocks })
}

impl<R: Real> Generator<R> {
    /// Freshly initialized generator: normal(0, 0.01) conv weights, zero biases,
    /// unit layer-norm gains.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (f, c) = (config.n_bins(), config.hidden_channels);
        let amp = add_stream(&mut store, "amp", &config, &mut rng)?;
        let amp_out_w = store.add_weight("amp.output.weight", &[f, c, 1], &mut rng)?;
        let amp_out_b = store.add_zeros("amp.output.bias", &[f])?;
        let pha = add_stream(&mut store, "pha", &config, &mut rng)?;
        let pha_r_w = store.add_weight("pha.output_r.weight", &[f, c, 1], &mut rng)?;
        let pha_r_b = store.add_zeros("pha.output_r.bias", &[f])?;
        let pha_i_w = store.add_weight("pha.output_i.weight", &[f, c, 1], &mut rng)?;
        let pha_i_b = store.add_zeros("pha.output_i.bias", &[f])?;
        Ok(Self {
            config,
            params: store,
            amp,
            pha,
            amp_out_w,
            amp_out_b,
            pha_r_w,
            pha_r_b,
            pha_i_w,
            pha_i_b,
        })
    }

    /// Names of parameters belonging to the amplitude stream (`amp.*`) or phase stream.
    pub fn stream_param_names(&self, amplitude: bool) -> Vec<String> {
        let prefix = if amplitude { "amp." } else { "pha." };
        self.params
            .params()
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.name.clone())
            .collect()
    }

    /// Residual branch of a block: dwconv, layer norm, expand, GELU, restore.
    fn branch(&self, tape: &mut Tape<R>, w: &[Var], b: &BlockIdx, x: Var) -> Var {
        let c = self.config.hidden_channels;
        let k = self.config.kernel_size_dw;
        let h = tape.conv1d(x, w[b.dw_w], Some(w[b.dw_b]), Conv1dOpts::depthwise(k, c));
        let h = tape.layer_norm(h, w[b.norm_g], w[b.norm_b], R::of(LAYER_NORM_EPS));
        let h = tape.conv1d(h, w[b.pw1_w], Some(w[b.pw1_b]), Conv1dOpts::default());
        let h = tape.gelu(h);
        tape.conv1d(h, w[b.pw2_w], Some(w[b.pw2_b]), Conv1dOpts::default())
    }

    fn block(&self, tape: &mut Tape<R>, w: &[Var], b: &BlockIdx, x: Var) -> Var {
        let h = self.branch(tape, w, b, x);
        tape.add(h, x)
    }

    /// Single ConvNeXt block of the given stream (exposed for verification).
    pub fn convnext_block(&self, tape: &mut Tape<R>, w: &[Var], amplitude: bool, k: usize, x: Var) -> Var {
        let s = if amplitude { &self.amp } else { &self.pha };
        self.block(tape, w, &s.blocks[k], x)
    }

    /// `log_amp_in` and `phase_in` are `[F, T]`; `w` is the bound parameter list.
    pub fn forward(&self, tape: &mut Tape<R>, w: &[Var], log_amp_in: Var, phase_in: Var) -> Result<GeneratorOutput> {
        let f = self.config.n_bins();
        for v in [log_amp_in, phase_in] {
            if tape.shape(v).len() != 2 || tape.shape(v)[0] != f {
                return Err(Error::Shape(format!(
                    "generator expects [{f}, T] inputs, got {:?}",
                    tape.shape(v)
                )));
            }
        }
        if tape.shape(log_amp_in) != tape.shape(phase_in) {
            return Err(Error::Shape("log-amplitude and phase inputs differ in shape".into()));
        }
        let same = Conv1dOpts::same(self.config.input_kernel);
        let mut a = tape.conv1d(log_amp_in, w[self.amp.in_w], Some(w[self.amp.in_b]), same);
        let mut p = tape.conv1d(phase_in, w[self.pha.in_w], Some(w[self.pha.in_b]), same);
        // each stream also receives the other stream's residual branch output
        for (ba, bp) in self.amp.blocks.iter().zip(&self.pha.blocks) {
            let da = self.branch(tape, w, ba, a);
            let dp = self.branch(tape, w, bp, p);
            let mut a_next = tape.add(a, da);
            if self.config.phase_to_amp {
                a_next = tape.add(a_next, dp);
            }
            let mut p_next = tape.add(p, dp);
            if self.config.amp_to_phase {
                p_next = tape.add(p_next, da);
            }
            a = a_next;
            p = p_next;
        }
        let pw = Conv1dOpts::default();
        let res = tape.conv1d(a, w[self.amp_out_w], Some(w[self.amp_out_b]), pw);
        let log_amp = tape.add(log_amp_in, res);
        let r = tape.conv1d(p, w[self.pha_r_w], Some(w[self.pha_r_b]), pw);
        let i = tape.conv1d(p, w[self.pha_i_w], Some(w[self.pha_i_b]), pw);
        let phase = tape.pseudo_phase(r, i);
        Ok(GeneratorOutput { log_amp, phase })
    }

    /// Full differentiable path from an interpolated waveform to the extended
    /// waveform (same length).
    pub fn synthesize(&self, tape: &mut Tape<R>, w: &[Var], interpolated: &[R]) -> Result<Synthesis> {
        let (log_amp_in, phase_in) = input_features(&self.config.stft, interpolated)?;
        let frames = log_amp_in.len() / self.config.n_bins();
        let f = self.config.n_bins();
        let la = tape.constant(&[f, frames], log_amp_in);
        let ph = tape.constant(&[f, frames], phase_in);
        let out = self.forward(tape, w, la, ph)?;
        let log_amp = tape.transpose(out.log_amp);
        let phase = tape.transpose(out.phase);
        let amp = tape.exp(log_amp);
        let spectrum = tape.polar(amp, phase);
        let kernel = shared_kernel::<R>(self.config.stft);
        let waveform = tape.istft(spectrum, &kernel, interpolated.len())?;
        Ok(Synthesis {
            log_amp,
            phase,
            spectrum,
            waveform,
        })
    }

    /// Inference: narrowband waveform in, waveform at `target_sr` out.
    pub fn extend(&self, x: &Waveform) -> Result<Waveform> {
        let n = self.config.interp_factor(x.sample_rate)?;
        let up = sinc_interpolate(x, n)?;
        let input: Vec<R> = up.samples.iter().map(|&v| R::of(v)).collect();
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape, false);
        let syn = self.synthesize(&mut tape, &w, &input)?;
        let mut out: Vec<f64> = tape.value(syn.waveform).iter().map(|v| v.f64()).collect();
        if self.config.replace_low_band {
            out = replace_low_band(&self.config.stft, &up, &out, x.sample_rate)?;
        }
        Waveform::new(out, self.config.target_sr)
    }
}

/// Log amplitude (floored) and wrapped phase of `x`, both `[F, T]` row-major.
pub fn input_features<R: Real>(cfg: &StftConfig, x: &[R]) -> Result<(Vec<R>, Vec<R>)> {
    let kernel = shared_kernel::<R>(*cfg);
    let (planes, frames) = kernel.analyze(x)?;
    let f = cfg.n_bins();
    let (re, im) = planes.split_at(frames * f);
    let mut la = vec![R::zero(); f * frames];
    let mut ph = vec![R::zero(); f * frames];
    for t in 0..frames {
        for k in 0..f {
            let (a, b) = (re[t * f + k], im[t * f + k]);
            la[k * frames + t] = (a * a + b * b).sqrt().max(R::of(LOG_AMP_FLOOR)).ln();
            ph[k * frames + t] = R::of(crate::spectral::angle(a.f64(), b.f64()));
        }
    }
    Ok((la, ph))
}

/// Replaces bins below the source Nyquist with those of the interpolated input.
fn replace_low_band(cfg: &StftConfig, up: &Waveform, out: &[f64], source_sr: u32) -> Result<Vec<f64>> {
    let gen = Waveform::new(out.to_vec(), up.sample_rate)?;
    let mut s = stft(&gen, cfg)?;
    let src = stft(up, cfg)?;
    let cutoff = source_sr as f64 / 2.0;
    for t in 0..s.frames() {
        for k in 0..s.bins() {
            if cfg.bin_frequency(k, up.sample_rate) < cutoff {
                s.real.set(t, k, src.real.get(t, k));
                s.imag.set(t, k, src.imag.get(t, k));
            }
        }
    }
    Ok(crate::spectral::istft(&s, up.sample_rate)?.samples)
}
