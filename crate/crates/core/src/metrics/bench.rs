//! Real-time factor measurement and analytic FLOPs counting.
//!
//! `measure_rtf` owns the wall clock; results are only meaningful on an otherwise idle machine.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::model::GeneratorConfig;

/// Utterances run through the model before the clock starts.
pub const WARMUP_RUNS: usize = 3;

/// Per-element cost of layer normalization: mean, centred square, variance, scale, affine.
pub const LAYER_NORM_FLOPS_PER_ELEM: f64 = 8.0;
/// Per-element cost of the erf-form GELU, counting erf as a short polynomial.
pub const GELU_FLOPS_PER_ELEM: f64 = 14.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub rtf: f64,
    /// Reciprocal of `rtf`: "a× real-time".
    pub speedup: f64,
    pub elapsed_secs: f64,
    pub audio_secs: f64,
    pub utterances: usize,
    pub threads: usize,
}

impl RtfReport {
    pub fn summary(&self) -> String {
        format!("RTF {:.4} ({:.2}x real-time)", self.rtf, self.speedup)
    }
}

/// Times `runner` over `inputs` after [`WARMUP_RUNS`] untimed calls. RTF is total
/// wall-clock time over total output duration. With `threads > 1` utterances are
/// processed concurrently on a dedicated pool.
pub fn measure_rtf<F>(runner: F, inputs: &[Waveform], threads: usize) -> Result<RtfReport>
where
    F: Fn(&Waveform) -> Result<Waveform> + Sync,
{
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("RTF test set is empty".into()));
    }
    let threads = threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Other(format!("thread pool: {e}")))?;
    pool.install(|| {
        for x in inputs.iter().cycle().take(WARMUP_RUNS) {
            runner(x)?;
        }
        let start = Instant::now();
        let outs: Vec<Waveform> = if threads == 1 {
            inputs.iter().map(&runner).collect::<Result<_>>()?
        } else {
            inputs.par_iter().map(&runner).collect::<Result<_>>()?
        };
        let elapsed = start.elapsed().as_secs_f64();
        let audio: f64 = outs.iter().map(Waveform::duration_secs).sum();
        if audio <= 0.0 {
            return Err(Error::InvalidArgument("runner produced no audio".into()));
        }
        let rtf = elapsed / audio;
        Ok(RtfReport {
            rtf,
            speedup: 1.0 / rtf,
            elapsed_secs: elapsed,
            audio_secs: audio,
            utterances: inputs.len(),
            threads,
        })
    })
}

/// A stand-in runner that sleeps `rtf` seconds per second of output and returns
/// zeros at `out_sr` with `factor` times the input length.
pub fn sleep_stub(rtf: f64, factor: usize, out_sr: u32) -> impl Fn(&Waveform) -> Result<Waveform> + Sync {
    move |x: &Waveform| {
        let out = Waveform::zeros(x.len() * factor, out_sr);
        std::thread::sleep(Duration::from_secs_f64(rtf * out.duration_secs()));
        Ok(out)
    }
}

/// Multiplies and adds of a 1-D convolution (bias excluded): `2·C_out·(C_in/g)·K·T`.
pub fn conv1d_flops(c_in: usize, c_out: usize, kernel: usize, groups: usize, frames: usize) -> f64 {
    2.0 * c_out as f64 * (c_in / groups.max(1)) as f64 * kernel as f64 * frames as f64
}

/// Analytic generator cost for `duration_s` of output audio. Counts convolutions,
/// layer norms, GELUs and element-wise adds. With `include_fft`, adds
/// `5·n·log2 n` per analysis and per synthesis frame.
pub fn estimate_flops(cfg: &GeneratorConfig, duration_s: f64, include_fft: bool) -> f64 {
    if duration_s <= 0.0 {
        return 0.0;
    }
    let samples = (duration_s * cfg.target_sr as f64).round() as usize;
    let t = cfg.stft.n_frames(samples);
    let (f, c, e) = (cfg.n_bins(), cfg.hidden_channels, cfg.expansion_factor);
    let elems = |ch: usize| (ch * t) as f64;

    let block = conv1d_flops(c, c, cfg.kernel_size_dw, c, t)
        + LAYER_NORM_FLOPS_PER_ELEM * elems(c)
        + conv1d_flops(c, e * c, 1, 1, t)
        + GELU_FLOPS_PER_ELEM * elems(e * c)
        + conv1d_flops(e * c, c, 1, 1, t)
        + elems(c);
    let exchange = (cfg.amp_to_phase as usize + cfg.phase_to_amp as usize) as f64 * elems(c);
    let stream_input = conv1d_flops(f, c, cfg.input_kernel, 1, t);

    let mut total = 2.0 * stream_input
        + cfg.n_blocks as f64 * (2.0 * block + exchange)
        + 3.0 * conv1d_flops(c, f, 1, 1, t)
        + elems(f);
    if include_fft {
        let n = cfg.stft.n_fft as f64;
        total += 2.0 * t as f64 * 5.0 * n * n.log2();
    }
    total
}
