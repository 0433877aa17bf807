//! Multi-period (waveform) and multi-resolution amplitude/phase discriminators.
//!
//! Every sub-discriminator is a stack of 2-D convolutions with leaky-ReLU after
//! each hidden layer and a single-channel output convolution. Parameter names
//! are `{mpd.p<period>|mrad.<k>|mrpd.<k>}.conv.<i>.{weight|bias}` and `....output.{weight|bias}`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{period_reshape, SpectralOps};
use super::store::ParamStore;
use crate::autodiff::{Conv2dOpts, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::spectral::{shared_kernel, StftConfig, WindowKind, LOG_AMP_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mpd,
    Mrad,
    Mrpd,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Mpd => "mpd",
            Family::Mrad => "mrad",
            Family::Mrpd => "mrpd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpdConfig {
    pub periods: Vec<usize>,
    pub channels: Vec<usize>,
    /// Kernel length along the folded time axis.
    pub kernel: usize,
    pub stride: usize,
    pub output_kernel: usize,
    pub leaky_slope: f64,
}

impl Default for MpdConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            channels: vec![32, 128, 512, 1024, 1024],
            kernel: 5,
            stride: 3,
            output_kernel: 3,
            leaky_slope: 0.1,
        }
    }
}

/// One analysis resolution: FFT size, hop and window length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
}

impl Resolution {
    pub fn stft_config(&self) -> Result<StftConfig> {
        StftConfig::new(self.n_fft, self.win, self.hop, WindowKind::Rectangular, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrdConfig {
    pub resolutions: Vec<Resolution>,
    pub channels: Vec<usize>,
    /// (time, frequency) kernel per hidden layer.
    pub kernels: Vec<(usize, usize)>,
    pub strides: Vec<(usize, usize)>,
    pub output_kernel: (usize, usize),
    pub leaky_slope: f64,
}

impl Default for MrdConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![
                Resolution { n_fft: 512, hop: 128, win: 512 },
                Resolution { n_fft: 1024, hop: 256, win: 1024 },
                Resolution { n_fft: 2048, hop: 512, win: 2048 },
            ],
            channels: vec![32; 5],
            kernels: vec![(7, 5), (5, 3), (5, 3), (3, 3), (3, 3)],
            strides: vec![(2, 2), (2, 1), (2, 2), (2, 1), (2, 2)],
            output_kernel: (3, 3),
            leaky_slope: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub mpd: MpdConfig,
    pub mrd: MrdConfig,
    pub enable_mpd: bool,
    pub enable_mrad: bool,
    pub enable_mrpd: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            mpd: MpdConfig::default(),
            mrd: MrdConfig::default(),
            enable_mpd: true,
            enable_mrad: true,
            enable_mrpd: true,
        }
    }
}

impl DiscriminatorConfig {
    /// Narrow channel schedules for single-core desk runs.
    pub fn desk() -> Self {
        Self {
            mpd: MpdConfig {
                channels: vec![8, 16, 32, 32, 32],
                ..MpdConfig::default()
            },
            mrd: MrdConfig {
                channels: vec![8; 5],
                ..MrdConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mrd;
        if m.channels.len() != m.kernels.len() || m.channels.len() != m.strides.len() {
            return Err(Error::Config(
                "mrd channels, kernels and strides must have equal lengths".into(),
            ));
        }
        if self.mpd.periods.iter().any(|&p| p < 1) || self.mpd.stride < 1 || self.mpd.kernel < 1 {
            return Err(Error::Config("mpd periods, kernel and stride must be >= 1".into()));
        }
        for r in &m.resolutions {
            r.stft_config()?;
        }
        if m.strides.iter().any(|s| s.0 < 1 || s.1 < 1) {
            return Err(Error::Config("mrd strides must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of enabled sub-discriminators.
    pub fn count(&self) -> usize {
        let r = self.mrd.resolutions.len();
        usize::from(self.enable_mpd) * self.mpd.periods.len()
            + usize::from(self.enable_mrad) * r
            + usize::from(self.enable_mrpd) * r
    }

    /// Longest window among the spectral sub-discriminators.
    pub fn min_input_len(&self) -> usize {
        if self.enable_mrad || self.enable_mrpd {
            self.mrd.resolutions.iter().map(|r| r.win).max().unwrap_or(1)
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Front {
    Period(usize),
    Amplitude(StftConfig),
    Phase(StftConfig),
}

struct Layer {
    w: usize,
    b: usize,
    opts: Conv2dOpts,
}

struct SubDisc {
    name: String,
    family: Family,
    front: Front,
    layers: Vec<Layer>,
    output: Layer,
    slope: f64,
}

/// Score (mean of the final map) and features (every activation plus the final map).
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub score: Var,
    pub features: Vec<Var>,
}

pub struct Discriminators<R: Real> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<R>,
    subs: Vec<SubDisc>,
}

impl<R: Real> Clone for Discriminators<R> {
    fn clone(&self) -> Self {
        let mut d = Self::new(self.config.clone(), 0).expect("config already validated");
        d.params = self.params.clone();
        d
    }
}

fn add_stack<R: Real>(
    store: &mut ParamStore<R>,
    prefix: &str,
    specs: &[(usize, (usize, usize), (usize, usize))],
    output_kernel: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Layer>, Layer)> {
    let mut c_in = 1;
    let mut layers = Vec::new();
    for (i, &(c, k, s)) in specs.iter().enumerate() {
        layers.push(Layer {
            w: store.add_weight(&format!("{prefix}.conv.{i}.weight"), &[c, c_in, k.0, k.1], rng)?,
            b: store.add_zeros(&format!("{prefix}.conv.{i}.bias"), &[c])?,
            opts: Conv2dOpts {
                stride: s,
                padding: (k.0 / 2, k.1 / 2),
            },
        });
        c_in = c;
    }
    let k = output_kernel;
    let output = Layer {
        w: store.add_weight(&format!("{prefix}.output.weight"), &[1, c_in, k.0, k.1], rng)?,
        b: store.add_zeros(&format!("{prefix}.output.bias"), &[1])?,
        opts: Conv2dOpts {
            stride: (1, 1),
            padding: (k.0 / 2, k.1 / 2),
        },
    };
    Ok((layers, output))
}

impl<R: Real> Discriminators<R> {
    /// Builds every enabled sub-discriminator with normal(0, 0.01) weights.
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut subs = Vec::new();
        if config.enable_mpd {
            let m = &config.mpd;
            let specs: Vec<_> = m
                .channels
                .iter()
                .map(|&c| (c, (m.kernel, 1), (m.stride, 1)))
                .collect();
            for &p in &m.periods {
                let name = format!("mpd.p{p}");
                let (layers, output) = add_stack(&mut params, &name, &specs, (m.output_kernel, 1), &mut rng)?;
                subs.push(SubDisc {
                    name,
                    family: Family::Mpd,
                    front: Front::Period(p),
                    layers,
                    output,
                    slope: m.leaky_slope,
                });
            }
        }
        let m = &config.mrd;
        let specs: Vec<_> = m
            .channels
            .iter()
            .zip(&m.kernels)
            .zip(&m.strides)
            .map(|((&c, &k), &s)| (c, k, s))
            .collect();
        for (family, enabled) in [(Family::Mrad, config.enable_mrad), (Family::Mrpd, config.enable_mrpd)] {
            if !enabled {
                continue;
            }
            for (k, r) in m.resolutions.iter().enumerate() {
                let name = format!("{}.{k}", family.name());
                let (layers, output) = add_stack(&mut params, &name, &specs, m.output_kernel, &mut rng)?;
                let cfg = r.stft_config()?;
                subs.push(SubDisc {
                    name,
                    family,
                    front: if family == Family::Mrad {
                        Front::Amplitude(cfg)
                    } else {
                        Front::Phase(cfg)
                    },
                    layers,
                    output,
                    slope: m.leaky_slope,
                });
            }
        }
        Ok(Self { config, params, subs })
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    pub fn family(&self, k: usize) -> Family {
        self.subs[k].family
    }

    pub fn name(&self, k: usize) -> &str {
        &self.subs[k].name
    }

    /// Input plane `[1, H, W]` of sub-discriminator `k` for a `[L]` waveform node.
    pub fn front_end(&self, tape: &mut Tape<R>, k: usize, wave: Var) -> Result<Var> {
        match self.subs[k].front {
            Front::Period(p) => Ok(period_reshape(tape, wave, p)),
            Front::Amplitude(cfg) => {
                let s = tape.stft(wave, &shared_kernel::<R>(cfg))?;
                let m = tape.log_magnitude(s, R::of(LOG_AMP_FLOOR));
                let shape = tape.shape(m).to_vec();
                Ok(tape.reshape(m, &[1, shape[0], shape[1]]))
            }
            Front::Phase(cfg) => {
                let s = tape.stft(wave, &shared_kernel::<R>(cfg))?;
                let p = tape.angle(s);
                let shape = tape.shape(p).to_vec();
                Ok(tape.reshape(p, &[1, shape[0], shape[1]]))
            }
        }
    }

    pub fn forward_one(&self, tape: &mut Tape<R>, w: &[Var], k: usize, wave: Var) -> Result<DiscriminatorOutput> {
        let sub = &self.subs[k];
        let mut h = self.front_end(tape, k, wave)?;
        let mut features = Vec::with_capacity(sub.layers.len() + 1);
        for l in &sub.layers {
            h = tape.conv2d(h, w[l.w], Some(w[l.b]), l.opts);
            h = tape.leaky_relu(h, R::of(sub.slope));
            features.push(h);
        }
        let o = &sub.output;
        let out = tape.conv2d(h, w[o.w], Some(w[o.b]), o.opts);
        features.push(out);
        let score = tape.mean(out);
        Ok(DiscriminatorOutput { score, features })
    }

    /// Every enabled sub-discriminator, in construction order (MPD, MRAD, MRPD).
    pub fn forward(&self, tape: &mut Tape<R>, w: &[Var], wave: Var) -> Result<Vec<DiscriminatorOutput>> {
        (0..self.subs.len()).map(|k| self.forward_one(tape, w, k, wave)).collect()
    }
}
