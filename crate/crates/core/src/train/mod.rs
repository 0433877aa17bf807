//! Adversarial training: configuration, the per-step update, the epoch loop with
//! learning-rate decay, checkpointing and resumption.
//!
//! A step runs the generator on every example of the batch, updates the
//! discriminators on detached outputs, then updates the generator through fresh
//! discriminator forwards with the just-updated discriminator weights held constant.
//! All randomness is derived from `(seed, epoch)` and `(seed, step)`, so a run
//! resumed from a checkpoint continues exactly as the uninterrupted run would.

pub mod data;
pub mod prepare;

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use data::{list_wavs, prepare_pairs, trim_silence, Dataset, PairedExample, TrimConfig, Utterance};
pub use prepare::{load_prepared, prepare_dir, read_manifest, PrepareConfig, PreparedManifest, PREPARED_MANIFEST};

use crate::audio::{save_checkpoint, Checkpoint, NamedTensor};
use crate::autodiff::{AdamWConfig, OptimizerState, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{
    amplitude_loss_var, complex_loss_var, discriminator_total_var, feature_matching_var, generator_total_var,
    hinge_d_var, hinge_g_var, phase_losses_var, spectral_loss_var, AdversarialVars, LossReport, LossWeights,
};
use crate::model::{DiscriminatorConfig, Discriminators, Generator, GeneratorConfig, ParamStore, SpectralOps};
use crate::spectral::{shared_kernel, sinc_interpolate, LOG_AMP_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// One rate for a fixed-factor model; several for per-example rate sampling.
    pub source_rates: Vec<u32>,
    pub segment_length: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub lr_decay: f64,
    /// Zero writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Verify parameter checksums around each update phase.
    pub check_detachment: bool,
    pub trim: TrimConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub losses: LossWeights,
}

impl Default for TrainConfig {
    /// Full-scale model with batch size 16.
    fn default() -> Self {
        Self {
            source_rates: vec![8000],
            segment_length: 8000,
            batch_size: 16,
            steps: 500_000,
            seed: 0,
            optimizer: AdamWConfig::default(),
            lr_decay: 0.999,
            checkpoint_every: 0,
            check_detachment: false,
            trim: TrimConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            losses: LossWeights::default(),
        }
    }
}

/// Command-line style switches; `true` disables the named part.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_mpd: bool,
    pub no_mrad: bool,
    pub no_mrpd: bool,
    pub no_a2p: bool,
    pub no_p2a: bool,
}

impl TrainConfig {
    /// Desk scale: hidden width 32, narrow discriminators, batch 4, 2000 steps.
    pub fn desk() -> Self {
        Self {
            batch_size: 4,
            steps: 2000,
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            ..Self::default()
        }
    }

    /// Smallest useful model, for smoke runs and tests: one block of width 4,
    /// two-channel discriminators, batch 1, 4000-sample segments.
    pub fn smoke() -> Self {
        let mut discriminator = DiscriminatorConfig::desk();
        discriminator.mpd.channels = vec![2; 5];
        discriminator.mrd.channels = vec![2; 5];
        Self {
            segment_length: 4000,
            batch_size: 1,
            steps: 10,
            generator: GeneratorConfig {
                n_blocks: 1,
                hidden_channels: 4,
                expansion_factor: 2,
                ..GeneratorConfig::default()
            },
            discriminator,
            ..Self::default()
        }
    }

    pub fn target_sr(&self) -> u32 {
        self.generator.target_sr
    }

    pub fn apply(&mut self, a: Ablation) {
        let d = &mut self.discriminator;
        d.enable_mpd &= !a.no_mpd;
        d.enable_mrad &= !a.no_mrad;
        d.enable_mrpd &= !a.no_mrpd;
        self.generator.amp_to_phase &= !a.no_a2p;
        self.generator.phase_to_amp &= !a.no_p2a;
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.losses.validate()?;
        if self.source_rates.is_empty() {
            return Err(Error::Config("source_rates must not be empty".into()));
        }
        for &sr in &self.source_rates {
            let n = self.generator.interp_factor(sr).map_err(|_| {
                Error::Config(format!("source rate {sr} does not divide target rate {}", self.target_sr()))
            })?;
            if self.segment_length % n != 0 {
                return Err(Error::Config(format!(
                    "segment_length {} is not a multiple of factor {n}",
                    self.segment_length
                )));
            }
        }
        if self.segment_length < self.generator.stft.win_length
            || self.segment_length < self.discriminator.min_input_len()
        {
            return Err(Error::Config("segment_length is shorter than an analysis window".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("lr must be positive and lr_decay in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form, lowercase hex.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

const GEN_PREFIX: &str = "gen.";
const DISC_PREFIX: &str = "disc.";

/// Generator state kept alive between the discriminator and generator phases.
struct GenPass<R: Real> {
    tape: Tape<R>,
    w: Vec<Var>,
    y: Var,
    y_hat: Var,
    l_s: Var,
}

pub struct Trainer<R: Real> {
    pub config: TrainConfig,
    pub generator: Generator<R>,
    pub discriminators: Discriminators<R>,
    pub gen_opt: OptimizerState<R>,
    pub disc_opt: OptimizerState<R>,
    /// Completed steps.
    pub step: u64,
    epoch: u64,
}

impl<R: Real> Trainer<R> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator.clone(), config.seed)?;
        let discriminators = Discriminators::new(config.discriminator.clone(), config.seed.wrapping_add(1))?;
        let gen_opt = OptimizerState::new(config.optimizer, generator.params.params());
        let disc_opt = OptimizerState::new(config.optimizer, discriminators.params.params());
        Ok(Self {
            config,
            generator,
            discriminators,
            gen_opt,
            disc_opt,
            step: 0,
            epoch: 0,
        })
    }

    /// Restores weights, optimizer moments and the step counter. `config` must
    /// describe the same model; schedule fields such as `steps` may differ.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config)?;
        t.generator.params.load_from(ckpt, GEN_PREFIX)?;
        t.discriminators.params.load_from(ckpt, DISC_PREFIX)?;
        load_moments(&mut t.gen_opt, &t.generator.params, ckpt, "opt.gen.")?;
        load_moments(&mut t.disc_opt, &t.discriminators.params, ckpt, "opt.disc.")?;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = self.generator.params.to_named_tensors(GEN_PREFIX);
        tensors.extend(self.discriminators.params.to_named_tensors(DISC_PREFIX));
        tensors.extend(moments(&self.gen_opt, &self.generator.params, "opt.gen."));
        tensors.extend(moments(&self.disc_opt, &self.discriminators.params, "opt.disc."));
        let mut ckpt = Checkpoint {
            step: self.step,
            tensors,
            ..Checkpoint::default()
        };
        let m = &mut ckpt.metadata;
        m.insert("config".into(), self.config.to_toml()?);
        m.insert("config_hash".into(), self.config.hash()?);
        m.insert("seed".into(), self.config.seed.to_string());
        m.insert("epoch".into(), self.epoch().to_string());
        m.insert("lr".into(), self.lr().to_string());
        m.insert("precision".into(), R::NAME.into());
        m.insert("gen_opt_step".into(), self.gen_opt.step.to_string());
        m.insert("disc_opt_step".into(), self.disc_opt.step.to_string());
        Ok(ckpt)
    }

    /// Steps per epoch; fixed at construction of the dataset.
    pub fn steps_per_epoch(&self, ds: &Dataset) -> Result<u64> {
        let spe = ds.n_segments() / self.config.batch_size;
        if spe == 0 {
            return Err(Error::Corpus(format!(
                "{} segments cannot fill one batch of {}",
                ds.n_segments(),
                self.config.batch_size
            )));
        }
        Ok(spe as u64)
    }

    fn epoch_for(&self, step: u64, spe: u64) -> u64 {
        step / spe
    }

    /// Epoch recorded by the last call to [`Trainer::set_schedule`].
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Current learning rate: `lr · decay^epoch`.
    pub fn lr(&self) -> f64 {
        self.gen_opt.config.lr
    }

    fn set_schedule(&mut self, epoch: u64) {
        self.epoch = epoch;
        let lr = self.config.optimizer.lr * self.config.lr_decay.powi(epoch as i32);
        self.gen_opt.set_lr(lr);
        self.disc_opt.set_lr(lr);
    }

    /// Batch for the step after `self.step`.
    pub fn next_batch(&self, ds: &Dataset) -> Result<Vec<PairedExample>> {
        let spe = self.steps_per_epoch(ds)?;
        let epoch = self.epoch_for(self.step, spe);
        let b = (self.step % spe) as usize * self.config.batch_size;
        let mut order = ds.slots.clone();
        order.shuffle(&mut stream_rng(self.config.seed, 0x5348_5546, epoch));
        let mut rng = stream_rng(self.config.seed, 0x4352_4f50, self.step);
        order[b..b + self.config.batch_size]
            .iter()
            .map(|&u| {
                let sr = ds.source_rates[rng.random_range(0..ds.source_rates.len())];
                ds.utterances[u].random_pair(ds.segment, sr, &mut rng)
            })
            .collect()
    }

    fn gen_pass(&self, ex: &PairedExample) -> Result<(GenPass<R>, LossReport)> {
        let cfg = &self.generator.config;
        let n = cfg.interp_factor(ex.narrow.sample_rate)?;
        let up = sinc_interpolate(&ex.narrow, n)?;
        let up: Vec<R> = up.samples.iter().map(|&v| R::of(v)).collect();
        let mut tape = Tape::lenient();
        let w = self.generator.params.bind(&mut tape, true);
        let syn = self.generator.synthesize(&mut tape, &w, &up)?;

        let kernel = shared_kernel::<R>(cfg.stft);
        let y = tape.constant(&[ex.wide.len()], ex.wide.samples.iter().map(|&v| R::of(v)).collect());
        let y_spec = tape.stft(y, &kernel)?;
        let y_log = tape.log_magnitude(y_spec, R::of(LOG_AMP_FLOOR));
        let y_phase = tape.angle(y_spec);
        let l_a = amplitude_loss_var(&mut tape, y_log, syn.log_amp);
        let ph = phase_losses_var(&mut tape, y_phase, syn.phase);
        let resynth = tape.stft(syn.waveform, &kernel)?;
        let l_c = complex_loss_var(&mut tape, y_spec, syn.spectrum, resynth);
        let l_s = spectral_loss_var(&mut tape, l_a, ph.total, l_c, &self.config.losses);
        let v = |tape: &Tape<R>, x: Var| tape.scalar(x).f64();
        let report = LossReport {
            l_a: v(&tape, l_a),
            l_ip: v(&tape, ph.ip),
            l_gd: v(&tape, ph.gd),
            l_iaf: v(&tape, ph.iaf),
            l_p: v(&tape, ph.total),
            l_c: v(&tape, l_c),
            l_s: v(&tape, l_s),
            ..LossReport::default()
        };
        Ok((
            GenPass {
                tape,
                w,
                y,
                y_hat: syn.waveform,
                l_s,
            },
            report,
        ))
    }

    /// One discriminator update on detached generator outputs. Returns the batch-summed hinge loss.
    fn disc_phase(&mut self, passes: &[GenPass<R>]) -> Result<f64> {
        let scale = R::of(1.0 / passes.len() as f64);
        self.discriminators.params.zero_grads();
        let mut total = 0.0;
        for p in passes {
            let d = &self.discriminators;
            let mut tape = Tape::lenient();
            let w = d.params.bind(&mut tape, true);
            let real = tape.constant(p.tape.shape(p.y), p.tape.value(p.y).to_vec());
            let fake = tape.constant(p.tape.shape(p.y_hat), p.tape.value(p.y_hat).to_vec());
            let mut hinges = Vec::with_capacity(d.len());
            for k in 0..d.len() {
                let r = d.forward_one(&mut tape, &w, k, real)?;
                let f = d.forward_one(&mut tape, &w, k, fake)?;
                hinges.push(hinge_d_var(&mut tape, r.score, f.score));
            }
            let l_d = discriminator_total_var(&mut tape, &hinges);
            total += tape.scalar(l_d).f64();
            let grads = tape.backward(l_d);
            self.discriminators.params.accumulate(&grads, &w, scale);
        }
        Ok(total)
    }

    /// Adds adversarial terms to each generator tape and accumulates generator
    /// gradients. Returns batch sums in a partial report.
    fn gen_phase(&mut self, passes: Vec<GenPass<R>>) -> Result<LossReport> {
        let d = &self.discriminators;
        let scale = R::of(1.0 / passes.len() as f64);
        let mut sums = LossReport::default();
        self.generator.params.zero_grads();
        for mut p in passes {
            let tape = &mut p.tape;
            let wd = d.params.bind(tape, false);
            let mut adv = Vec::with_capacity(d.len());
            for k in 0..d.len() {
                let real = d.forward_one(tape, &wd, k, p.y)?;
                let fake = d.forward_one(tape, &wd, k, p.y_hat)?;
                let hinge_g = hinge_g_var(tape, fake.score);
                let feature_matching = feature_matching_var(tape, &real.features, &fake.features)?;
                sums.add_family(
                    d.family(k),
                    tape.scalar(hinge_g).f64(),
                    tape.scalar(feature_matching).f64(),
                );
                adv.push(AdversarialVars {
                    family: d.family(k),
                    hinge_g,
                    feature_matching,
                });
            }
            let l_g = generator_total_var(tape, &adv, p.l_s, &self.config.losses);
            sums.l_g += tape.scalar(l_g).f64();
            let grads = tape.backward(l_g);
            self.generator.params.accumulate(&grads, &p.w, scale);
        }
        Ok(sums)
    }

    /// One full update on `batch`. Fails without touching the weights of the
    /// phase in which a non-finite loss appears.
    pub fn train_step(&mut self, batch: &[PairedExample], spe: u64) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let step = self.step + 1;
        self.set_schedule(self.epoch_for(self.step, spe));
        let nf = |term: &str| Error::NonFiniteLoss {
            step,
            term: term.to_string(),
        };
        let b = batch.len() as f64;

        let mut passes = Vec::with_capacity(batch.len());
        let mut report = LossReport {
            step,
            ..LossReport::default()
        };
        for ex in batch {
            let (pass, r) = self.gen_pass(ex)?;
            for ((_, acc), (_, v)) in report.terms_mut().into_iter().zip(r.terms()) {
                *acc += v;
            }
            passes.push(pass);
        }
        if let Some(term) = report.first_non_finite() {
            return Err(nf(term));
        }

        let check = self.config.check_detachment;
        if !self.discriminators.is_empty() {
            let gen_before = check.then(|| self.generator.params.checksum());
            report.l_d = self.disc_phase(&passes)?;
            if !report.l_d.is_finite() {
                return Err(nf("l_d"));
            }
            self.disc_opt.step(self.discriminators.params.params_mut())?;
            if gen_before.is_some_and(|c| c != self.generator.params.checksum()) {
                return Err(Error::Other("discriminator phase changed generator weights".into()));
            }
        }

        let disc_before = check.then(|| self.discriminators.params.checksum());
        let sums = self.gen_phase(passes)?;
        for ((_, acc), (name, v)) in report.terms_mut().into_iter().zip(sums.terms()) {
            if name != "l_d" {
                *acc += v;
            }
        }
        for (_, acc) in report.terms_mut() {
            *acc /= b;
        }
        if let Some(term) = report.first_non_finite() {
            return Err(nf(term));
        }
        self.gen_opt.step(self.generator.params.params_mut())?;
        if disc_before.is_some_and(|c| c != self.discriminators.params.checksum()) {
            return Err(Error::Other("generator phase changed discriminator weights".into()));
        }
        self.step = step;
        Ok(report)
    }

    /// Trains until `self.step == until`, writing one JSON line per step to `log`
    /// and calling `on_step` after each step.
    pub fn run(
        &mut self,
        ds: &Dataset,
        until: u64,
        log: &mut dyn Write,
        on_step: &mut dyn FnMut(&Self, &LossReport) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        let spe = self.steps_per_epoch(ds)?;
        let mut reports = Vec::new();
        while self.step < until {
            let batch = self.next_batch(ds)?;
            let r = self.train_step(&batch, spe)?;
            let line = serde_json::to_string(&r).map_err(|e| Error::Other(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| Error::Other(format!("loss log: {e}")))?;
            on_step(self, &r)?;
            reports.push(r);
        }
        log.flush().map_err(|e| Error::Other(format!("loss log: {e}")))?;
        Ok(reports)
    }
}

fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.rotate_left(32));
    rng.set_stream(index);
    rng
}

fn moments<R: Real>(opt: &OptimizerState<R>, store: &ParamStore<R>, prefix: &str) -> Vec<NamedTensor> {
    let mut out = Vec::with_capacity(2 * store.len());
    for (i, p) in store.params().iter().enumerate() {
        let shape = p.tensor.shape();
        out.push(NamedTensor::from_values(format!("{prefix}m.{}", p.name), shape, &opt.first_moment[i]));
        out.push(NamedTensor::from_values(format!("{prefix}v.{}", p.name), shape, &opt.second_moment[i]));
    }
    out.push(NamedTensor::from_values(format!("{prefix}step"), &[1], &[R::of(opt.step as f64)]));
    out
}

fn load_moments<R: Real>(opt: &mut OptimizerState<R>, store: &ParamStore<R>, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    for (i, p) in store.params().iter().enumerate() {
        for (kind, dst) in [("m", &mut opt.first_moment[i]), ("v", &mut opt.second_moment[i])] {
            let nt = ckpt.require(&format!("{prefix}{kind}.{}", p.name))?;
            if nt.data.len() != dst.len() {
                return Err(Error::Shape(format!("optimizer moment {} has wrong length", nt.name)));
            }
            *dst = nt.data.to_real();
        }
    }
    opt.step = ckpt.require(&format!("{prefix}step"))?.data.to_f64()[0] as u64;
    Ok(())
}

/// Training configuration stored in a checkpoint's metadata.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<TrainConfig> {
    let text = ckpt
        .metadata
        .get("config")
        .ok_or_else(|| Error::Checkpoint("checkpoint has no config metadata".into()))?;
    TrainConfig::from_toml(text)
}

/// Generator weights and configuration from a training checkpoint.
pub fn load_generator<R: Real>(ckpt: &Checkpoint) -> Result<Generator<R>> {
    let cfg = checkpoint_config(ckpt)?;
    let mut g = Generator::new(cfg.generator, 0)?;
    g.params.load_from(ckpt, GEN_PREFIX)?;
    Ok(g)
}

pub const LOSS_LOG: &str = "loss.ndjson";
pub const FINAL_CHECKPOINT: &str = "last.apbw";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:08}.apbw"))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub final_checkpoint: PathBuf,
    pub step: u64,
}

/// Runs training to `cfg.steps`, resuming from `resume` if given. Appends to
/// `out_dir/loss.ndjson`, saves periodic checkpoints and `last.apbw`.
pub fn train_loop(cfg: TrainConfig, ds: &Dataset, out_dir: &Path, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if ds.target_sr != cfg.target_sr() {
        return Err(Error::SampleRate {
            expected: cfg.target_sr(),
            found: ds.target_sr,
            path: None,
        });
    }
    let mut trainer = match resume {
        Some(c) => Trainer::<f32>::from_checkpoint(cfg.clone(), c)?,
        None => Trainer::<f32>::new(cfg.clone())?,
    };
    let log_path = out_dir.join(LOSS_LOG);
    let file = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let every = cfg.checkpoint_every;
    let reports = trainer.run(ds, cfg.steps, &mut log, &mut |t, r| {
        if every > 0 && r.step % every == 0 {
            save_checkpoint(checkpoint_path(out_dir, r.step), &t.to_checkpoint()?)?;
        }
        Ok(())
    })?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &trainer.to_checkpoint()?)?;
    Ok(TrainOutcome {
        reports,
        final_checkpoint,
        step: trainer.step,
    })
}
