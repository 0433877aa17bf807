//! `apbwe`: batch front end for data preparation, training, inference, evaluation
//! and benchmarking.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad arguments or config, 3 corpus
//! error, 4 non-finite training loss, 5 sample-rate mismatch at inference.
//! Reports go to stdout; the resolved configuration and progress go to stderr.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use apbwe::audio::{load_checkpoint, read_wav, write_wav, WavEncoding, Waveform};
use apbwe::metrics::bench::{estimate_flops, measure_rtf, sleep_stub};
use apbwe::metrics::{all_metrics, bandwise, BandRow, EvalConfig, EvalReport, UtteranceRow};
use apbwe::model::Generator;
use apbwe::train::{
    checkpoint_config, list_wavs, load_generator, load_prepared, prepare_dir, train_loop, Ablation, PrepareConfig,
    TrainConfig, TrimConfig,
};
use apbwe::verify;

#[derive(Parser)]
#[command(name = "apbwe", version, about = "Speech bandwidth extension with parallel amplitude and phase streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pair a directory of wideband WAVs with their narrowband versions.
    Prepare(PrepareArgs),
    /// Train a model on a prepared directory.
    Train(TrainArgs),
    /// Extend narrowband WAVs with a trained checkpoint.
    Extend(ExtendArgs),
    /// Compare estimated WAVs against references.
    Eval(EvalArgs),
    /// Measure the real-time factor of a checkpoint.
    Bench(BenchArgs),
    /// Check every differentiable op against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic test corpus.
    Synth(SynthArgs),
}

#[derive(Args, Serialize)]
struct PrepareArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16000)]
    target_sr: u32,
    #[arg(long, conflicts_with = "source_sr_set")]
    source_sr: Option<u32>,
    /// Comma-separated source rates, one sampled per training example.
    #[arg(long, value_delimiter = ',')]
    source_sr_set: Option<Vec<u32>>,
    #[arg(long, default_value_t = 8000)]
    segment: usize,
    /// Drop leading and trailing frames below -40 dBFS before pairing.
    #[arg(long)]
    trim: bool,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    data: PathBuf,
    /// TOML training config; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long, default_value = "runs/apbwe")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    no_mpd: bool,
    #[arg(long)]
    no_mrad: bool,
    #[arg(long)]
    no_mrpd: bool,
    #[arg(long)]
    no_a2p: bool,
    #[arg(long)]
    no_p2a: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
enum Preset {
    /// One tiny block, for smoke runs.
    Smoke,
    /// Hidden width 32, batch 4, 2000 steps.
    Desk,
    /// Hidden width 512, batch 16, 500k steps.
    Full,
}

#[derive(Args, Serialize)]
struct ExtendArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A WAV file or a directory of WAV files.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    est: PathBuf,
    /// Comma-separated `low-high` bands in Hz, e.g. 4000-8000,8000-12000.
    #[arg(long, value_delimiter = ',', value_parser = parse_band)]
    bands: Option<Vec<(f64, f64)>>,
    /// Also write newline-delimited JSON records here.
    #[arg(long)]
    ndjson: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long, required_unless_present = "stub_rtf")]
    ckpt: Option<PathBuf>,
    /// Directory of narrowband WAVs.
    #[arg(long)]
    testset: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Time a runner that sleeps this many seconds per output second instead of a model.
    #[arg(long)]
    stub_rtf: Option<f64>,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(short, long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 16000)]
    sr: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn parse_band(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once('-').ok_or_else(|| format!("band `{s}` is not low-high"))?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad band edge `{lo}`"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad band edge `{hi}`"))?;
    if !(lo >= 0.0 && hi > lo) {
        return Err(format!("band `{s}` needs 0 <= low < high"));
    }
    Ok((lo, hi))
}

/// Prints the effective settings of a run to stderr.
fn echo_config(name: &str, value: &impl Serialize) {
    match toml::to_string(value) {
        Ok(text) => eprintln!("# resolved {name} config\n{}", text.trim_end()),
        Err(e) => eprintln!("# resolved {name} config unavailable: {e}"),
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?)
}

fn cmd_prepare(a: PrepareArgs) -> Result<()> {
    let source_rates = match (&a.source_sr_set, a.source_sr) {
        (Some(set), _) => set.clone(),
        (None, Some(sr)) => vec![sr],
        (None, None) => vec![a.target_sr / 2],
    };
    let cfg = PrepareConfig {
        target_sr: a.target_sr,
        source_rates,
        segment_length: a.segment,
        trim: TrimConfig {
            enabled: a.trim,
            ..TrimConfig::default()
        },
    };
    echo_config("prepare", &cfg);
    let m = prepare_dir(&a.input, &a.out, &cfg)?;
    println!(
        "prepared {} utterances, {} segments, source rates {:?}{}, config {}",
        m.n_utterances,
        m.n_segments,
        m.config.source_rates,
        if m.multi_rate { " (multi-rate)" } else { "" },
        m.config_hash
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (manifest, ds) = load_prepared(&a.data)?;
    let resume = a
        .resume
        .as_ref()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let mut cfg = match (&a.config, &resume) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_toml(&text)?
        }
        (None, Some(ckpt)) => checkpoint_config(ckpt)?,
        (None, None) => match a.preset {
            Preset::Smoke => TrainConfig::smoke(),
            Preset::Desk => TrainConfig::desk(),
            Preset::Full => TrainConfig::default(),
        },
    };
    // The prepared data fixes the rates and the segment length.
    cfg.generator.target_sr = manifest.config.target_sr;
    cfg.source_rates = manifest.config.source_rates.clone();
    cfg.segment_length = manifest.config.segment_length;
    cfg.trim = manifest.config.trim;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.apply(Ablation {
        no_mpd: a.no_mpd,
        no_mrad: a.no_mrad,
        no_mrpd: a.no_mrpd,
        no_a2p: a.no_a2p,
        no_p2a: a.no_p2a,
    });
    cfg.validate()?;
    echo_config("train", &cfg);
    eprintln!("# dataset {} ({} segments), config hash {}", a.data.display(), ds.n_segments(), cfg.hash()?);
    let start = Instant::now();
    let out = train_loop(cfg, &ds, &a.out, resume.as_ref())?;
    if let Some(last) = out.reports.last() {
        eprintln!(
            "# {} steps in {:.1} s; last L_G {:.4}, L_D {:.4}, L_A {:.4}",
            out.reports.len(),
            start.elapsed().as_secs_f64(),
            last.l_g,
            last.l_d,
            last.l_a
        );
    }
    println!("{}", out.final_checkpoint.display());
    Ok(())
}

/// `(input, output)` file pairs for a file-or-directory argument pair.
fn io_pairs(input: &Path, out: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if input.is_dir() {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let files = list_wavs(input)?;
        if files.is_empty() {
            return Err(apbwe::Error::Corpus(format!("no WAV files in {}", input.display())).into());
        }
        Ok(files
            .into_iter()
            .map(|f| {
                let o = out.join(f.file_name().expect("listed files have names"));
                (f, o)
            })
            .collect())
    } else {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(vec![(input.to_path_buf(), out.to_path_buf())])
    }
}

fn load_model(path: &Path) -> Result<Generator<f32>> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(load_generator(&ckpt)?)
}

fn cmd_extend(a: ExtendArgs) -> Result<()> {
    let g = load_model(&a.ckpt)?;
    echo_config("generator", &g.config);
    let pairs = io_pairs(&a.input, &a.out)?;
    let run = |(src, dst): &(PathBuf, PathBuf)| -> Result<()> {
        let x = read_wav(src)?;
        let y = g.extend(&x).map_err(|e| match e {
            apbwe::Error::SampleRate { expected, found, .. } => apbwe::Error::SampleRate {
                expected,
                found,
                path: Some(src.clone()),
            },
            e => e,
        })?;
        write_wav(dst, &y, WavEncoding::Float32)?;
        Ok(())
    };
    pool(a.threads)?.install(|| pairs.par_iter().try_for_each(run))?;
    for (_, dst) in &pairs {
        println!("{}", dst.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let refs = list_wavs(&a.reference)?;
    if refs.is_empty() {
        return Err(apbwe::Error::Corpus(format!("no WAV files in {}", a.reference.display())).into());
    }
    for r in &refs {
        let est = a.est.join(r.file_name().expect("listed files have names"));
        if !est.is_file() {
            return Err(apbwe::Error::Corpus(format!("no estimate for {} (looked for {})", r.display(), est.display())).into());
        }
    }
    let first = read_wav(&refs[0])?;
    let nyquist = first.sample_rate as f64 / 2.0;
    let cfg = EvalConfig {
        bands: match &a.bands {
            Some(b) => b.clone(),
            // Default bands that start above the reference Nyquist are dropped.
            None => EvalConfig::default().bands.into_iter().filter(|&(lo, _)| lo < nyquist).collect(),
        },
        ..EvalConfig::default()
    };
    echo_config("eval", &cfg);
    let hash = cfg.hash()?;
    let rows: Vec<UtteranceRow> = pool(a.threads)?.install(|| {
        refs.par_iter()
            .map(|r| -> Result<UtteranceRow> {
                let name = r.file_name().expect("listed files have names");
                let reference = read_wav(r)?;
                let estimate = read_wav(a.est.join(name))?;
                Ok(UtteranceRow {
                    id: name.to_string_lossy().into_owned(),
                    values: all_metrics(&reference, &estimate, &cfg)?,
                    bands: bandwise(&reference, &estimate, &cfg)?
                        .into_iter()
                        .map(|b| BandRow {
                            low: b.low,
                            high: b.high,
                            values: b.values,
                        })
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let report = EvalReport::new(hash, rows)?;
    let stdout = std::io::stdout();
    report.write_csv(stdout.lock())?;
    if let Some(path) = &a.ndjson {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(f);
        report.write_ndjson(&mut w)?;
        w.flush()?;
    }
    let m = &report.mean;
    eprintln!(
        "# mean over {} utterances: LSD {:.4}, AWPD_IP {:.4}, AWPD_GD {:.4}, AWPD_IAF {:.4}",
        report.utterances.len(),
        m.lsd,
        m.awpd_ip,
        m.awpd_gd,
        m.awpd_iaf
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let files = list_wavs(&a.testset)?;
    if files.is_empty() {
        return Err(apbwe::Error::Corpus(format!("no WAV files in {}", a.testset.display())).into());
    }
    let inputs: Vec<Waveform> = files.iter().map(read_wav).collect::<apbwe::Result<_>>()?;
    echo_config("bench", &a);
    let (report, flops) = match (a.stub_rtf, &a.ckpt) {
        (Some(rtf), _) => (measure_rtf(sleep_stub(rtf, 2, inputs[0].sample_rate * 2), &inputs, a.threads)?, None),
        (None, Some(path)) => {
            let g = load_model(path)?;
            let flops = estimate_flops(&g.config, 1.0, false);
            (measure_rtf(|x: &Waveform| g.extend(x), &inputs, a.threads)?, Some(flops))
        }
        (None, None) => bail!("--ckpt is required without --stub-rtf"),
    };
    let mut out = BTreeMap::new();
    out.insert("rtf", format!("{:.6}", report.rtf));
    out.insert("speedup", format!("{:.2}x real-time", report.speedup));
    out.insert("audio_secs", format!("{:.3}", report.audio_secs));
    out.insert("elapsed_secs", format!("{:.3}", report.elapsed_secs));
    out.insert("utterances", report.utterances.to_string());
    out.insert("threads", report.threads.to_string());
    if let Some(f) = flops {
        out.insert("gflops_per_second_of_audio", format!("{:.3}", f / 1e9));
    }
    for (k, v) in out {
        println!("{k}: {v}");
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    echo_config("gradcheck", &a);
    eprintln!("# tolerance {:e}, kink margin {:e}", verify::TOLERANCE, verify::KINK_MARGIN);
    let results = verify::run_suite(a.seed)?;
    let mut failed = 0;
    for r in &results {
        failed += usize::from(!r.passed);
        println!(
            "{} {:<26} {:<40} {:.2e} ({} coords)",
            if r.passed { "PASS" } else { "FAIL" },
            r.op,
            r.case,
            r.max_rel_error,
            r.checked
        );
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", results.len());
    }
    eprintln!("# all {} checks passed", results.len());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    echo_config("synth", &a);
    let m = apbwe::synth::make_toy_corpus(a.n, &a.out, a.sr, a.seed)?;
    println!("wrote {} utterances to {}", m.utterances.len(), a.out.display());
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Prepare,
    Train,
    Extend,
    Other,
}

/// Maps a failure to the documented exit code.
fn exit_code(kind: Kind, err: &anyhow::Error) -> u8 {
    use apbwe::Error as E;
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<E>()) else {
        return 1;
    };
    match e {
        E::Config(_) | E::InvalidArgument(_) => 2,
        E::NonFiniteLoss { .. } => 4,
        E::SampleRate { .. } if kind == Kind::Extend || kind == Kind::Other => 5,
        E::SampleRate { .. } | E::Corpus(_) => 3,
        E::Io { .. } | E::Wav { .. } if kind == Kind::Prepare || kind == Kind::Train => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, result) = match cli.command {
        Command::Prepare(a) => (Kind::Prepare, cmd_prepare(a)),
        Command::Train(a) => (Kind::Train, cmd_train(a)),
        Command::Extend(a) => (Kind::Extend, cmd_extend(a)),
        Command::Eval(a) => (Kind::Other, cmd_eval(a)),
        Command::Bench(a) => (Kind::Other, cmd_bench(a)),
        Command::Gradcheck(a) => (Kind::Other, cmd_gradcheck(a)),
        Command::Synth(a) => (Kind::Other, cmd_synth(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(kind, &e))
        }
    }
}
