use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use apbwe::audio::{read_wav, save_checkpoint, write_wav, WavEncoding, Waveform};
use apbwe::synth::make_toy_corpus;
use apbwe::train::{PreparedManifest, TrainConfig, Trainer, PREPARED_MANIFEST};

fn apbwe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apbwe")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tone(secs: f64, sr: u32) -> Waveform {
    let n = (secs * sr as f64) as usize;
    Waveform::new((0..n).map(|i| 0.3 * (i as f64 * 0.05).sin()).collect(), sr).unwrap()
}

/// Synthetic corpus of `n` files, prepared at 16 kHz / 8 kHz.
fn prepared(dir: &Path, n: usize) -> PathBuf {
    make_toy_corpus(n, &dir.join("corpus"), 16000, 1).unwrap();
    let out = dir.join("prep");
    let o = apbwe(&["prepare", "--in", s(&dir.join("corpus")), "--out", s(&out), "--source-sr", "8000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--preset", "smoke"];
    args.extend_from_slice(extra);
    apbwe(&args)
}

#[test]
fn unknown_flags_exit_2() {
    let o = apbwe(&["prepare", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(apbwe(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn prepare_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    make_toy_corpus(10, &dir.path().join("corpus"), 16000, 1).unwrap();
    let out = dir.path().join("prep");
    let o = apbwe(&["prepare", "--in", s(&dir.path().join("corpus")), "--out", s(&out), "--source-sr", "8000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("segment_length = 8000"), "resolved config not echoed");

    let m: PreparedManifest = serde_json::from_str(&std::fs::read_to_string(out.join(PREPARED_MANIFEST)).unwrap()).unwrap();
    assert_eq!(m.n_utterances, 10);
    assert_eq!(m.utterances.len(), 10);
    assert_eq!(m.n_segments, 40);
    assert!(!m.multi_rate);
    assert_eq!(m.config_hash.len(), 64);
    let narrow = read_wav(out.join("narrow_8000").join(&m.utterances[0].name)).unwrap();
    assert_eq!((narrow.sample_rate, narrow.len()), (8000, 16000));
}

#[test]
fn prepare_records_source_rate_set() {
    let dir = tempfile::tempdir().unwrap();
    make_toy_corpus(2, &dir.path().join("corpus"), 16000, 1).unwrap();
    let out = dir.path().join("prep");
    let o = apbwe(&[
        "prepare",
        "--in",
        s(&dir.path().join("corpus")),
        "--out",
        s(&out),
        "--source-sr-set",
        "2000,4000,8000",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: PreparedManifest = serde_json::from_str(&std::fs::read_to_string(out.join(PREPARED_MANIFEST)).unwrap()).unwrap();
    assert!(m.multi_rate);
    assert_eq!(m.config.source_rates, [2000, 4000, 8000]);
    assert!(out.join("narrow_2000").is_dir());
}

#[test]
fn prepare_names_wrong_rate_file() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    write_wav(corpus.join("fine.wav"), &tone(1.0, 16000), WavEncoding::Pcm16).unwrap();
    write_wav(corpus.join("wrong.wav"), &tone(1.0, 44100), WavEncoding::Pcm16).unwrap();
    let o = apbwe(&["prepare", "--in", s(&corpus), "--out", s(&dir.path().join("p"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("wrong.wav"), "{}", stderr(&o));
}

#[test]
fn training_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path(), 2);
    let args = ["--steps", "3", "--seed", "7"];
    let a = train(&data, &dir.path().join("a"), &args);
    let b = train(&data, &dir.path().join("b"), &args);
    assert!(a.status.success() && b.status.success(), "{}", stderr(&a));
    assert!(stderr(&a).contains("seed = 7"));
    let log = |d: &str| std::fs::read(dir.path().join(d).join("loss.ndjson")).unwrap();
    assert_eq!(log("a"), log("b"));
    assert_eq!(String::from_utf8(log("a")).unwrap().lines().count(), 3);

    // Resuming the 3-step run to 5 steps appends two lines.
    let r = train(
        &data,
        &dir.path().join("a"),
        &["--steps", "5", "--resume", s(&dir.path().join("a").join("last.apbw"))],
    );
    assert!(r.status.success(), "{}", stderr(&r));
    assert_eq!(String::from_utf8(log("a")).unwrap().lines().count(), 5);
}

#[test]
fn training_without_discriminators() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path(), 2);
    let o = train(&data, &dir.path().join("run"), &["--steps", "2", "--no-mpd", "--no-mrad", "--no-mrpd"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("run").join("loss.ndjson")).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["l_d"], 0.0);
        assert_eq!(v["l_g"].as_f64().unwrap() as f32, v["l_s"].as_f64().unwrap() as f32);
    }
}

#[test]
fn non_finite_loss_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path(), 1);
    let mut t = Trainer::<f32>::new(TrainConfig::smoke()).unwrap();
    for p in t.generator.params.params_mut() {
        p.tensor.values_mut().fill(f32::INFINITY);
    }
    let ckpt = dir.path().join("bad.apbw");
    save_checkpoint(&ckpt, &t.to_checkpoint().unwrap()).unwrap();
    let o = train(&data, &dir.path().join("run"), &["--steps", "2", "--resume", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("step 1"), "{}", stderr(&o));
}

/// Checkpoint from a one-step smoke run.
fn checkpoint(dir: &Path) -> PathBuf {
    let data = prepared(dir, 1);
    let o = train(&data, &dir.join("run"), &["--steps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("run").join("last.apbw")
}

#[test]
fn extend_file_and_directory() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());

    let input = dir.path().join("one.wav");
    write_wav(&input, &tone(1.0, 8000), WavEncoding::Pcm16).unwrap();
    let out = dir.path().join("out/one_wb.wav");
    let o = apbwe(&["extend", "--ckpt", s(&ckpt), "--in", s(&input), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let y = read_wav(&out).unwrap();
    assert_eq!((y.sample_rate, y.len()), (16000, 16000));

    let nb = dir.path().join("nb");
    std::fs::create_dir(&nb).unwrap();
    for (name, secs) in [("a.wav", 0.5), ("b.wav", 0.75)] {
        write_wav(nb.join(name), &tone(secs, 8000), WavEncoding::Pcm16).unwrap();
    }
    let wb = dir.path().join("wb");
    let o = apbwe(&["extend", "--ckpt", s(&ckpt), "--in", s(&nb), "--out", s(&wb), "--threads", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_wav(wb.join("a.wav")).unwrap().len(), 8000);
    assert_eq!(read_wav(wb.join("b.wav")).unwrap().len(), 12000);

    let odd = dir.path().join("odd.wav");
    write_wav(&odd, &tone(1.0, 11025), WavEncoding::Pcm16).unwrap();
    let o = apbwe(&["extend", "--ckpt", s(&ckpt), "--in", s(&odd), "--out", s(&dir.path().join("x.wav"))]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("odd.wav") && stderr(&o).contains("11025"), "{}", stderr(&o));
}

fn eval_dirs(dir: &Path) -> (PathBuf, PathBuf) {
    let (r, e) = (dir.join("ref"), dir.join("est"));
    make_toy_corpus(2, &r, 48000, 3).unwrap();
    make_toy_corpus(2, &e, 48000, 3).unwrap();
    (r, e)
}

#[test]
fn eval_identical_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (r, e) = eval_dirs(dir.path());
    let nd = dir.path().join("report.ndjson");
    let o = apbwe(&["eval", "--ref", s(&r), "--est", s(&e), "--ndjson", s(&nd)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[..5], ["id", "lsd", "awpd_ip", "awpd_gd", "awpd_iaf"]);
    assert!(header.contains(&"lsd_12000_24000"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].starts_with("mean,"));
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        for c in &cells[1..cells.len() - 1] {
            assert_eq!(c.parse::<f64>().unwrap(), 0.0, "{row}");
        }
    }
    assert_eq!(std::fs::read_to_string(nd).unwrap().lines().count(), 3);
}

#[test]
fn eval_band_flag_and_missing_counterpart() {
    let dir = tempfile::tempdir().unwrap();
    let (r, e) = eval_dirs(dir.path());
    let o = apbwe(&["eval", "--ref", s(&r), "--est", s(&e), "--bands", "0-4000,4000-24000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let header = stdout(&o).lines().next().unwrap().to_string();
    assert!(header.contains("lsd_0_4000") && header.contains("awpd_iaf_4000_24000"), "{header}");
    assert!(!header.contains("12000"));

    assert_eq!(apbwe(&["eval", "--ref", s(&r), "--est", s(&e), "--bands", "9-3"]).status.code(), Some(2));

    std::fs::remove_file(e.join("toy_001.wav")).unwrap();
    let o = apbwe(&["eval", "--ref", s(&r), "--est", s(&e)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("toy_001.wav"));
}

#[test]
fn bench_reports_rtf_and_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let nb = dir.path().join("nb");
    std::fs::create_dir(&nb).unwrap();
    for i in 0..3 {
        write_wav(nb.join(format!("{i}.wav")), &tone(0.1, 8000), WavEncoding::Pcm16).unwrap();
    }
    let o = apbwe(&["bench", "--stub-rtf", "0.5", "--testset", s(&nb)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let rtf: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("rtf: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((rtf - 0.5).abs() < 0.02, "{out}");
    assert!(out.contains("x real-time"));

    let ckpt = checkpoint(dir.path());
    let o = apbwe(&["bench", "--ckpt", s(&ckpt), "--testset", s(&nb)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("gflops_per_second_of_audio"));
}

#[test]
fn gradcheck_passes() {
    let o = apbwe(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().count() >= 60);
    assert!(out.lines().all(|l| l.starts_with("PASS")));
    for op in ["conv1d", "conv2d", "generator_forward", "mrpd_forward", "feature_matching"] {
        assert!(out.contains(op), "{op} missing");
    }
}
