use std::collections::BTreeSet;

use apbwe::audio::{load_checkpoint, Waveform};
use apbwe::autodiff::Tape;
use apbwe::model::Generator;
use apbwe::synth::Manifest;
use apbwe::train::*;
use apbwe::Error;

fn corpus(n: usize, seed: u64) -> Vec<(String, Waveform)> {
    Manifest::toy(n, 16000, 0.5, seed)
        .utterances
        .iter()
        .map(|u| (u.file.clone(), u.render().unwrap()))
        .collect()
}

fn dataset(cfg: &TrainConfig, n: usize) -> Dataset {
    Dataset::new(corpus(n, 1), cfg.target_sr(), &cfg.source_rates, cfg.segment_length, &cfg.trim).unwrap()
}

fn run(cfg: &TrainConfig, ds: &Dataset, steps: u64) -> (Trainer<f32>, Vec<u8>) {
    let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
    let mut log = Vec::new();
    t.run(ds, steps, &mut log, &mut |_, _| Ok(())).unwrap();
    (t, log)
}

#[test]
fn same_seed_gives_identical_logs() {
    let cfg = TrainConfig::smoke();
    let ds = dataset(&cfg, 4);
    let (a, log_a) = run(&cfg, &ds, 4);
    let (b, log_b) = run(&cfg, &ds, 4);
    assert_eq!(log_a, log_b);
    assert_eq!(a.generator.params.checksum(), b.generator.params.checksum());

    let mut other = cfg.clone();
    other.seed = 9;
    let (_, log_c) = run(&other, &ds, 4);
    assert_ne!(log_a, log_c);
}

#[test]
fn log_has_every_term_each_step() {
    let cfg = TrainConfig::smoke();
    let ds = dataset(&cfg, 2);
    let (_, log) = run(&cfg, &ds, 3);
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let names: BTreeSet<&str> = apbwe::losses::LossReport::default().terms().iter().map(|(n, _)| *n).collect();
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["step"], i as u64 + 1);
        for n in &names {
            assert!(v[n].as_f64().is_some_and(f64::is_finite), "{n} missing at line {i}");
        }
    }
}

#[test]
fn lr_decays_once_per_epoch() {
    let cfg = TrainConfig::smoke();
    // One 0.5 s utterance holds two 4000-sample slots: two steps per epoch.
    let ds = dataset(&cfg, 1);
    let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
    assert_eq!(t.steps_per_epoch(&ds).unwrap(), 2);
    let mut lrs = Vec::new();
    t.run(&ds, 5, &mut std::io::sink(), &mut |t, _| {
        lrs.push((t.epoch(), t.lr()));
        Ok(())
    })
    .unwrap();
    let base = cfg.optimizer.lr;
    let expected = [0, 0, 1, 1, 2].map(|e| (e, base * cfg.lr_decay.powi(e as i32)));
    assert_eq!(lrs, expected);
    assert_eq!(lrs[4].1, 2e-4 * 0.999 * 0.999);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut cfg = TrainConfig::smoke();
    cfg.steps = 8;
    cfg.checkpoint_every = 4;
    let ds = dataset(&cfg, 3);
    let dir = tempfile::tempdir().unwrap();

    let full = train_loop(cfg.clone(), &ds, &dir.path().join("full"), None).unwrap();
    let mid = load_checkpoint(checkpoint_path(&dir.path().join("full"), 4)).unwrap();
    let resumed = train_loop(cfg.clone(), &ds, &dir.path().join("resumed"), Some(&mid)).unwrap();
    assert_eq!(resumed.step, 8);
    assert_eq!(resumed.reports.len(), 4);
    assert_eq!(full.reports[4..], resumed.reports[..]);

    let a = load_checkpoint(&full.final_checkpoint).unwrap();
    let b = load_checkpoint(&resumed.final_checkpoint).unwrap();
    let ta = Trainer::<f32>::from_checkpoint(cfg.clone(), &a).unwrap();
    let tb = Trainer::<f32>::from_checkpoint(cfg.clone(), &b).unwrap();
    assert_eq!(ta.generator.params.checksum(), tb.generator.params.checksum());
    assert_eq!(ta.discriminators.params.checksum(), tb.discriminators.params.checksum());
    assert_eq!(checkpoint_config(&a).unwrap(), cfg);
    assert_eq!(a.metadata["precision"], "f32");
}

#[test]
fn without_discriminators_generator_loss_is_scaled_spectral_loss() {
    let mut cfg = TrainConfig::smoke();
    cfg.apply(Ablation {
        no_mpd: true,
        no_mrad: true,
        no_mrpd: true,
        ..Ablation::default()
    });
    let ds = dataset(&cfg, 2);
    let lambda = cfg.losses.spectral;

    let mut t = Trainer::<f64>::new(cfg.clone()).unwrap();
    assert!(t.discriminators.is_empty());
    let reports = t.run(&ds, 3, &mut std::io::sink(), &mut |_, _| Ok(())).unwrap();
    for r in &reports {
        assert_eq!(r.l_g, lambda * r.l_s);
        assert_eq!(r.l_d, 0.0);
    }

    let (_, log) = run(&cfg, &ds, 2);
    for line in String::from_utf8(log).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let (l_g, l_s) = (v["l_g"].as_f64().unwrap() as f32, v["l_s"].as_f64().unwrap() as f32);
        assert_eq!(l_g, lambda as f32 * l_s);
    }
}

#[test]
fn detachment_checks_pass() {
    let mut cfg = TrainConfig::smoke();
    cfg.check_detachment = true;
    let ds = dataset(&cfg, 2);
    let (t, _) = run(&cfg, &ds, 2);
    assert_eq!(t.step, 2);
}

#[test]
fn non_finite_weights_abort_with_diagnostic() {
    let cfg = TrainConfig::smoke();
    let ds = dataset(&cfg, 2);
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    let before = t.discriminators.params.checksum();
    for p in t.generator.params.params_mut() {
        if p.name.starts_with("amp.") {
            p.tensor.values_mut().fill(f32::NAN);
        }
    }
    let batch = t.next_batch(&ds).unwrap();
    match t.train_step(&batch, 2) {
        Err(Error::NonFiniteLoss { step, term }) => {
            assert_eq!(step, 1);
            assert_eq!(term, "l_a");
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
    assert_eq!(t.step, 0);
    assert_eq!(t.discriminators.params.checksum(), before);
}

#[test]
fn multi_rate_batches_sample_every_rate() {
    let mut cfg = TrainConfig::smoke();
    cfg.source_rates = vec![2000, 4000, 8000];
    let ds = dataset(&cfg, 4);
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    let mut seen = BTreeSet::new();
    for step in 0..40 {
        t.step = step;
        for ex in t.next_batch(&ds).unwrap() {
            let n = (16000 / ex.narrow.sample_rate) as usize;
            assert_eq!(ex.narrow.len() * n, ex.wide.len());
            assert_eq!(ex.offset % n, 0);
            seen.insert(ex.narrow.sample_rate);
        }
    }
    assert_eq!(seen, BTreeSet::from([2000, 4000, 8000]));
}

#[test]
fn ablation_toggles_the_named_parts() {
    let mut cfg = TrainConfig::default();
    cfg.apply(Ablation {
        no_mrad: true,
        no_mrpd: true,
        no_p2a: true,
        ..Ablation::default()
    });
    assert!(cfg.discriminator.enable_mpd && !cfg.discriminator.enable_mrad && !cfg.discriminator.enable_mrpd);
    assert!(cfg.generator.amp_to_phase && !cfg.generator.phase_to_amp);

    let mut small = TrainConfig::smoke();
    small.discriminator = cfg.discriminator.clone();
    let t = Trainer::<f32>::new(small).unwrap();
    assert_eq!(t.discriminators.len(), 5);
}

/// Phase (or amplitude) output of the generator for a fixed input.
fn stream_outputs(g: &Generator<f64>, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let w = g.params.bind(&mut tape, false);
    let syn = g.synthesize(&mut tape, &w, input).unwrap();
    (tape.value(syn.log_amp).to_vec(), tape.value(syn.phase).to_vec())
}

fn perturb(g: &mut Generator<f64>, amplitude: bool) {
    for name in g.stream_param_names(amplitude) {
        let p = g.params.get_mut(&name).unwrap();
        for (i, v) in p.tensor.values_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i % 7) as f64 - 3.0);
        }
    }
}

#[test]
fn disabled_exchange_isolates_the_receiving_stream() {
    let input: Vec<f64> = corpus(1, 4)[0].1.samples[..4000].to_vec();
    for amp_to_phase in [false, true] {
        let mut cfg = TrainConfig::smoke().generator;
        cfg.n_blocks = 2;
        cfg.amp_to_phase = amp_to_phase;
        cfg.phase_to_amp = !amp_to_phase;
        let g = Generator::<f64>::new(cfg, 3).unwrap();
        let (amp, phase) = stream_outputs(&g, &input);

        // Perturb the stream whose residuals no longer reach the other one.
        let mut h = g.clone();
        perturb(&mut h, !amp_to_phase);
        let (amp2, phase2) = stream_outputs(&h, &input);
        if amp_to_phase {
            assert_eq!(amp, amp2, "P->A off: amplitude must ignore phase weights");
            assert_ne!(phase, phase2);
        } else {
            assert_eq!(phase, phase2, "A->P off: phase must ignore amplitude weights");
            assert_ne!(amp, amp2);
        }
    }
}
