use std::fs;

use tera_core::encoder::{ModelConfig, Preset};
use tera_core::features::FRAME_SHIFT_MS;
use tera_core::pretrain::{lr_at_step, pretrain, train_step, Checkpoint, TrainConfig, TrainState, TCKP_MAGIC};
use tera_core::synth::{generate, SynthConfig};
use tera_core::{FeatureKind, FeatureMatrix, Tensor, TeraError};

fn small_corpus(utterances: usize) -> Vec<FeatureMatrix> {
    let c = generate(&SynthConfig { speakers: 1, utterances_per_speaker: utterances, ..SynthConfig::default() }).unwrap();
    c.features
}

fn config(steps: u64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(ModelConfig::preset(Preset::Micro, 16), steps);
    cfg.batch_size = 2;
    cfg.seed = seed;
    cfg
}

#[test]
fn ten_steps_on_three_utterances() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(10, 1);
    let state = pretrain(&small_corpus(3), &cfg, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(state.step, 10);
    let ck = Checkpoint::load(dir.path().join("final.tckp")).unwrap();
    assert_eq!(ck.step, 10);
    assert_eq!(ck.history.len(), 10);
    assert_eq!(ck.config, cfg);
    let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn resume_from_step_five_matches_uninterrupted() {
    let corpus = small_corpus(3);
    let mut cfg = config(10, 2);
    cfg.checkpoint_every = Some(5);
    let dir = tempfile::tempdir().unwrap();
    let (whole, resumed) = (dir.path().join("whole"), dir.path().join("resumed"));
    let a = pretrain(&corpus, &cfg, Some(&whole), |_| {}).unwrap();

    fs::create_dir_all(&resumed).unwrap();
    fs::copy(whole.join("step-00000005.tckp"), resumed.join("step-00000005.tckp")).unwrap();
    let mut steps = Vec::new();
    let b = pretrain(&corpus, &cfg, Some(&resumed), |r| steps.push(r.step)).unwrap();
    assert_eq!(steps, (6..=10).collect::<Vec<_>>());
    assert_eq!(a.model.store, b.model.store);
    assert_eq!(fs::read(whole.join("final.tckp")).unwrap(), fs::read(resumed.join("final.tckp")).unwrap());
}

#[test]
fn resuming_with_another_config_is_refused() {
    let corpus = small_corpus(3);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(4, 3);
    cfg.checkpoint_every = Some(2);
    pretrain(&corpus, &cfg, Some(dir.path()), |_| {}).unwrap();
    cfg.peak_lr *= 2.0;
    assert!(matches!(pretrain(&corpus, &cfg, Some(dir.path()), |_| {}), Err(TeraError::Incompatible(_))));
}

#[test]
fn identical_runs_are_bit_identical() {
    let corpus = small_corpus(4);
    let cfg = config(6, 4);
    let a = pretrain(&corpus, &cfg, None, |_| {}).unwrap().to_checkpoint(&cfg).to_bytes();
    let b = pretrain(&corpus, &cfg, None, |_| {}).unwrap().to_checkpoint(&cfg).to_bytes();
    assert_eq!(a, b);
    let other = pretrain(&corpus, &config(6, 5), None, |_| {}).unwrap().to_checkpoint(&cfg).to_bytes();
    assert_ne!(a, other);
}

#[test]
fn reported_lr_follows_schedule() {
    let cfg = config(20, 6);
    let mut seen = Vec::new();
    pretrain(&small_corpus(3), &cfg, None, |r| seen.push((r.step, r.lr))).unwrap();
    for (step, lr) in seen {
        assert_eq!(lr, lr_at_step(step as f64, cfg.total_steps, cfg.peak_lr, cfg.warmup_fraction).unwrap());
    }
}

#[test]
fn loss_on_a_frozen_batch_descends() {
    // repeating spectral pattern: a short ramp cycled over time
    let pattern: Vec<f32> = (0..40 * 16).map(|i| (((i / 16) % 5) as f32 - 2.0) * 0.5 + (i % 16) as f32 * 0.05).collect();
    let fm = FeatureMatrix::new("p", "s", Tensor::new(vec![40, 16], pattern).unwrap(), FeatureKind::Other, FRAME_SHIFT_MS).unwrap();
    let batch = [&fm, &fm];
    let steps = 50;
    let mut mean = vec![0f64; steps];
    for seed in 0..5 {
        // the first 50 steps of a longer run, so the schedule has not decayed yet
        let mut cfg = config(500, seed);
        cfg.peak_lr = 5e-3;
        let mut state = TrainState::new(&cfg).unwrap();
        for m in mean.iter_mut() {
            *m += train_step(&mut state, &batch, &cfg).unwrap().loss as f64 / 5.0;
        }
    }
    // averaged over windows of ten steps the loss falls every time
    let windows: Vec<f64> = mean.chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    assert!(mean[steps - 1] < 0.5 * mean[0], "{} → {}", mean[0], mean[steps - 1]);
}

#[test]
fn checkpoint_bytes_are_stable_and_checked() {
    let cfg = config(2, 7);
    let state = pretrain(&small_corpus(3), &cfg, None, |_| {}).unwrap();
    let bytes = state.to_checkpoint(&cfg).to_bytes();
    let again = Checkpoint::from_bytes(&bytes, "mem").unwrap();
    assert_eq!(again.to_bytes(), bytes);
    assert_eq!(again.model().unwrap().store, state.model.store);

    for cut in [0, 3, 5, 9, 13, bytes.len() / 3, bytes.len() / 2, bytes.len() - 1] {
        let e = Checkpoint::from_bytes(&bytes[..cut], "cut.tckp").unwrap_err();
        assert!(matches!(e, TeraError::Parse { .. }), "cut {cut}: {e}");
        assert!(e.to_string().contains("cut.tckp"));
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing, "t").is_err());

    let mut versioned = bytes.clone();
    versioned[5] = 9;
    assert!(matches!(Checkpoint::from_bytes(&versioned, "v"), Err(TeraError::Incompatible(_))));
    let mut format = bytes;
    format[4] = b'2';
    assert!(matches!(Checkpoint::from_bytes(&format, "f"), Err(TeraError::Incompatible(_))));
    assert_eq!(&TCKP_MAGIC[..], b"TCKP1");
}

#[test]
fn micro_checkpoint_is_small() {
    let cfg = TrainConfig::new(ModelConfig::preset(Preset::Micro, 80), 1);
    let state = TrainState::new(&cfg).unwrap();
    let n = state.to_checkpoint(&cfg).to_bytes().len();
    let params: usize = state.model.store.tensors().iter().map(|t| t.len()).sum();
    // parameters plus two Adam moments, four bytes each, and a small header
    assert!(n >= 12 * params && n < 12 * params + 64 * 1024, "{n} bytes for {params} parameters");
    assert!(n < 10 * 1024 * 1024);
}
