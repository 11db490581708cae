use std::path::Path;
use std::process::{Command, Output};

use tera_core::features::{load_features, write_wav};

fn tera(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tera")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn micro_config(dir: &Path, steps: u64) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    let text = format!(
        r#"{{"total_steps": {steps}, "batch_size": 4, "checkpoint_every": 5,
            "model": {{"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32, "input_dim": 16}}}}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn unknown_flag_prints_usage() {
    let o = tera(&["selftest", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(code(&tera(&["frobnicate"])), 1);
    assert_eq!(code(&tera(&["--help"])), 0);
}

#[test]
fn selftest_is_deterministic() {
    let a = tera(&["selftest", "--seed", "7", "--draws", "20000"]);
    let b = tera(&["selftest", "--seed", "7", "--draws", "20000"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).lines().count() >= 7);
}

#[test]
fn gradcheck_passes() {
    let o = tera(&["gradcheck", "--seeds", "5", "--directions", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn config_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("broken.json");
    std::fs::write(&cfg, r#"{"total_steps": 10, "model": {"n_layers": 2}}"#).unwrap();
    let o = tera(&["pretrain", "--config", p(&cfg), "--synthetic", "--out", p(&dir.path().join("run"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("broken.json"), "{}", stderr(&o));

    let missing = dir.path().join("absent.json");
    let o = tera(&["pretrain", "--config", p(&missing), "--synthetic", "--out", p(&dir.path().join("run"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("absent.json"));

    // exactly one corpus source
    let o = tera(&["pretrain", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&o), 1);
}

#[test]
fn input_dim_mismatch_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"total_steps": 2, "model": {"n_layers": 1, "d_model": 8, "n_heads": 2, "d_ff": 8, "input_dim": 80}}"#).unwrap();
    let o = tera(&["pretrain", "--config", p(&cfg), "--synthetic", "--out", p(&dir.path().join("run"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("input_dim"), "{}", stderr(&o));
}

#[test]
fn synth_pretrain_extract_probe() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = tera(&["synth", "--out", p(&data), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = data.join("manifest.tsv");
    assert!(std::fs::read_to_string(&manifest).unwrap().starts_with("utterance_id\tspeaker_id\tpath\tlabel_path\n"));

    let cfg = micro_config(dir.path(), 12);
    let run = dir.path().join("run");
    let dump = dir.path().join("alter.jsonl");
    let args = ["pretrain", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&run), "--dump-alterations", p(&dump)];
    let o = tera(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let final_ck = run.join("final.tckp");
    let first = std::fs::read(&final_ck).unwrap();
    assert!(first.starts_with(b"TCKP1"));
    assert!(run.join("loss.csv").is_file() && run.join("step-00000005.tckp").is_file());
    assert_eq!(std::fs::read_to_string(&dump).unwrap().lines().count(), 12);

    // a second invocation resumes the finished run and rewrites identical bytes
    assert_eq!(code(&tera(&args)), 0);
    assert_eq!(std::fs::read(&final_ck).unwrap(), first);

    for layer in ["last", "ws"] {
        let reps = dir.path().join(format!("reps-{layer}"));
        let o = tera(&["extract", "--checkpoint", p(&final_ck), "--manifest", p(&manifest), "--out", p(&reps), "--layer", layer]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let first = std::fs::read_dir(&reps).unwrap().filter_map(|e| e.ok()).find(|e| e.path().extension().is_some_and(|x| x == "tfea"));
        assert_eq!(load_features(first.unwrap().path()).unwrap().num_channels(), 16);

        let json = dir.path().join(format!("probe-{layer}.json"));
        let o = tera(&["probe", "--manifest", p(&reps.join("manifest.tsv")), "--task", "phone_frame", "--epochs", "3", "--json", p(&json)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("phone_frame"));
        let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert!(report["test_accuracy"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn probe_on_random_features_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("rand");
    let o = tera(&["synth", "--random", "--utterances", "400", "--frames", "10", "--classes", "4", "--seed", "5", "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json = dir.path().join("r.json");
    let o = tera(&[
        "probe", "--manifest", p(&data.join("manifest.tsv")), "--task", "speaker_utterance", "--epochs", "10", "--json", p(&json),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let acc = report["test_accuracy"].as_f64().unwrap();
    let n = report["test_items"].as_f64().unwrap();
    let sigma = (0.25f64 * 0.75 / n).sqrt();
    assert!((acc - 0.25).abs() <= 3.0 * sigma, "accuracy {acc} over {n} items");
}

#[test]
fn phone_probe_needs_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&tera(&["synth", "--out", p(&data)])), 0);
    let m = data.join("manifest.tsv");
    let text = std::fs::read_to_string(&m).unwrap();
    let stripped: String = text.lines().map(|l| l.rsplit_once('\t').unwrap().0.to_string() + "\n").collect();
    let bare = data.join("bare.tsv");
    std::fs::write(&bare, stripped).unwrap();
    let o = tera(&["probe", "--manifest", p(&bare), "--task", "phone_frame"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("label_path"), "{}", stderr(&o));
}

#[test]
fn features_from_wavs() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::from("utterance_id\tspeaker_id\tpath\n");
    for (i, hz) in [440.0, 880.0, 1320.0].iter().enumerate() {
        let samples: Vec<i16> =
            (0..8000).map(|t| (6000.0 * (2.0 * std::f64::consts::PI * hz * t as f64 / 16_000.0).sin()) as i16).collect();
        write_wav(dir.path().join(format!("w{i}.wav")), &samples, 16_000).unwrap();
        manifest.push_str(&format!("u{i}\ts{}\tw{i}.wav\n", i % 2));
    }
    std::fs::write(dir.path().join("m.tsv"), manifest).unwrap();
    let out = dir.path().join("feats");
    let o = tera(&["features", "--manifest", p(&dir.path().join("m.tsv")), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fm = load_features(out.join("u0.tfea")).unwrap();
    assert_eq!((fm.num_frames(), fm.num_channels()), ((8000 - 400) / 160 + 1, 80));

    let o = tera(&["features", "--manifest", p(&dir.path().join("m.tsv")), "--out", p(&out), "--kind", "mfcc", "--no-cmvn"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_features(out.join("u2.tfea")).unwrap().num_channels(), 39);

    std::fs::write(dir.path().join("bad.tsv"), "utterance_id\tspeaker_id\tpath\nu\ts\tmissing.wav\n").unwrap();
    let o = tera(&["features", "--manifest", p(&dir.path().join("bad.tsv")), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing.wav"));
}

#[test]
fn micro_config_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/micro.json");
    let t0 = std::time::Instant::now();
    let o = tera(&["pretrain", "--config", p(&cfg), "--synthetic", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("final.tckp").is_file());
    assert!(t0.elapsed().as_secs() < 300);
}
